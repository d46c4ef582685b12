import json
import re
import xml.etree.ElementTree as ET

import pytest

from sats import cli
from sats.network import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


def subparsers(parser):
    for action in parser._actions:
        if action.__class__.__name__ == "_SubParsersAction":
            return action.choices
    return {}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("phantom", "gen", "--count", 3, "--seed", 7, "--out", out, "--size", "16x32x32", "--contrast", 0.3) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run("train", "--data", dataset, "--out", out, "--stage1-epochs", 1, "--stage2-epochs", 1,
               "--patch", "16x32x32", "--base-filters", 4, "--downs", 2)
    assert code == 0
    return out


def test_help_lists_every_flag():
    parser = cli.build_parser()
    commands = subparsers(parser)
    commands.update({f"phantom {k}": v for k, v in subparsers(commands.pop("phantom")).items()})
    assert set(commands) == {"phantom gen", "train", "infer", "eval", "asym-mask", "symnorm", "gradcheck"}
    for name, sub in commands.items():
        text = sub.format_help()
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
    train_help = commands["train"].format_help()
    for flag in ("--data", "--out", "--config", "--stage", "--seed", "--variant"):
        assert flag in train_help


def test_phantom_gen_is_deterministic(dataset, tmp_path):
    run("phantom", "gen", "--count", 3, "--seed", 7, "--out", tmp_path, "--size", "16x32x32", "--contrast", 0.3)
    ours = sorted(p.name for p in tmp_path.iterdir())
    assert ours == sorted(p.name for p in dataset.iterdir())
    assert len([n for n in ours if n.endswith("_mask.raw")]) == 3
    for name in ours:
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()


def test_eval_identical_dirs_is_perfect(dataset, tmp_path, capsys):
    report = tmp_path / "report.csv"
    assert run("eval", "--pred", dataset, "--gt", dataset, "--report", report, "--plot", tmp_path / "fig") == 0
    out = capsys.readouterr().out
    assert "DSC 100.00 ± 0.00" in out
    rows = report.read_text().splitlines()
    assert len(rows) == 1 + 3 + 1
    for name in ("dsc_per_case.svg", "asym_size.svg"):
        root = ET.parse(tmp_path / "fig" / name).getroot()
        assert root.tag.endswith("svg")
    bars = ET.parse(tmp_path / "fig" / "dsc_per_case.svg").getroot().iter("{http://www.w3.org/2000/svg}rect")
    assert len(list(bars)) >= 3


def test_train_writes_run_directory(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.json", "log.csv", "final.json", "final.raw", "ckpt_1_0.json", "ckpt_2_0.json"} <= names
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["train"]["stage1_epochs"] == 1 and cfg["net"]["base_filters"] == 4


def test_infer_then_eval(trained, dataset, tmp_path, capsys):
    pred = tmp_path / "pred"
    assert run("infer", "--ckpt", trained / "final.json", "--in", dataset, "--out", pred) == 0
    assert len(list(pred.glob("case_*_mask.json"))) == 3
    assert run("eval", "--pred", pred, "--gt", dataset) == 0
    assert re.search(r"DSC \d+\.\d\d ± \d+\.\d\d", capsys.readouterr().out)


def test_baseline_variant_has_no_head(dataset, tmp_path):
    code = run("train", "--data", dataset, "--out", tmp_path, "--variant", "baseline", "--stage1-epochs", 1,
               "--stage2-epochs", 1, "--patch", "16x32x32", "--base-filters", 4, "--downs", 2, "--beta", 3)
    assert code == 0
    model, manifest, _ = load_checkpoint(tmp_path / "final.json")
    assert not model.has_projection
    assert manifest["meta"]["train"]["loss"]["beta"] == 0.0
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 1 + 2


def test_flags_override_config_file(dataset, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"train": {"stage1_epochs": 5, "stage2_epochs": 1, "seed": 3, "loss": {"beta": 0.5}},
                                "net": {"base_filters": 4, "n_downsamplings": 2}}))
    args = cli.build_parser().parse_args(["train", "--data", str(dataset), "--out", str(tmp_path),
                                          "--config", str(conf), "--stage1-epochs", "2", "--beta", "2"])
    train, net = cli._train_configs(args)
    assert train.stage1_epochs == 2 and train.stage2_epochs == 1 and train.seed == 3
    assert train.loss.beta == 2.0 and train.loss.margin == 20.0
    assert net.base_filters == 4 and net.n_downsamplings == 2
    assert train.momentum == 0.99


def test_asym_mask_and_symnorm(dataset, tmp_path, capsys):
    assert run("asym-mask", "--in", dataset / "case_0000_mask.json", "--out", tmp_path / "m") == 0
    stats = json.loads(capsys.readouterr().out)
    assert 0 < stats["asym_voxels"] <= stats["lesion_voxels"]
    assert run("symnorm", "--in", dataset / "case_0000.json", "--out", tmp_path / "v",
               "--mask", dataset / "case_0000_mask.json", "--mask-out", tmp_path / "vm") == 0
    assert set(json.loads(capsys.readouterr().out)) == {"yaw", "roll", "tw"}
    assert (tmp_path / "vm.json").exists()


def test_usage_errors_exit_2(dataset, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("phantom", "gen", "--count", 1, "--out", tmp_path, "--size", "16x32")
    assert exc.value.code == 2
    assert run("train", "--data", dataset, "--out", tmp_path, "--stage", "2") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("train", "--data", dataset, "--out", tmp_path, "--config", bad) == 2
    assert run("train", "--data", dataset, "--out", tmp_path, "--stage1-epochs", 0) == 2
    assert run("train", "--data", dataset, "--out", tmp_path, "--patch", "16x32x30") == 2


def test_data_errors_exit_3(tmp_path):
    assert run("asym-mask", "--in", tmp_path / "missing.json", "--out", tmp_path / "m") == 3
    assert run("phantom", "gen", "--count", 1, "--out", tmp_path / "p", "--size", "8x32x32") == 3


def test_threads_variable(monkeypatch, tmp_path):
    monkeypatch.setenv("SATS_THREADS", "zero")
    assert run("phantom", "gen", "--count", 1, "--out", tmp_path, "--size", "16x16x16") == 2
    monkeypatch.setenv("SATS_THREADS", "1")
    assert run("phantom", "gen", "--count", 1, "--out", tmp_path, "--size", "16x16x16") == 0


def test_gradcheck_exit_codes(capsys):
    assert run("gradcheck", "--seeds", 1, "--skip-composite", "--double") == 0
    table = capsys.readouterr().out
    assert "conv3d" in table
    assert run("gradcheck", "--seeds", 1, "--skip-composite", "--tol", 0) == 4
