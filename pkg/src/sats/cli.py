"""``sats`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradcheck, metrics, phantom, plots
from .asymmetry import asym_mask, asym_stats
from .errors import InvalidConfig, SatsError
from .losses import LossConfig
from .network import NetConfig, load_checkpoint
from .trainer import TrainConfig, Trainer, infer, prepare_case
from .volume import read_mask, read_volume, symmetry_normalize, write_mask, write_volume

log = logging.getLogger("sats")


class UsageError(SatsError):
    exit_code = 2


def _triple(text, kind=float):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _size(text):
    return _triple(text, int)


def _range(text):
    parts = text.split(":") if ":" in text else [text, text]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO:HI or a single value, got {text!r}")
    return float(parts[0]), float(parts[1])


# commands ----------------------------------------------------------------

def cmd_phantom_gen(args):
    spec = phantom.PhantomSpec(
        shape=args.size,
        spacing=args.spacing,
        noise_sigma=args.noise,
        lesion_contrast=args.contrast,
        lesion_asym_fraction=args.asym_frac[0],
    )
    asym_range = args.asym_frac if args.asym_frac[0] != args.asym_frac[1] else None
    phantom.generate_dataset(spec, args.count, args.seed, args.out, asym_range)
    print(Path(args.out) / "manifest.json")


def _load_config(path):
    if path is None:
        return {}, {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    return dict(data.get("train", {})), dict(data.get("net", {}))


def _train_configs(args):
    train, net = _load_config(args.config)
    flags = {
        "seed": args.seed,
        "variant": args.variant,
        "stage1_epochs": args.stage1_epochs,
        "stage2_epochs": args.stage2_epochs,
        "batch_size": args.batch_size,
        "patch_size": args.patch,
    }
    train.update({k: v for k, v in flags.items() if v is not None})
    net_flags = {"base_filters": args.base_filters, "n_downsamplings": args.downs}
    net.update({k: v for k, v in net_flags.items() if v is not None})
    loss = train.get("loss", {})
    if isinstance(loss, LossConfig):
        loss = loss.__dict__
    loss = dict(loss)
    if args.beta is not None:
        loss["beta"] = args.beta
    if args.margin_convention is not None:
        loss["margin_convention"] = args.margin_convention
    if train.get("variant") == "baseline":
        loss["beta"] = 0.0
    train["loss"] = LossConfig(**loss)
    try:
        return TrainConfig(**train), NetConfig(**net)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def _prepared_cases(data_dir, normalize):
    return [prepare_case(cid, vol, mask, normalize) for cid, vol, mask in phantom.load_dataset(data_dir)]


def cmd_train(args):
    cfg, net = _train_configs(args)
    cases = _prepared_cases(args.data, cfg.normalize_symmetry)
    if args.resume is not None:
        trainer = Trainer.resume(cases, args.resume, run_dir=args.out)
    else:
        if args.stage == "2":
            raise UsageError("--stage 2 needs --resume pointing at a stage-1 checkpoint")
        trainer = Trainer(cases, cfg, net, run_dir=args.out)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    state = trainer.train(stages)
    final = Path(args.out) / "final"
    trainer.save(final)
    print(f"stage {state.stage} epoch {state.epoch} -> {final}.json")


def _volume_files(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.glob("case_*.json") if not p.name.endswith("_mask.json"))
        return [(p.stem[len("case_"):], p) for p in files]
    return [(None, path)]


def cmd_infer(args):
    model, manifest, _ = load_checkpoint(args.ckpt)
    patch = tuple(manifest["meta"].get("train", {}).get("patch_size", (48, 96, 96)))
    if args.patch is not None:
        patch = args.patch
    items = _volume_files(args.inp)
    out = Path(args.out)
    for cid, src in items:
        mask = infer(model, read_volume(src), patch)
        dest = out / f"case_{cid}_mask" if cid is not None else out
        write_mask(dest, mask)
        log.info("%s: %d lesion voxels", src, mask.count())
    print(out)


def cmd_eval(args):
    rows, summary = metrics.evaluate_dir(args.pred, args.gt, args.report, args.json_dir)
    for r in rows:
        print(f"{r['case_id']}  dsc {r['dsc']:.2f}  hd95 {metrics._fmt(r['hd95'])}  asd {metrics._fmt(r['asd'])}")
    print(f"DSC {metrics.format_mean_sd(summary['dsc'])}  HD95 {metrics.format_mean_sd(summary['hd95'])}  "
          f"ASD {metrics.format_mean_sd(summary['asd'])}")
    if args.plot is not None:
        plot_dir = Path(args.plot)
        plot_dir.mkdir(parents=True, exist_ok=True)
        dsc_svg, asym_svg = plots.report_figures(rows)
        (plot_dir / "dsc_per_case.svg").write_text(dsc_svg)
        (plot_dir / "asym_size.svg").write_text(asym_svg)


def cmd_asym_mask(args):
    mask = read_mask(args.inp)
    write_mask(args.out, asym_mask(mask))
    s = asym_stats(mask)
    print(json.dumps({"asym_voxels": s.asym_voxels, "lesion_voxels": s.lesion_voxels, "asym_ml": s.asym_ml}))


def cmd_symnorm(args):
    vol, params = symmetry_normalize(read_volume(args.inp))
    write_volume(args.out, vol)
    if args.mask is not None:
        from .volume import resample_mask

        write_mask(args.mask_out or str(args.mask) + "_sym", resample_mask(read_mask(args.mask), params))
    print(json.dumps({"yaw": params.yaw, "roll": params.roll, "tw": params.tw}))


def cmd_gradcheck(args):
    if not args.double:
        log.warning("finite differences need double precision; running in float64 anyway")
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    results = gradcheck.run_all(seeds, args.tol, include_composite=not args.skip_composite)
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) above tolerance {args.tol:g}")
        return 4
    return 0


# parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sats", description="Symmetry-aware Siamese lesion segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom datasets")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    g = phs.add_parser("gen", help="generate a phantom dataset directory")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=_size, default=(48, 96, 96), help="DxHxW voxels")
    g.add_argument("--contrast", type=float, default=0.04)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--asym-frac", type=_range, default=(0.75, 0.75), help="value or LO:HI range")
    g.add_argument("--spacing", type=_triple, default=(1.0, 1.0, 1.0), help="DxHxW millimeters")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train a model on a phantom dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with optional 'train' and 'net' sections")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=("baseline", "sats", "margin-only"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patch", type=_size, help="DxHxW patch size")
    t.add_argument("--base-filters", type=int)
    t.add_argument("--downs", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--margin-convention", choices=("prose", "literal"))
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment volumes with a trained checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True, help="volume file or dataset directory")
    i.add_argument("--out", required=True, help="mask file or output directory")
    i.add_argument("--patch", type=_size, help="sliding-window size (default: training patch)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", help="CSV report path")
    e.add_argument("--json-dir", help="directory for per-case JSON rows")
    e.add_argument("--plot", help="directory for SVG figures")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("asym-mask", help="asymmetric part of a lesion mask")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_asym_mask)

    s = sub.add_parser("symnorm", help="align a volume's mid-sagittal plane with the grid center")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask", help="mask to carry through the same transform")
    s.add_argument("--mask-out")
    s.set_defaults(func=cmd_symnorm)

    c = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--double", action="store_true", help="double precision (always used)")
    c.add_argument("--skip-composite", action="store_true", help="omit the whole-network check")
    c.set_defaults(func=cmd_gradcheck)
    return p


def _threads():
    value = os.environ.get("SATS_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise InvalidConfig(f"SATS_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise InvalidConfig("SATS_THREADS must be >= 1")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            code = args.func(args)
    except SatsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
