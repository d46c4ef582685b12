import numpy as np
import pytest

from sats import autodiff as ad
from sats import phantom
from sats.asymmetry import asym_mask
from sats.errors import InvalidConfig, NumericalFault, PatchTooLarge
from sats.losses import LossConfig
from sats.network import NetConfig, build
from sats.trainer import (
    PreparedCase,
    TrainConfig,
    Trainer,
    crop_validity,
    feature_separation,
    infer,
    poly_lr,
    predict_probabilities,
    prepare_case,
    sample_patch,
    train_stage1,
    train_stage2,
    window_starts,
)
from sats.volume import BinaryMask, Volume

SHAPE = (16, 32, 32)
NET = NetConfig(base_filters=4, n_downsamplings=2)


def small_cases(n=4, seed=0, normalize=False):
    spec = phantom.PhantomSpec(shape=SHAPE, lesion_contrast=0.3)
    data = phantom.generate_dataset(spec, n, seed, asym_range=(0.5, 1.0))
    return [prepare_case(f"{i:04d}", v, m, normalize) for i, (v, m) in enumerate(data)]


def small_cfg(**kw):
    base = dict(stage1_epochs=2, stage2_epochs=2, patch_size=SHAPE, batch_size=2, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


class Forbidden:
    """Stands in for a tensor that must never be touched."""

    def __getattr__(self, name):
        raise AssertionError(f"projection parameter accessed ({name})")


def test_poly_lr():
    assert poly_lr(1e-2, 0, 10) == 1e-2
    assert poly_lr(1e-2, 10, 10) == 0.0
    assert abs(poly_lr(1e-2, 5, 10, 0.9) - 5.359e-3) < 1e-6


def test_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(stage1_epochs=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(stage2_lr_head=0.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(variant="other")
    with pytest.raises(InvalidConfig):
        TrainConfig(patch_size=(48, 96, 90)).check_net(NetConfig())
    cfg = TrainConfig()
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_prepare_case_normalizes_frame_and_intensity():
    v, m = phantom.generate(phantom.PhantomSpec(shape=SHAPE, rng_seed=1))
    case = prepare_case("0000", v, m)
    assert abs(float(case.image.mean())) < 1e-5 and abs(float(case.image.std()) - 1) < 1e-4
    np.testing.assert_array_equal(case._asym, asym_mask(BinaryMask(case.seg)).data)


def test_whole_volume_patch_is_deterministic():
    case = small_cases(1)[0]
    a = sample_patch(case, SHAPE, np.random.default_rng(0))
    b = sample_patch(case, SHAPE, np.random.default_rng(99))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a[0], case.image)
    assert np.all(a[3] == 1)


def test_lesion_centered_patch_contains_lesion():
    case = small_cases(1)[0]
    rng = np.random.default_rng(0)
    for _ in range(10):
        _, seg, _, _ = sample_patch(case, (8, 16, 32), rng, foreground_prob=1.0)
        assert seg.any()


def test_patch_errors():
    case = small_cases(1)[0]
    with pytest.raises(PatchTooLarge):
        sample_patch(case, (32, 32, 32), np.random.default_rng(0))
    with pytest.raises(InvalidConfig):
        sample_patch(case, (8, 8, 15), np.random.default_rng(0))


def test_crop_validity():
    assert np.all(crop_validity((4, 4, 10), 2, 6) == 1)
    assert not np.any(crop_validity((4, 4, 10), 0, 6))


def test_cropping_consistency_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(30):
        s = (rng.random((6, 7, 10)) < 0.4).astype(np.uint8)
        case = PreparedCase("x", np.zeros(s.shape, np.float32), s, asym_mask(BinaryMask(s)).data)
        pd, ph, pw = 3, 4, int(rng.choice([2, 4, 6, 8]))
        img, seg, asym, valid = sample_patch(case, (pd, ph, pw), rng, foreground_prob=0.5)
        crop_asym = asym_mask(BinaryMask(np.ascontiguousarray(seg))).data
        inside = valid.astype(bool)
        np.testing.assert_array_equal(crop_asym[inside], asym[inside])


def test_stage1_loss_decreases_in_most_seeds():
    cases = small_cases(4, seed=3)
    improved = 0
    for seed in range(5):
        state = Trainer(cases, small_cfg(seed=seed), NET).train_stage(1)
        improved += state.history[1]["total"] < state.history[0]["total"]
    assert improved >= 4


def test_stage1_never_reads_m_or_projection():
    cases = small_cases(2)
    model = build(NET, seed=0)
    for name in model.head_names():
        model.params[name] = Forbidden()
    state = train_stage1(model, cases, small_cfg(loss=LossConfig(beta=5.0)))
    assert all(c.asym_reads == 0 for c in cases)
    for row in state.history:
        assert row["l_margin"] == 0.0
        assert row["total"] == pytest.approx(row["l_dice"] + row["l_ce"], rel=1e-6)


def test_parameter_groups():
    trainer = Trainer(small_cases(1), small_cfg(), NET)
    lr_bb, lr_head = trainer.learning_rates(2, 0)
    assert (lr_bb, lr_head) == (1e-5, 1e-2)
    lrs = trainer.param_lrs(lr_bb, lr_head)
    head = {k for k, v in lrs.items() if v == lr_head}
    assert head == set(trainer.model.head_names()) and head
    assert trainer.learning_rates(1, 0) == (1e-2, None)


def test_variants():
    cases = small_cases(1)
    assert not Trainer(cases, small_cfg(variant="baseline"), NET).model.has_projection
    assert not Trainer(cases, small_cfg(variant="margin-only"), NET).model.has_projection
    base = Trainer(cases, small_cfg(variant="baseline"), NET)
    assert base.stage_epochs(1) == 4 and base.stage_epochs(2) == 0


def test_stage2_runs_margin_and_keeps_weights_shared(tmp_path):
    cases = small_cases(2)
    model = build(NET, seed=0)
    cfg = small_cfg()
    state = train_stage1(model, cases, cfg)
    state = train_stage2(model, state, cases, cfg, run_dir=tmp_path)
    assert state.stage == 2 and state.epoch == 1
    assert all(row["l_margin"] > 0 for row in state.history if row["stage"] == 2)
    assert all(c.asym_reads > 0 for c in cases)
    assert (tmp_path / "ckpt_2_1.json").exists()


def test_beta_zero_stage2_is_fine_tuning():
    cases = small_cases(2)
    trainer = Trainer(cases, small_cfg(stage1_epochs=3, stage2_epochs=2, loss=LossConfig(beta=0.0)), NET)
    trainer.train_stage(1)
    before = {k: p.data.copy() for k, p in trainer.model.params.items()}
    trainer.train_stage(2)
    for row in trainer.state.history[3:]:
        assert row["total"] == pytest.approx(row["l_dice"] + row["l_ce"], rel=1e-6)
    # the backbone only sees the small stage-2 rate, so it barely moves
    for k in trainer.model.backbone_names():
        step = np.abs(trainer.model.params[k].data - before[k]).max()
        assert step <= 1e-3 * max(np.abs(before[k]).max(), 1e-3)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cases = small_cases(2)
    cfg = small_cfg(stage1_epochs=3, stage2_epochs=2)
    full = Trainer(cases, cfg, NET, run_dir=tmp_path / "full")
    full.train()

    part = Trainer(cases, cfg, NET, run_dir=tmp_path / "part")
    part.train_stage(1, stop_after=1)
    ckpt = tmp_path / "part" / "ckpt_1_1"
    resumed = Trainer.resume(cases, ckpt, run_dir=tmp_path / "part")
    resumed.train()

    assert (tmp_path / "full" / "log.csv").read_text() == (tmp_path / "part" / "log.csv").read_text()
    for name in ("ckpt_1_2", "ckpt_2_1"):
        for ext in (".json", ".raw"):
            assert (tmp_path / "full" / (name + ext)).read_bytes() == (tmp_path / "part" / (name + ext)).read_bytes()


def test_resume_mid_stage2_does_not_rerun_stage1(tmp_path):
    cases = small_cases(2)
    cfg = small_cfg(stage1_epochs=1, stage2_epochs=3)
    t = Trainer(cases, cfg, NET, run_dir=tmp_path)
    t.train_stage(1)
    t.train_stage(2, stop_after=0)
    resumed = Trainer.resume(cases, tmp_path / "ckpt_2_0", run_dir=tmp_path)
    resumed.train()
    stages = [(r["stage"], r["epoch"]) for r in resumed.state.history]
    assert stages == [(1, 0), (2, 0), (2, 1), (2, 2)]


def test_same_seed_gives_identical_runs(tmp_path):
    cases = small_cases(2)
    for name in ("a", "b"):
        Trainer(cases, small_cfg(), NET, run_dir=tmp_path / name).train()
    for f in ("log.csv", "ckpt_2_1.raw", "ckpt_2_1.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_log_columns(tmp_path):
    Trainer(small_cases(2), small_cfg(stage2_epochs=1), NET, run_dir=tmp_path).train()
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,lr_backbone,lr_head,l_dice,l_ce,l_margin,total"
    assert len(lines) == 1 + 3
    assert (tmp_path / "config.json").exists()


def test_non_finite_parameters_raise_numerical_fault():
    trainer = Trainer(small_cases(2), small_cfg(), NET)
    w = trainer.model.params["seg.weight"]
    w.data = np.full_like(w.data, np.nan)
    with pytest.raises(NumericalFault) as exc, np.errstate(invalid="ignore"):
        trainer.train_stage(1)
    assert exc.value.epoch == 0


def test_window_starts():
    assert window_starts(32, 32) == [0]
    assert window_starts(20, 32) == [0]
    assert window_starts(40, 16) == [0, 8, 16, 24]
    assert window_starts(36, 16) == [0, 8, 16, 20]


def test_infer_single_window_and_tie_rule():
    model = build(NET, seed=0, with_projection=False)
    model.params["seg.weight"].data[:] = 0
    vol = Volume(np.random.default_rng(0).standard_normal(SHAPE).astype(np.float32))
    mask = infer(model, vol, SHAPE)
    assert mask.shape == SHAPE and mask.count() == 0


def test_infer_never_touches_projection_head():
    model = build(NET, seed=0)
    for name in model.head_names():
        model.params[name] = Forbidden()
    vol = Volume(np.random.default_rng(1).standard_normal(SHAPE).astype(np.float32))
    infer(model, vol, (8, 16, 16))


def test_sliding_window_is_order_independent():
    model = build(NET, seed=2)
    image = np.random.default_rng(3).standard_normal(SHAPE).astype(np.float32)
    patch = (8, 16, 16)
    n = len(window_starts(16, 8)) * len(window_starts(32, 16)) ** 2
    a = predict_probabilities(model, image, patch)
    b = predict_probabilities(model, image, patch, order=np.random.default_rng(0).permutation(n))
    assert a.tobytes() == b.tobytes()


def test_infer_pads_non_divisible_volumes():
    model = build(NET, seed=0, with_projection=False)
    vol = Volume(np.random.default_rng(4).standard_normal((10, 18, 22)).astype(np.float32))
    assert infer(model, vol, (8, 16, 16)).shape == (10, 18, 22)


def test_feature_separation_is_finite():
    cases = small_cases(2)
    lesion, background = feature_separation(build(NET, seed=0), cases)
    assert np.isfinite(lesion) and np.isfinite(background) and background >= 0
