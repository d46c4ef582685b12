import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sats import metrics, phantom
from sats.errors import EmptyMask, MissingCase, ShapeMismatch
from sats.volume import BinaryMask, write_mask


def brute_surface(m):
    D, H, W = m.shape
    out = []
    for i, j, k in zip(*np.nonzero(m)):
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, k + dk
            if not (0 <= a < D and 0 <= b < H and 0 <= c < W) or not m[a, b, c]:
                out.append((i, j, k))
                break
    return np.array(out, dtype=np.float64)


def brute_distances(p, g, spacing=(1.0, 1.0, 1.0)):
    sp = brute_surface(p) * spacing
    sg = brute_surface(g) * spacing
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(-1))
    d_pg, d_gp = np.sort(d.min(axis=1)), np.sort(d.min(axis=0))
    rank = lambda v: v[max(1, math.ceil(0.95 * len(v))) - 1]
    return max(rank(d_pg), rank(d_gp)), float(np.concatenate([d_pg, d_gp]).mean())


def test_dsc_examples():
    a = np.zeros((10, 10, 10), dtype=np.uint8)
    a[:1, :10, :10] = 1
    assert metrics.dsc(a, a) == 100.0
    b = np.zeros_like(a)
    b[5:6] = 1
    assert metrics.dsc(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, :5] = 1
    c[1, :5] = 1
    assert metrics.dsc(a, c) == 50.0
    z = np.zeros_like(a)
    assert metrics.dsc(z, z) == 100.0
    with pytest.raises(ShapeMismatch):
        metrics.dsc(a, a[:5])


def test_surface_distance_examples():
    a = np.zeros((3, 3, 12), dtype=np.uint8)
    b = np.zeros_like(a)
    a[1, 1, 2] = 1
    b[1, 1, 7] = 1
    assert metrics.surface_distances(a, b, (1.0, 1.0, 1.0)) == (5.0, 5.0)
    assert metrics.surface_distances(a, a, (1.0, 1.0, 1.0)) == (0.0, 0.0)
    with pytest.raises(EmptyMask) as exc:
        metrics.surface_distances(np.zeros_like(a), a)
    assert exc.value.side == "pred"
    with pytest.raises(EmptyMask) as exc:
        metrics.surface_distances(a, np.zeros_like(a))
    assert exc.value.side == "gt"


def test_surface_counts_border_as_outside():
    full = np.ones((3, 3, 3), dtype=np.uint8)
    s = metrics.surface(full)
    assert s.sum() == 26 and not s[1, 1, 1]


def test_nearest_rank():
    assert metrics.nearest_rank(np.arange(1, 21), 95) == 19
    assert metrics.nearest_rank([7.0], 95) == 7.0
    assert metrics.nearest_rank(np.arange(1, 101), 95) == 95


def test_matches_brute_force_with_spacing():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        g = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        sp = (1.0, 0.7, 2.5)
        hd, asd = metrics.surface_distances(p, g, sp)
        ref_hd, ref_asd = brute_distances(p, g, sp)
        assert abs(hd - ref_hd) <= 1e-9 and abs(asd - ref_asd) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.6))
def test_metric_properties(seed, density):
    rng = np.random.default_rng(seed)
    p = (rng.random((6, 6, 6)) < density).astype(np.uint8)
    g = (rng.random((6, 6, 6)) < density).astype(np.uint8)
    d = metrics.dsc(p, g)
    assert 0.0 <= d <= 100.0 and d == metrics.dsc(g, p)
    if p.any() and g.any():
        hd, asd = metrics.surface_distances(p, g)
        assert hd >= 0 and asd >= 0
        assert (hd, asd) == pytest.approx(metrics.surface_distances(g, p), abs=1e-12)
        flipped = metrics.surface_distances(p[:, :, ::-1], g[:, :, ::-1])
        assert flipped == pytest.approx((hd, asd), abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_dilating_toward_convex_gt_never_lowers_dsc(seed):
    # a prediction inside a convex ellipsoid lesion grows by one step, clipped to the gt's hull
    spec = phantom.PhantomSpec(shape=(24, 48, 48), lesion_asym_fraction=1.0, rng_seed=seed)
    _, s = phantom.generate(spec)
    from scipy import ndimage

    gt = s.data.astype(bool)
    pred = ndimage.binary_erosion(gt, iterations=2)
    grown = ndimage.binary_dilation(pred) & ndimage.binary_dilation(gt)
    assert metrics.dsc(grown, gt) >= metrics.dsc(pred, gt)


def test_mean_sd_and_format():
    assert metrics.mean_sd([60.0, 80.0]) == (70.0, 10.0)
    assert metrics.format_mean_sd((70.0, 10.0)) == "70.00 ± 10.00"
    assert metrics.mean_sd([None]) is None
    assert metrics.format_mean_sd(None) == "NA"


def _write_pair(root, cid, pred, gt):
    write_mask(root / "pred" / f"case_{cid}_mask", BinaryMask(pred))
    write_mask(root / "gt" / f"case_{cid}_mask", BinaryMask(gt))


def test_evaluate_dir_report(tmp_path):
    gt = np.zeros((4, 4, 10), dtype=np.uint8)
    gt[1:3, 1:3, 1:6] = 1
    _write_pair(tmp_path, "0001", gt, gt)
    _write_pair(tmp_path, "0000", np.zeros_like(gt), gt)
    report = tmp_path / "report.csv"
    rows, summary = metrics.evaluate_dir(tmp_path / "pred", tmp_path / "gt", report, tmp_path / "json")
    assert [r["case_id"] for r in rows] == ["0000", "0001"]
    assert rows[0]["dsc"] == 0.0 and rows[0]["hd95"] is None
    assert rows[1]["dsc"] == 100.0 and rows[1]["hd95"] == 0.0
    assert rows[1]["asym_voxels"] == 12 and rows[1]["lesion_voxels"] == 20
    lines = list(csv.reader(report.open()))
    assert tuple(lines[0]) == metrics.COLUMNS
    assert lines[1][2] == "NA"
    assert lines[-1][0] == "summary" and lines[-1][1] == "50.00 ± 50.00"
    assert json.loads((tmp_path / "json" / "case_0001.json").read_text())["dsc"] == 100.0


def test_single_perfect_case_summary(tmp_path):
    gt = np.zeros((4, 4, 4), dtype=np.uint8)
    gt[1, 1, 1] = 1
    _write_pair(tmp_path, "0000", gt, gt)
    _, summary = metrics.evaluate_dir(tmp_path / "pred", tmp_path / "gt")
    assert metrics.format_mean_sd(summary["dsc"]) == "100.00 ± 0.00"


def test_missing_case(tmp_path):
    gt = np.ones((2, 2, 2), dtype=np.uint8)
    _write_pair(tmp_path, "0000", gt, gt)
    write_mask(tmp_path / "gt" / "case_0001_mask", BinaryMask(gt))
    with pytest.raises(MissingCase):
        metrics.evaluate_dir(tmp_path / "pred", tmp_path / "gt")
