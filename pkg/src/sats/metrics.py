"""Overlap and surface-distance metrics plus per-directory evaluation reports.

Pinned definitions:

* surface voxel: mask voxel with at least one face neighbour outside the
  mask (the volume border counts as outside);
* distances: Euclidean between surface-voxel centers in millimeters;
* HD95: max of the two directed 95th percentiles, nearest-rank;
* ASD: mean of both directed distance lists pooled together.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .asymmetry import asym_stats
from .errors import EmptyMask, MissingCase, ShapeMismatch
from .volume import BinaryMask, read_mask

COLUMNS = ("case_id", "dsc", "hd95", "asd", "asym_voxels", "lesion_voxels", "asym_ml")

_FACES = ndimage.generate_binary_structure(3, 1)


def _array(m):
    return (m.data if isinstance(m, BinaryMask) else np.asarray(m)).astype(bool)


def dsc(pred, gt):
    """Dice similarity coefficient in percent; two empty masks score 100."""
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / total


def surface(mask):
    m = _array(mask)
    return m & ~ndimage.binary_erosion(m, structure=_FACES, border_value=0)


def nearest_rank(values, q):
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * ordered.size))
    return float(ordered[rank - 1])


def directed_distances(src, dst, spacing):
    """For each surface voxel of ``src``, distance to the closest surface voxel of ``dst``."""
    scale = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(surface(src)) * scale
    b = np.argwhere(surface(dst)) * scale
    dist, _ = cKDTree(b).query(a)
    return dist


def surface_distances(pred, gt, spacing=None):
    """(hd95, asd) in millimeters."""
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, BinaryMask) else (1.0, 1.0, 1.0)
    if not p.any():
        raise EmptyMask("pred")
    if not g.any():
        raise EmptyMask("gt")
    d_pg = directed_distances(p, g, spacing)
    d_gp = directed_distances(g, p, spacing)
    hd95 = max(nearest_rank(d_pg, 95), nearest_rank(d_gp, 95))
    asd = float(np.concatenate([d_pg, d_gp]).mean())
    return hd95, asd


def evaluate_case(case_id, pred, gt):
    """One report row; distances are None when either mask is empty."""
    try:
        hd95, asd = surface_distances(pred, gt)
    except EmptyMask:
        hd95 = asd = None
    stats = asym_stats(gt)
    return {
        "case_id": case_id,
        "dsc": dsc(pred, gt),
        "hd95": hd95,
        "asd": asd,
        "asym_voxels": stats.asym_voxels,
        "lesion_voxels": stats.lesion_voxels,
        "asym_ml": stats.asym_ml,
    }


def mean_sd(values):
    """(mean, population sd) over the non-missing values, or None if there are none."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return None
    return float(vals.mean()), float(vals.std())


def format_mean_sd(stat):
    return "NA" if stat is None else f"{stat[0]:.2f} ± {stat[1]:.2f}"


def summarize(rows):
    return {key: mean_sd([r[key] for r in rows]) for key in ("dsc", "hd95", "asd")}


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_csv(path, rows, summary):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        w.writerow(["summary"] + [format_mean_sd(summary[c]) for c in ("dsc", "hd95", "asd")] + ["", "", ""])


def _mask_files(directory):
    out = {}
    for p in sorted(Path(directory).glob("case_*_mask.json")):
        out[p.name[len("case_"): -len("_mask.json")]] = p
    return out


def evaluate_dir(pred_dir, gt_dir, report=None, json_dir=None):
    """Score every ``case_<id>_mask`` in ``pred_dir`` against ``gt_dir``.

    Returns (rows sorted by case id, summary). Optionally writes the CSV
    report and one JSON file per case.
    """
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    if set(preds) != set(gts):
        missing = sorted(set(preds) ^ set(gts))
        raise MissingCase(f"case sets differ between directories: {missing}")
    if not gts:
        raise MissingCase(f"no case_*_mask.json files in {gt_dir}")
    rows = [evaluate_case(cid, read_mask(preds[cid]), read_mask(gts[cid])) for cid in sorted(gts)]
    summary = summarize(rows)
    if report is not None:
        write_csv(report, rows, summary)
    if json_dir is not None:
        json_dir = Path(json_dir)
        json_dir.mkdir(parents=True, exist_ok=True)
        for r in rows:
            (json_dir / f"case_{r['case_id']}.json").write_text(json.dumps(r, indent=2) + "\n")
    return rows, summary
