"""Asymmetric lesion region: lesion voxels whose mirror voxel is not lesion."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .volume import BinaryMask


class AsymStats(NamedTuple):
    asym_voxels: int
    lesion_voxels: int
    asym_ml: float


def asym_mask(s):
    """m = s - (s AND flip(s)), computed in the frame of ``s``."""
    data = s.data
    return BinaryMask(data & (1 - data[:, :, ::-1]), s.spacing)


def asym_stats(s):
    m = asym_mask(s)
    voxel_ml = float(np.prod(s.spacing)) / 1000.0
    n_asym = m.count()
    return AsymStats(n_asym, s.count(), n_asym * voxel_ml)
