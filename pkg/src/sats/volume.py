"""Dense 3D volumes and binary masks.

Arrays are stored D, H, W with W the left-right axis, so a sagittal flip is
a reversal of the last axis. Volumes hold float32 intensities, masks uint8
values in {0, 1}. Both are treated as immutable: the backing arrays are
marked read-only on construction.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateVolume,
    MalformedHeader,
    ShapeMismatch,
    UnsupportedDtype,
)

MAX_ANGLE = 0.35

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three finite positive values, got {spacing}")
    return spacing


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeMismatch(f"volume must be 3D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume intensities must be finite")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"mask must be 3D, got shape {data.shape}")
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be in {0, 1}")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.data.shape

    def count(self):
        return int(self.data.sum(dtype=np.int64))

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class RigidParams:
    """Rigid transform restricted to the symmetry-breaking degrees of freedom.

    ``yaw`` rotates in the H-W plane, ``roll`` in the D-W plane (radians),
    ``tw`` translates content along W in millimeters. Rotations are about the
    volume center.
    """

    yaw: float = 0.0
    roll: float = 0.0
    tw: float = 0.0

    def is_identity(self):
        return self.yaw == 0.0 and self.roll == 0.0 and self.tw == 0.0


def flip_sagittal(v):
    """Mirror across the mid-sagittal plane (reverse the W axis)."""
    return type(v)(v.data[:, :, ::-1], v.spacing)


def _rotation(yaw, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    r_yaw = np.array([[1.0, 0.0, 0.0], [0.0, cy, -sy], [0.0, sy, cy]])
    r_roll = np.array([[cr, 0.0, -sr], [0.0, 1.0, 0.0], [sr, 0.0, cr]])
    return r_yaw @ r_roll


def _axis_points(n, step):
    # sample positions (in input index units) symmetric about the axis center
    m = max(int(n // step), 1)
    return (n - 1) / 2.0 + (np.arange(m) - (m - 1) / 2.0) * step


def _source_coords(shape, spacing, params, step=1.0):
    """Input-index coordinates sampled by each output grid point.

    Output content at physical point p comes from input point
    R^T (p - t), all relative to the volume center.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2.0
    axes = [_axis_points(n, step) for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=0).reshape(3, -1)
    phys = (grid - center[:, None]) * spacing[:, None]
    phys[2] -= params.tw
    src = _rotation(params.yaw, params.roll).T @ phys
    coords = src / spacing[:, None] + center[:, None]
    out_shape = tuple(len(a) for a in axes)
    return coords, out_shape


def resample_volume(v, params):
    """Trilinear resampling of ``v`` under ``params``; outside fills with the minimum."""
    if params.is_identity():
        return Volume(v.data.copy(), v.spacing)
    coords, shape = _source_coords(v.shape, v.spacing, params)
    out = ndimage.map_coordinates(
        v.data.astype(np.float64), coords, order=1, mode="constant",
        cval=float(v.data.min()), prefilter=False,
    )
    return Volume(out.reshape(shape).astype(np.float32), v.spacing)


def resample_mask(m, params):
    """Nearest-neighbour resampling, so labels stay in {0, 1}."""
    if params.is_identity():
        return BinaryMask(m.data.copy(), m.spacing)
    coords, shape = _source_coords(m.shape, m.spacing, params)
    out = ndimage.map_coordinates(
        m.data, coords, order=0, mode="constant", cval=0, prefilter=False
    )
    return BinaryMask((out.reshape(shape) > 0).astype(np.uint8), m.spacing)


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return -np.inf
    return float((a * b).sum() / denom)


def flip_correlation(data, spacing, params, step=1.0, cval=None):
    """Pearson correlation between a transformed volume and its own flip."""
    if cval is None:
        cval = float(data.min())
    coords, shape = _source_coords(data.shape, spacing, params, step)
    sampled = ndimage.map_coordinates(
        data, coords, order=1, mode="constant", cval=cval, prefilter=False
    ).reshape(shape)
    return _pearson(sampled, sampled[:, :, ::-1])


# (downsampling step, angle step, tw step in voxels, half-width in steps)
_LEVELS = ((4.0, 0.07, 4.0, None), (2.0, 0.025, 1.5, 3), (1.0, 0.00625, 0.5, 2))


def symmetry_normalize(v):
    """Rigidly align ``v`` so it is bilaterally symmetric about the mid-W plane.

    Three-level coarse-to-fine grid search over (yaw, roll, tw) maximizing
    flip correlation. Coarse levels score a Gaussian-smoothed copy sampled on
    a strided grid. Ties go to the lexicographically smallest parameters.
    Returns the resampled volume and the chosen parameters.
    """
    if v.shape[2] < 8:
        raise ValueError("symmetry normalization needs W >= 8")
    data = v.data.astype(np.float64)
    if data.var() == 0.0:
        raise DegenerateVolume("volume has zero intensity variance")
    cval = float(data.min())
    sw = v.spacing[2]
    tw_max = v.shape[2] / 4.0 * sw

    best = RigidParams()
    for step, a_step, t_step, half in _LEVELS:
        smooth = data if step == 1.0 else ndimage.gaussian_filter(data, step / 2.0, mode="nearest")
        t_step *= sw
        if half is None:
            angles = np.arange(-MAX_ANGLE, MAX_ANGLE + 1e-9, a_step)
            angles = np.round(angles / a_step) * a_step
            shifts = np.arange(-np.floor(tw_max / t_step), np.floor(tw_max / t_step) + 1) * t_step
            yaws, rolls = angles, angles
        else:
            offs = np.arange(-half, half + 1)
            yaws = np.clip(best.yaw + offs * a_step, -MAX_ANGLE, MAX_ANGLE)
            rolls = np.clip(best.roll + offs * a_step, -MAX_ANGLE, MAX_ANGLE)
            shifts = np.clip(best.tw + offs * t_step, -tw_max, tw_max)
        candidates = sorted(set(itertools.product(
            (float(y) for y in np.unique(yaws)),
            (float(r) for r in np.unique(rolls)),
            (float(t) for t in np.unique(shifts)),
        )))
        best_score = -np.inf
        for y, r, t in candidates:
            score = flip_correlation(smooth, v.spacing, RigidParams(y, r, t), step, cval)
            if score > best_score:
                best_score, best = score, RigidParams(y, r, t)

    identity = RigidParams()
    if flip_correlation(data, v.spacing, identity, 1.0, cval) >= flip_correlation(
        data, v.spacing, best, 1.0, cval
    ):
        best = identity
    return resample_volume(v, best), best


def _base_path(path):
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path


def _write(path, data, spacing, dtype_name):
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(data.shape),
        "spacing_mm": list(spacing),
        "dtype": dtype_name,
        "order": "DHW",
        "byte_order": "little",
    }
    base.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    base.with_suffix(".raw").write_bytes(
        np.ascontiguousarray(data, dtype=_DTYPES[dtype_name]).tobytes()
    )


def _read(path, expected_dtype):
    base = _base_path(path)
    try:
        header = json.loads(base.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{base}.json: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{base}.json: header must be an object")
    try:
        shape = [int(n) for n in header["shape"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        dtype_name = header["dtype"]
        order = header.get("order", "DHW")
        byte_order = header.get("byte_order", "little")
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"{base}.json: bad or missing field {exc}") from exc
    if len(shape) != 3 or min(shape) < 1 or len(spacing) != 3:
        raise MalformedHeader(f"{base}.json: shape and spacing_mm need 3 entries")
    if order != "DHW" or byte_order != "little":
        raise MalformedHeader(f"{base}.json: unsupported order {order!r}/{byte_order!r}")
    if dtype_name not in _DTYPES:
        raise UnsupportedDtype(f"{base}.json: dtype {dtype_name!r} (only f32, u8)")
    if dtype_name != expected_dtype:
        raise UnsupportedDtype(f"{base}.json: expected {expected_dtype}, found {dtype_name}")
    dtype = _DTYPES[dtype_name]
    raw = base.with_suffix(".raw").read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ShapeMismatch(
            f"{base}.raw holds {len(raw)} bytes, header implies {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape), spacing


def write_volume(path, v):
    _write(path, v.data, v.spacing, "f32")


def read_volume(path):
    data, spacing = _read(path, "f32")
    return Volume(data.astype(np.float32), spacing)


def write_mask(path, m):
    _write(path, m.data, m.spacing, "u8")


def read_mask(path):
    data, spacing = _read(path, "u8")
    try:
        return BinaryMask(data, spacing)
    except ValueError as exc:
        raise MalformedHeader(f"{_base_path(path)}.raw: {exc}") from exc
