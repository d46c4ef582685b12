"""Seeded synthetic head phantoms with one low-contrast lesion.

The healthy anatomy is exactly mirror-symmetric about the mid-W plane: a
head ellipsoid, mirrored pairs of internal structures and a smooth
symmetrized texture. A single lesion is painted on top as local background
plus a fixed contrast offset; its placement relative to the midline sets the
fraction of lesion voxels without a mirror counterpart.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .asymmetry import asym_stats
from .errors import InfeasibleSpec
from .volume import BinaryMask, Volume, write_mask, write_volume

MAX_ATTEMPTS = 100
ASYM_TOLERANCE = 0.1

# intensity scale: air 0, soft tissue around 0.5; dynamic range 1.0
HEAD_INTENSITY = 0.5


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (48, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.02
    lesion_contrast: float = 0.04
    n_symmetric_structures: int = 4
    lesion_asym_fraction: float = 0.75
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise InfeasibleSpec(f"shape components must be >= 16, got {self.shape}")
        if self.noise_sigma < 0:
            raise InfeasibleSpec("noise_sigma must be >= 0")
        if self.lesion_contrast == 0:
            raise InfeasibleSpec("lesion_contrast must be nonzero")
        if self.n_symmetric_structures < 0:
            raise InfeasibleSpec("n_symmetric_structures must be >= 0")
        if not 0.0 <= self.lesion_asym_fraction <= 1.0:
            raise InfeasibleSpec("lesion_asym_fraction must lie in [0, 1]")

    def to_json(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def _grid(shape):
    # coordinates relative to the volume center, in voxels
    return [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in shape]


def _ellipsoid(shape, center, radii):
    z, y, x = _grid(shape)
    return (
        ((z - center[0]) / radii[0])[:, None, None] ** 2
        + ((y - center[1]) / radii[1])[None, :, None] ** 2
        + ((x - center[2]) / radii[2])[None, None, :] ** 2
    ) <= 1.0


def _symmetric(mask):
    return mask | mask[:, :, ::-1]


def render_background(spec, rng):
    """Noise-free, lesion-free anatomy plus the head mask."""
    D, H, W = spec.shape
    head_r = np.array([0.45 * D, 0.44 * H, 0.40 * W])
    head = _symmetric(_ellipsoid(spec.shape, (0.0, 0.0, 0.0), head_r))

    vol = np.zeros(spec.shape, dtype=np.float64)
    texture = ndimage.gaussian_filter(rng.standard_normal(spec.shape), sigma=4.0, mode="nearest")
    texture = 0.5 * (texture + texture[:, :, ::-1])
    texture *= 0.05 / max(texture.std(), 1e-12)
    vol[head] = HEAD_INTENSITY + texture[head]

    for _ in range(spec.n_symmetric_structures):
        radii = rng.uniform(0.06, 0.14, size=3) * np.array(spec.shape)
        center = np.array([
            rng.uniform(-0.25, 0.25) * D,
            rng.uniform(-0.25, 0.25) * H,
            -rng.uniform(0.08, 0.25) * W,
        ])
        pair = _symmetric(_ellipsoid(spec.shape, center, radii)) & head
        vol[pair] = rng.uniform(0.25, 0.85) + texture[pair]
    return vol, head


def _place_lesion(spec, rng, head):
    """Union of a main ellipsoid and an attached lobe, offset along W so the
    asymmetric fraction is as close as possible to the request."""
    D, H, W = spec.shape
    target = spec.lesion_asym_fraction
    for _ in range(MAX_ATTEMPTS):
        radii = rng.uniform(0.07, 0.12, size=3) * np.array(spec.shape)
        center = np.array([rng.uniform(-0.15, 0.15) * D, rng.uniform(-0.15, 0.15) * H, 0.0])
        lobe_radii = radii * rng.uniform(0.45, 0.7, size=3)
        lobe_dir = rng.normal(size=3)
        lobe_dir /= np.linalg.norm(lobe_dir)
        lobe_offset = lobe_dir * radii * rng.uniform(0.4, 0.7)
        side = 1.0 if rng.random() < 0.5 else -1.0
        # half-voxel steps keep both parities of midline straddling reachable
        offsets = np.arange(0.0, 0.3 * W, 0.5)
        best = None
        for off in offsets:
            c = center + np.array([0.0, 0.0, side * off])
            lesion = _ellipsoid(spec.shape, c, radii) | _ellipsoid(spec.shape, c + lobe_offset, lobe_radii)
            if target == 0.0:
                lesion = _symmetric(lesion)
            lesion &= head
            n = int(lesion.sum())
            if n < 8:
                continue
            frac = float((lesion & ~lesion[:, :, ::-1]).sum()) / n
            err = abs(frac - target)
            if best is None or err < best[0]:
                best = (err, lesion)
            if frac >= 1.0 or best[0] == 0.0 or target == 0.0 or frac > target + ASYM_TOLERANCE:
                break
        if best is None or best[0] > ASYM_TOLERANCE / 2:
            continue
        lesion = best[1]
        _, n_comp = ndimage.label(lesion, structure=ndimage.generate_binary_structure(3, 1))
        if n_comp == 1:
            return lesion
    raise InfeasibleSpec(
        f"could not place a lesion with asym fraction {target} in {MAX_ATTEMPTS} attempts"
    )


def generate(spec):
    """Render one phantom; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.rng_seed)
    vol, head = render_background(spec, rng)
    lesion = _place_lesion(spec, rng, head)
    vol[lesion] += spec.lesion_contrast
    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    return Volume(vol.astype(np.float32), spec.spacing), BinaryMask(lesion, spec.spacing)


def case_specs(spec_base, count, seed, asym_range=None):
    """Per-case specs with seeds split from ``seed``.

    Each case gets its own child seed, which drives lesion position and size;
    with ``asym_range`` the requested asymmetric fraction is also drawn
    uniformly from that interval.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    children = np.random.SeedSequence(seed).spawn(count)
    specs = []
    for child in children:
        case_seed = int(child.generate_state(1, dtype=np.uint32)[0])
        frac = spec_base.lesion_asym_fraction
        if asym_range is not None:
            lo, hi = asym_range
            frac = float(np.random.default_rng(child).uniform(lo, hi))
        specs.append(replace(spec_base, rng_seed=case_seed, lesion_asym_fraction=frac))
    return specs


def case_id(index):
    return f"{index:04d}"


def generate_dataset(spec_base, count, seed, out_dir=None, asym_range=None):
    """Generate ``count`` phantoms; optionally write them to ``out_dir``.

    Layout: ``case_<id>.json/.raw`` volumes, ``case_<id>_mask.json/.raw``
    masks and ``manifest.json``.
    """
    specs = case_specs(spec_base, count, seed, asym_range)
    cases = []
    for i, spec in enumerate(specs):
        try:
            cases.append(generate(spec))
        except InfeasibleSpec as exc:
            raise InfeasibleSpec(f"case {i}: {exc}", case_index=i) from exc
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (spec, (vol, mask)) in enumerate(zip(specs, cases)):
            cid = case_id(i)
            write_volume(out_dir / f"case_{cid}", vol)
            write_mask(out_dir / f"case_{cid}_mask", mask)
            stats = asym_stats(mask)
            entries.append({
                "case_id": cid,
                "spec": spec.to_json(),
                "lesion_voxels": stats.lesion_voxels,
                "asym_voxels": stats.asym_voxels,
            })
        manifest = {"seed": seed, "count": count, "cases": entries}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return cases


def load_dataset(directory):
    """Read a dataset directory back as (case_id, Volume, BinaryMask) triples."""
    from .volume import read_mask, read_volume

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = []
    for entry in manifest["cases"]:
        cid = entry["case_id"]
        out.append((cid, read_volume(directory / f"case_{cid}"), read_mask(directory / f"case_{cid}_mask")))
    return out
