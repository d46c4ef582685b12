"""Siamese residual encoder-decoder with a per-voxel projection head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, MalformedHeader, ShapeMismatch

HEAD_PREFIX = "proj."
LEAK = 0.01
NORM_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    base_filters: int = 8
    n_downsamplings: int = 3
    in_channels: int = 1
    seg_out_channels: int = 1
    proj_channels: int = 16
    proj_layers: int = 3
    # residual blocks per encoder level; deeper levels repeat the block
    encoder_blocks: tuple = field(default=None)

    def __post_init__(self):
        if self.base_filters < 2:
            raise InvalidConfig("base_filters must be >= 2")
        if self.n_downsamplings < 0:
            raise InvalidConfig("n_downsamplings must be >= 0")
        if self.proj_layers < 1 or self.proj_channels < 1:
            raise InvalidConfig("projection head needs at least one layer and channel")
        blocks = self.encoder_blocks
        if blocks is None:
            blocks = (1,) + (2,) * self.n_downsamplings
        blocks = tuple(int(b) for b in blocks)
        if len(blocks) != self.n_downsamplings + 1 or min(blocks) < 1:
            raise InvalidConfig("encoder_blocks needs one positive entry per level")
        object.__setattr__(self, "encoder_blocks", blocks)

    def filters(self):
        """Channel width per resolution level; doubling stops after three steps."""
        return [self.base_filters * 2 ** min(level, 3) for level in range(self.n_downsamplings + 1)]

    def check_input(self, spatial):
        factor = 2**self.n_downsamplings
        if any(s % factor for s in spatial):
            raise InvalidConfig(f"spatial shape {tuple(spatial)} not divisible by {factor}")

    def to_json(self):
        d = asdict(self)
        d["encoder_blocks"] = list(self.encoder_blocks)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class SatsModel:
    config: NetConfig
    params: dict

    @property
    def has_projection(self):
        return any(k.startswith(HEAD_PREFIX) for k in self.params)

    def head_names(self):
        return [k for k in self.params if k.startswith(HEAD_PREFIX)]

    def backbone_names(self):
        return [k for k in self.params if not k.startswith(HEAD_PREFIX)]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class _Builder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params = {}

    def _add(self, name, arr):
        if name in self.params:
            raise InvalidConfig(f"duplicate parameter {name}")
        self.params[name] = ad.Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

    def conv(self, name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k**3))
        self._add(f"{name}.weight", self.rng.normal(0.0, std, (cout, cin, k, k, k)))
        self._add(f"{name}.bias", np.zeros(cout))

    def up(self, name, cin, cout):
        std = np.sqrt(2.0 / cin)
        self._add(f"{name}.weight", self.rng.normal(0.0, std, (cin, cout, 2, 2, 2)))
        self._add(f"{name}.bias", np.zeros(cout))

    def norm(self, name, c):
        self._add(f"{name}.gain", np.ones(c))
        self._add(f"{name}.shift", np.zeros(c))

    def resblock(self, name, cin, cout):
        self.conv(f"{name}.conv1", cin, cout, 3)
        self.norm(f"{name}.norm1", cout)
        self.conv(f"{name}.conv2", cout, cout, 3)
        self.norm(f"{name}.norm2", cout)
        if cin != cout:
            self.conv(f"{name}.skip", cin, cout, 1)


def build(config, seed=0, with_projection=True, dtype=np.float32):
    """Create all parameters with He fan-in initialization, in a fixed order."""
    b = _Builder(np.random.default_rng(seed), dtype)
    f = config.filters()
    cin = config.in_channels
    for level, width in enumerate(f):
        if level > 0:
            b.conv(f"down{level}", f[level - 1], width, 3)
            b.norm(f"down{level}.norm", width)
            cin = width
        for j in range(config.encoder_blocks[level]):
            b.resblock(f"enc{level}.{j}", cin, width)
            cin = width
    for level in reversed(range(config.n_downsamplings)):
        b.up(f"up{level}", f[level + 1], f[level])
        b.resblock(f"dec{level}", 2 * f[level], f[level])
    b.conv("seg", f[0], config.seg_out_channels, 1)
    if with_projection:
        width = f[0]
        for i in range(config.proj_layers):
            b.conv(f"{HEAD_PREFIX}{i}", width, config.proj_channels, 1)
            width = config.proj_channels
    return SatsModel(config, b.params)


def _conv(model, name, x, stride=1):
    w = model.params[f"{name}.weight"]
    pad = w.shape[2] // 2
    return ad.conv3d(x, w, model.params[f"{name}.bias"], stride=stride, padding=pad)


def _norm_act(model, name, x):
    y = ad.instance_norm(x, model.params[f"{name}.gain"], model.params[f"{name}.shift"], NORM_EPS)
    return ad.leaky_relu(y, LEAK)


def _resblock(model, name, x):
    h = _norm_act(model, f"{name}.norm1", _conv(model, f"{name}.conv1", x))
    h = _norm_act(model, f"{name}.norm2", _conv(model, f"{name}.conv2", h))
    skip = _conv(model, f"{name}.skip", x) if f"{name}.skip.weight" in model.params else x
    return ad.add(h, skip)


def forward_seg(model, x):
    """Encoder-decoder pass; returns (logits, full-resolution decoder features)."""
    cfg = model.config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"expected (N, {cfg.in_channels}, D, H, W), got {x.shape}")
    cfg.check_input(x.shape[2:])
    skips = []
    h = x
    for level in range(cfg.n_downsamplings + 1):
        if level > 0:
            h = _norm_act(model, f"down{level}.norm", _conv(model, f"down{level}", h, stride=2))
        for j in range(cfg.encoder_blocks[level]):
            h = _resblock(model, f"enc{level}.{j}", h)
        skips.append(h)
    for level in reversed(range(cfg.n_downsamplings)):
        up = ad.conv_transpose3d(h, model.params[f"up{level}.weight"], model.params[f"up{level}.bias"], stride=2)
        h = _resblock(model, f"dec{level}", ad.concat([up, skips[level]], axis=1))
    return _conv(model, "seg", h), h


def project(model, feat):
    """Per-voxel projection head: 1x1x1 convs with ReLU between, then unit norm."""
    n_layers = model.config.proj_layers
    h = feat
    for i in range(n_layers):
        name = f"{HEAD_PREFIX}{i}"
        if f"{name}.weight" not in model.params:
            raise ShapeMismatch("model was built without a projection head")
        h = _conv(model, name, h)
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.unit_normalize(h, 1e-8)


def siamese_forward(model, x, use_projection=True):
    """Run both branches with the same parameters.

    Returns (logits of the original branch, E, E_flip). E_flip is computed
    from the mirrored input and compared index-by-index with E.
    Without projection, E and E_flip are the raw decoder features.
    """
    logits, feat = forward_seg(model, x)
    _, feat_flip = forward_seg(model, ad.flip(x, axis=-1))
    if not use_projection:
        return logits, feat, feat_flip
    return logits, project(model, feat), project(model, feat_flip)


def save_checkpoint(path, model, stage=0, epoch=0, extra_arrays=None, meta=None):
    """Write ``<path>.json`` + ``<path>.raw`` (little-endian float32 blobs).

    ``extra_arrays`` (name -> array) are appended after the parameters, e.g.
    optimizer momentum buffers; ``meta`` is stored verbatim in the manifest.
    """
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0

    def add(section, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"section": section, "name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    for name, p in model.params.items():
        add("param", name, p.data)
    for name, arr in (extra_arrays or {}).items():
        add("extra", name, arr)
    manifest = {
        "format": "sats-ckpt-1",
        "config": model.config.to_json(),
        "stage": stage,
        "epoch": epoch,
        "tensors": entries,
        "meta": meta or {},
    }
    base.with_suffix(".raw").write_bytes(b"".join(blobs))
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    return base


def load_checkpoint(path, dtype=np.float32):
    """Inverse of :func:`save_checkpoint`; returns (model, manifest, extra_arrays)."""
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    try:
        manifest = json.loads(base.with_suffix(".json").read_text())
        config = NetConfig.from_json(manifest["config"])
        entries = manifest["tensors"]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{base}.json: {exc}") from exc
    raw = base.with_suffix(".raw").read_bytes()
    params, extra = {}, {}
    for e in entries:
        end = e["offset"] + 4 * e["count"]
        if end > len(raw):
            raise ShapeMismatch(f"{base}.raw truncated at {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=e["offset"]).reshape(e["shape"])
        if e["section"] == "param":
            params[e["name"]] = ad.Tensor(arr.astype(dtype), requires_grad=True, name=e["name"])
        else:
            extra[e["name"]] = arr.copy()
    return SatsModel(config, params), manifest, extra
