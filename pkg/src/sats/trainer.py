"""Two-stage training, patch sampling, sliding-window inference.

Stage 1 fits the encoder-decoder with dice + BCE. Stage 2 runs the Siamese
pair (input and its sagittal flip), adds the margin loss on the projected
features, and trains the projection head at a much higher learning rate than
the backbone. Everything is driven by one seeded generator so a run is
reproducible bit for bit on a fixed platform.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .asymmetry import asym_mask
from .errors import InvalidConfig, NumericalFault, PatchTooLarge
from .losses import LossConfig, loss_components, squared_distance
from .network import (
    NetConfig,
    build,
    forward_seg,
    load_checkpoint,
    save_checkpoint,
    siamese_forward,
)
from .volume import BinaryMask, resample_mask, symmetry_normalize

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "sats", "margin-only")
LOG_COLUMNS = ("epoch", "stage", "lr_backbone", "lr_head", "l_dice", "l_ce", "l_margin", "total")


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 60
    stage2_epochs: int = 30
    stage1_lr: float = 1e-2
    stage2_lr_head: float = 1e-2
    stage2_lr_backbone: float = 1e-5
    poly_power: float = 0.9
    momentum: float = 0.99
    weight_decay: float = 3e-5
    patch_size: tuple = (48, 96, 96)
    batch_size: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    foreground_patch_prob: float = 0.5
    variant: str = "sats"
    checkpoint_every: int = 10
    normalize_symmetry: bool = True

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if min(self.stage1_lr, self.stage2_lr_head, self.stage2_lr_backbone) <= 0:
            raise InvalidConfig("learning rates must be > 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if len(self.patch_size) != 3:
            raise InvalidConfig("patch_size needs three entries")

    def check_net(self, net):
        net.check_input(self.patch_size)

    def to_json(self):
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def poly_lr(lr0, epoch, max_epochs, power=0.9):
    return lr0 * (1.0 - epoch / max_epochs) ** power


class PreparedCase:
    """A training case in the symmetry-normalized frame.

    ``image`` is z-scored float32, ``seg`` the lesion mask and ``asym`` the
    asymmetric lesion region computed after normalization. Reads of
    ``asym`` are counted so tests can verify stage 1 never touches it.
    """

    def __init__(self, case_id, image, seg, asym, params=None):
        self.case_id = case_id
        self.image = image
        self.seg = seg
        self._asym = asym
        self.params = params
        self.asym_reads = 0
        self.lesion_voxels = np.argwhere(seg > 0)

    @property
    def asym(self):
        self.asym_reads += 1
        return self._asym

    @property
    def shape(self):
        return self.image.shape


def zscore(data):
    data = np.asarray(data, dtype=np.float64)
    std = data.std()
    return ((data - data.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def prepare_case(case_id, volume, mask, normalize_symmetry=True):
    params = None
    if normalize_symmetry:
        volume, params = symmetry_normalize(volume)
        mask = resample_mask(mask, params)
    return PreparedCase(case_id, zscore(volume.data), mask.data.copy(), asym_mask(mask).data.copy(), params)


def crop_validity(shape, w0, patch_w):
    """1 where a patch voxel's in-patch mirror is also its mirror in the full volume.

    The Siamese branch flips the patch itself, so the margin loss is only
    meaningful where that flip agrees with the anatomical mirror.
    """
    W = shape[2]
    k = np.arange(patch_w)
    in_patch_mirror = w0 + patch_w - 1 - k
    global_mirror = W - 1 - (w0 + k)
    return (in_patch_mirror == global_mirror).astype(np.uint8)


def _offset(size, patch, center, rng):
    if patch == size:
        return 0
    if center is None:
        return int(rng.integers(0, size - patch + 1))
    # shift inward so the patch never leaves the volume
    return int(np.clip(center - patch // 2, 0, size - patch))


def sample_patch(case, patch_size, rng, foreground_prob=0.5, with_asym=True):
    """Crop one training patch.

    D and H offsets are random, lesion-centered with ``foreground_prob``.
    The W window is centered on the mid-sagittal plane so the in-patch flip
    is the anatomical mirror. Returns (image, seg, asym or None, validity).
    """
    D, H, W = case.shape
    pd, ph, pw = patch_size
    if pd > D or ph > H or pw > W:
        raise PatchTooLarge(f"patch {patch_size} exceeds volume {case.shape}")
    if (W - pw) % 2:
        raise InvalidConfig(f"patch width {pw} and volume width {W} must have equal parity")
    center = None
    if rng.random() < foreground_prob and len(case.lesion_voxels):
        center = case.lesion_voxels[rng.integers(len(case.lesion_voxels))]
    d0 = _offset(D, pd, None if center is None else center[0], rng)
    h0 = _offset(H, ph, None if center is None else center[1], rng)
    w0 = (W - pw) // 2
    sl = (slice(d0, d0 + pd), slice(h0, h0 + ph), slice(w0, w0 + pw))
    valid = np.broadcast_to(crop_validity(case.shape, w0, pw), patch_size)
    asym = case.asym[sl] if with_asym else None
    return case.image[sl], case.seg[sl], asym, valid


@dataclass
class TrainState:
    stage: int = 1
    epoch: int = -1
    momentum: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    history: list = field(default_factory=list)


class SGD:
    """Nesterov SGD with decoupled parameter groups and L2 weight decay."""

    def __init__(self, momentum, weight_decay, buffers=None):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = buffers if buffers is not None else {}

    def step(self, params, lrs):
        mu = self.momentum
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else mu * buf + g
            self.buffers[name] = buf
            p.data = (p.data - lrs[name] * (g + mu * buf)).astype(p.data.dtype)
            p.grad = None


def _batch(cases, order, start, cfg, rng, with_asym):
    imgs, segs, asyms, valids = [], [], [], []
    for idx in order[start: start + cfg.batch_size]:
        img, seg, asym, valid = sample_patch(cases[idx], cfg.patch_size, rng, cfg.foreground_patch_prob, with_asym)
        imgs.append(img)
        segs.append(seg)
        asyms.append(asym)
        valids.append(valid)
    x = np.stack(imgs)[:, None].astype(np.float32)
    seg = np.stack(segs)[:, None].astype(np.float32)
    asym = np.stack(asyms)[:, None].astype(np.float32) if with_asym else None
    valid = np.stack(valids)[:, None].astype(np.float32)
    return x, seg, asym, valid


class Trainer:
    """Owns a model, its optimizer state and the run directory."""

    def __init__(self, cases, train_cfg, net_cfg=NetConfig(), run_dir=None, model=None):
        self.cases = cases
        self.cfg = train_cfg
        self.net_cfg = net_cfg
        train_cfg.check_net(net_cfg)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        with_head = train_cfg.variant == "sats"
        self.model = model if model is not None else build(net_cfg, seed=train_cfg.seed, with_projection=with_head)
        self.state = TrainState(rng=np.random.default_rng(train_cfg.seed))
        self.optimizer = SGD(train_cfg.momentum, train_cfg.weight_decay, self.state.momentum)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(json.dumps(
                {"train": train_cfg.to_json(), "net": net_cfg.to_json()}, indent=2) + "\n")

    # schedule ------------------------------------------------------------
    def stage_epochs(self, stage):
        cfg = self.cfg
        if cfg.variant == "baseline":
            return cfg.stage1_epochs + cfg.stage2_epochs if stage == 1 else 0
        return cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs

    def learning_rates(self, stage, epoch):
        cfg = self.cfg
        total = self.stage_epochs(stage)
        if stage == 1:
            lr = poly_lr(cfg.stage1_lr, epoch, total, cfg.poly_power)
            return lr, None
        head = poly_lr(cfg.stage2_lr_head, epoch, total, cfg.poly_power)
        if cfg.variant == "margin-only":
            # no head: the backbone is the only group the margin can train
            return head, None
        return poly_lr(cfg.stage2_lr_backbone, epoch, total, cfg.poly_power), head

    def param_lrs(self, lr_backbone, lr_head):
        return {
            name: (lr_head if name.startswith("proj.") else lr_backbone)
            for name in self.model.params
        }

    # steps ---------------------------------------------------------------
    def _step(self, stage, x, seg, asym, valid, lrs):
        model = self.model
        xt = ad.Tensor(x)
        if stage == 1:
            params = {k: v for k, v in model.params.items() if not k.startswith("proj.")}
            logits, _ = forward_seg(model, xt)
            dice, bce, margin, total = loss_components(logits, seg, None, None, None, replace(self.cfg.loss, beta=0.0))
        else:
            params = model.params
            use_proj = self.cfg.variant == "sats"
            logits, e, e_flip = siamese_forward(model, xt, use_projection=use_proj)
            dice, bce, margin, total = loss_components(logits, seg, e, e_flip, asym, self.cfg.loss, valid)
        ad.backward(total)
        self.optimizer.step(params, lrs)
        return (
            float(dice.data),
            float(bce.data),
            float(margin.data) if margin is not None else 0.0,
            float(total.data),
        )

    def run_epoch(self, stage, epoch):
        cfg = self.cfg
        rng = self.state.rng
        lr_bb, lr_head = self.learning_rates(stage, epoch)
        lrs = self.param_lrs(lr_bb, lr_head if lr_head is not None else lr_bb)
        order = rng.permutation(len(self.cases))
        sums = np.zeros(4)
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            x, seg, asym, valid = _batch(self.cases, order, start, cfg, rng, with_asym=stage == 2)
            try:
                sums += self._step(stage, x, seg, asym, valid, lrs)
            except NumericalFault as exc:
                raise NumericalFault(f"stage {stage} epoch {epoch}: {exc}", epoch=epoch) from exc
            steps += 1
        mean = sums / steps
        if not np.isfinite(mean).all():
            raise NumericalFault(f"stage {stage} epoch {epoch}: non-finite loss", epoch=epoch)
        row = {
            "epoch": epoch, "stage": stage,
            "lr_backbone": lr_bb, "lr_head": lr_head if lr_head is not None else "",
            "l_dice": mean[0], "l_ce": mean[1], "l_margin": mean[2], "total": mean[3],
        }
        self.state.history.append(row)
        self.state.stage, self.state.epoch = stage, epoch
        log.info("stage %d epoch %d total %.5f", stage, epoch, mean[3])
        self._append_log(row)
        total = self.stage_epochs(stage)
        if self.run_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == total):
            self.save(self.run_dir / f"ckpt_{stage}_{epoch}")
        return row

    def _append_log(self, row):
        if self.run_dir is None:
            return
        path = self.run_dir / "log.csv"
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(LOG_COLUMNS)
            w.writerow([_fmt(row[c]) for c in LOG_COLUMNS])

    def train_stage(self, stage, stop_after=None):
        """Run the remaining epochs of ``stage``; ``stop_after`` ends early (for resume tests)."""
        if self.state.stage > stage:
            return self.state
        start = self.state.epoch + 1 if self.state.stage == stage else 0
        if stage == 2 and start == 0:
            # stage 2 is a fresh optimizer over new parameter groups
            self.state.momentum.clear()
        for epoch in range(start, self.stage_epochs(stage)):
            self.run_epoch(stage, epoch)
            if stop_after is not None and epoch >= stop_after:
                break
        return self.state

    def train(self, stages=(1, 2)):
        for stage in stages:
            if self.stage_epochs(stage) > 0:
                self.train_stage(stage)
        return self.state

    # persistence ---------------------------------------------------------
    def save(self, path):
        extra = {f"momentum/{k}": v for k, v in self.state.momentum.items()}
        meta = {
            "train": self.cfg.to_json(),
            "rng": self.state.rng.bit_generator.state,
            "history": self.state.history,
        }
        return save_checkpoint(path, self.model, self.state.stage, self.state.epoch, extra, meta)

    @classmethod
    def resume(cls, cases, path, run_dir=None):
        model, manifest, extra = load_checkpoint(path)
        meta = manifest["meta"]
        cfg = TrainConfig.from_json(meta["train"])
        trainer = cls(cases, cfg, model.config, run_dir=None, model=model)
        trainer.run_dir = Path(run_dir) if run_dir is not None else None
        trainer.state.stage = manifest["stage"]
        trainer.state.epoch = manifest["epoch"]
        trainer.state.history = list(meta["history"])
        trainer.state.rng.bit_generator.state = meta["rng"]
        for key, arr in extra.items():
            if key.startswith("momentum/"):
                trainer.state.momentum[key[len("momentum/"):]] = arr.astype(np.float32)
        return trainer


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def train_stage1(model, cases, cfg, run_dir=None):
    trainer = Trainer(cases, cfg, model.config, run_dir, model=model)
    return trainer.train_stage(1)


def train_stage2(model, state, cases, cfg, run_dir=None):
    trainer = Trainer(cases, cfg, model.config, run_dir, model=model)
    trainer.state = state
    trainer.optimizer.buffers = state.momentum
    return trainer.train_stage(2)


# inference ---------------------------------------------------------------

def window_starts(size, patch):
    """Window origins covering ``size`` with 50% overlap; the last one is flush with the end."""
    if size <= patch:
        return [0]
    step = max(patch // 2, 1)
    starts = list(range(0, size - patch, step))
    starts.append(size - patch)
    return sorted(set(starts))


def _pad_to(arr, factor):
    pads = [(0, (-n) % factor) for n in arr.shape]
    if any(p[1] for p in pads):
        arr = np.pad(arr, pads, mode="edge")
    return arr


def predict_probabilities(model, image, patch_size, order=None):
    """Sliding-window sigmoid probabilities, averaged uniformly over overlaps.

    Windows are stitched in sorted position order whatever order they were
    evaluated in, so the result does not depend on traversal order.
    """
    factor = 2 ** model.config.n_downsamplings
    shape = image.shape
    patch = [min(p, n) for p, n in zip(patch_size, shape)]
    padded = _pad_to(image, factor)
    patch = [min(p + (-p) % factor, n) for p, n in zip(patch, padded.shape)]
    starts = [window_starts(n, p) for n, p in zip(padded.shape, patch)]
    windows = [(a, b, c) for a in starts[0] for b in starts[1] for c in starts[2]]
    if order is not None:
        windows = [windows[i] for i in order]
    results = {}
    with ad.no_grad():
        for a, b, c in windows:
            tile = padded[a:a + patch[0], b:b + patch[1], c:c + patch[2]]
            logits, _ = forward_seg(model, ad.Tensor(tile[None, None].astype(np.float32)))
            results[(a, b, c)] = ad.sigmoid(logits).data[0, 0]
    acc = np.zeros(padded.shape, dtype=np.float64)
    count = np.zeros(padded.shape, dtype=np.float64)
    for (a, b, c) in sorted(results):
        acc[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += results[(a, b, c)]
        count[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += 1.0
    prob = acc / count
    return prob[: shape[0], : shape[1], : shape[2]]


def infer(model, volume, patch_size=(48, 96, 96), order=None):
    """Binary lesion mask (probability strictly above 0.5); never touches the projection head."""
    prob = predict_probabilities(model, zscore(volume.data), patch_size, order)
    return BinaryMask((prob > 0.5).astype(np.uint8), volume.spacing)


def feature_separation(model, cases, use_projection=True):
    """Mean squared feature distance on asymmetric lesion voxels vs symmetric background.

    Background means voxels where neither the voxel nor its mirror is lesion.
    Evaluated on whole volumes.
    """
    lesion_d2, bg_d2 = [], []
    with ad.no_grad():
        for case in cases:
            x = ad.Tensor(case.image[None, None].astype(np.float32))
            _, e, e_flip = siamese_forward(model, x, use_projection=use_projection)
            d2 = squared_distance(e, e_flip).data[0, 0]
            asym = case.asym.astype(bool)
            seg = case.seg.astype(bool)
            background = ~seg & ~seg[:, :, ::-1]
            if asym.any():
                lesion_d2.append(d2[asym])
            bg_d2.append(d2[background])
    lesion = float(np.concatenate(lesion_d2).mean()) if lesion_d2 else float("nan")
    background = float(np.concatenate(bg_d2).mean())
    return lesion, background
