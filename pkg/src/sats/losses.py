"""Segmentation losses and the voxel-wise Siamese margin loss.

Targets and masks may be passed as numpy arrays (or BinaryMask objects)
shaped like the logits' spatial grid; they are constants in the graph.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, ShapeMismatch
from .volume import BinaryMask

CONVENTIONS = ("prose", "literal")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 20.0
    beta: float = 1.0
    margin_convention: str = "prose"
    reduction: str = "mean"
    dice_eps: float = 1e-5

    def __post_init__(self):
        if not self.margin > 0:
            raise InvalidConfig("margin must be > 0")
        if self.beta < 0:
            raise InvalidConfig("beta must be >= 0")
        if self.margin_convention not in CONVENTIONS:
            raise InvalidConfig(f"margin_convention must be one of {CONVENTIONS}")
        if self.reduction not in ("mean", "sum"):
            raise InvalidConfig("reduction must be 'mean' or 'sum'")

    def to_json(self):
        return asdict(self)


def _constant(arr, like, name):
    """Broadcast a target/mask to ``like``'s (N, 1, D, H, W) layout."""
    if isinstance(arr, BinaryMask):
        arr = arr.data
    arr = np.asarray(arr, dtype=like.dtype)
    spatial = like.shape[2:]
    if arr.shape == tuple(spatial):
        arr = arr.reshape((1, 1) + arr.shape)
    if arr.ndim != like.ndim or arr.shape[2:] != tuple(spatial) or arr.shape[0] not in (1, like.shape[0]):
        raise ShapeMismatch(f"{name} shape {arr.shape} does not match {like.shape}")
    return np.broadcast_to(arr, (like.shape[0], 1) + tuple(spatial))


def dice_loss(logits, target, eps=1e-5):
    """1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), with p = sigmoid(logits)."""
    g = _constant(target, logits, "target")
    if logits.shape != g.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {g.shape}")
    p = ad.sigmoid(logits)
    inter = ad.sum(ad.mul(p, g))
    denom = ad.add(ad.sum(p), float(g.sum()) + eps)
    return ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), eps), denom))


def bce_loss(logits, target):
    """Mean binary cross-entropy in logit form: softplus(x) - x g."""
    g = _constant(target, logits, "target")
    if logits.shape != g.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {g.shape}")
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, g)))


def squared_distance(e, e_flip):
    """Per-voxel squared Euclidean distance over channels, shape (N, 1, D, H, W)."""
    if e.shape != e_flip.shape:
        raise ShapeMismatch(f"E {e.shape} vs E_flip {e_flip.shape}")
    diff = ad.sub(e, e_flip)
    return ad.sum(ad.square(diff), axis=1, keepdims=True)


def margin_loss(e, e_flip, m, cfg=LossConfig(), valid=None):
    """Voxel-wise margin loss between original and mirrored-branch features.

    ``prose``: asymmetric voxels (m = 1) pay max(t - d^2, 0), the rest pay
    d^2. ``literal`` swaps the two indicator assignments. ``valid`` excludes
    voxels whose mirror correspondence is undefined; the mean runs over the
    remaining voxels.
    """
    d2 = squared_distance(e, e_flip)
    m = _constant(m, d2, "m")
    push = ad.maximum(ad.sub(cfg.margin, d2), 0.0)
    if cfg.margin_convention == "prose":
        w_push, w_pull = m, 1.0 - m
    else:
        w_push, w_pull = 1.0 - m, m
    if valid is not None:
        v = _constant(valid, d2, "valid")
        w_push, w_pull = w_push * v, w_pull * v
        count = float(v.sum())
    else:
        count = float(d2.data.size)
    terms = ad.add(ad.mul(push, np.ascontiguousarray(w_push)), ad.mul(d2, np.ascontiguousarray(w_pull)))
    total = ad.sum(terms)
    if cfg.reduction == "sum":
        return total
    return ad.mul(total, 1.0 / max(count, 1.0))


def total_loss(logits, target, e, e_flip, m, cfg=LossConfig(), valid=None):
    """dice + bce + beta * margin; the margin term is skipped entirely when beta == 0."""
    seg = ad.add(dice_loss(logits, target, cfg.dice_eps), bce_loss(logits, target))
    if cfg.beta == 0 or e is None:
        return seg
    return ad.add(seg, ad.mul(margin_loss(e, e_flip, m, cfg, valid), cfg.beta))


def loss_components(logits, target, e, e_flip, m, cfg=LossConfig(), valid=None):
    """(dice, bce, margin, total) as graph tensors; margin is None without features."""
    dice = dice_loss(logits, target, cfg.dice_eps)
    bce = bce_loss(logits, target)
    total = ad.add(dice, bce)
    margin = None
    if e is not None:
        margin = margin_loss(e, e_flip, m, cfg, valid)
        if cfg.beta != 0:
            total = ad.add(total, ad.mul(margin, cfg.beta))
    return dice, bce, margin, total
