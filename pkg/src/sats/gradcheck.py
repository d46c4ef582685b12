"""Central finite-difference verification of every differentiable operator.

Each case builds small random double-precision inputs, contracts the op
output with a fixed random tensor to get a scalar, and compares the
reverse-mode gradient of every input against central differences
(five-point stencil, so curvature of the composite loss does not swamp the
comparison at the fixed step).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

STEP = 1e-4
# elements whose analytic and numeric gradients are both below this are
# compared absolutely; central differences cannot resolve smaller values
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def _scalar(fn, arrays, weights):
    out = fn(*[ad.Tensor(a) for a in arrays])
    return float((out.data * weights).sum())


def check(fn, arrays, rng, step=STEP, differentiable=None, frozen_branches=False):
    """Max elementwise relative error between analytic and numeric gradients.

    With ``frozen_branches`` every ReLU-type activation keeps, during the
    perturbed evaluations, the branch it took at the unperturbed point.
    The function is then smooth on that piece and central differences
    estimate the same derivative the backward pass computes, even where a
    perturbation would otherwise step across a kink.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    if differentiable is None:
        differentiable = range(len(arrays))
    tensors = [ad.Tensor(a, requires_grad=i in differentiable) for i, a in enumerate(arrays)]
    if frozen_branches:
        with _branches() as patterns:
            out = fn(*tensors)
        replay = lambda: _branches(patterns)
    else:
        out = fn(*tensors)
        replay = contextlib.nullcontext
    weights = rng.standard_normal(out.shape)
    ad.backward(ad.sum(ad.mul(out, weights)))

    worst = 0.0
    with ad.no_grad():
        for i in differentiable:
            analytic = tensors[i].grad
            if analytic is None:
                analytic = np.zeros_like(arrays[i])
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                values = []
                for k in (1, -1, 2, -2):
                    flat[j] = orig + k * step
                    with replay():
                        values.append(_scalar(fn, arrays, weights))
                flat[j] = orig
                up, down, up2, down2 = values
                # five-point central stencil: truncation error O(step^4)
                numeric.reshape(-1)[j] = (8 * (up - down) - (up2 - down2)) / (12 * step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
            worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst


def _away_from(rng, shape, point=0.0, gap=0.1, scale=1.0):
    x = rng.uniform(gap, gap + scale, size=shape)
    return point + x * rng.choice([-1.0, 1.0], size=shape)


def _cases(rng):
    """name -> (fn, inputs, differentiable-input indices or None)."""
    n = rng.standard_normal
    return {
        "conv3d": (
            lambda x, w, b: ad.conv3d(x, w, b, stride=1, padding=1),
            [n((2, 2, 4, 6, 6)), n((3, 2, 3, 3, 3)), n(3)], None),
        "conv3d_stride2": (
            lambda x, w, b: ad.conv3d(x, w, b, stride=2, padding=1),
            [n((2, 2, 4, 6, 6)), n((3, 2, 3, 3, 3)), n(3)], None),
        "conv3d_1x1x1": (
            lambda x, w, b: ad.conv3d(x, w, b),
            [n((2, 3, 2, 3, 4)), n((4, 3, 1, 1, 1)), n(4)], None),
        "conv_transpose3d": (
            lambda x, w, b: ad.conv_transpose3d(x, w, b, stride=2),
            [n((2, 3, 2, 3, 3)), n((3, 2, 2, 2, 2)), n(2)], None),
        "instance_norm": (
            lambda x, g, s: ad.instance_norm(x, g, s, eps=1e-5),
            [n((2, 3, 3, 4, 4)), n(3), n(3)], None),
        "leaky_relu": (lambda x: ad.leaky_relu(x, 0.01), [_away_from(rng, (3, 4, 5))], None),
        "relu": (ad.relu, [_away_from(rng, (3, 4, 5))], None),
        "unit_normalize": (
            lambda x: ad.unit_normalize(x, eps=1e-8),
            [_away_from(rng, (2, 4, 2, 3, 3), gap=0.2)], None),
        "add": (ad.add, [n((3, 4)), n((3, 4))], None),
        "add_broadcast": (ad.add, [n((2, 3, 4)), n((1, 3, 1))], None),
        "sub": (ad.sub, [n((3, 4)), n((3, 4))], None),
        "mul": (ad.mul, [n((3, 4)), n((3, 4))], None),
        "div": (ad.div, [n((3, 4)), _away_from(rng, (3, 4), gap=0.5)], None),
        "neg": (ad.neg, [n((3, 4))], None),
        "sum": (lambda x: ad.sum(x), [n((3, 4, 2))], None),
        "sum_axis": (lambda x: ad.sum(x, axis=1), [n((3, 4, 2))], None),
        "mean": (lambda x: ad.mean(x), [n((3, 4, 2))], None),
        "mean_axis": (lambda x: ad.mean(x, axis=(0, 2), keepdims=True), [n((3, 4, 2))], None),
        "square": (ad.square, [n((3, 4))], None),
        "sqrt": (ad.sqrt, [rng.uniform(0.5, 2.0, (3, 4))], None),
        "log": (ad.log, [rng.uniform(0.5, 2.0, (3, 4))], None),
        "sigmoid": (ad.sigmoid, [3 * n((3, 4))], None),
        "softplus": (ad.softplus, [3 * n((3, 4))], None),
        "max_with_constant": (lambda x: ad.maximum(x, 0.3), [_away_from(rng, (3, 4), point=0.3)], None),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n((2, 2, 3)), n((2, 3, 3))], None),
        "flip": (lambda x: ad.flip(x, axis=-1), [n((2, 2, 3, 4))], None),
    }


@contextlib.contextmanager
def _branches(replay=None):
    """Record (or, given a recording, impose) the branch of every ReLU-type call.

    Calls are matched by order, which is fixed for a given network.
    """
    patterns = [] if replay is None else None
    calls = iter(replay) if replay is not None else None
    originals = {name: getattr(ad, name) for name in ("relu", "leaky_relu", "maximum")}

    def wrap(name):
        def f(x, *args, **kw):
            point = args[0] if name == "maximum" else 0.0
            if calls is None:
                patterns.append(x.data > point)
                return originals[name](x, *args, **kw)
            above = next(calls)
            slope = (args[0] if args else kw.get("slope", 0.01)) if name == "leaky_relu" else 0.0
            below = point if name == "maximum" else slope * x.data
            return ad.Tensor(np.where(above, x.data, below))
        return f

    for name in originals:
        setattr(ad, name, wrap(name))
    try:
        yield patterns
    finally:
        for name, f in originals.items():
            setattr(ad, name, f)


def _composite_case(rng):
    """total_loss through a tiny Siamese network, with every parameter checked."""
    from .losses import LossConfig, total_loss
    from .network import NetConfig, build, siamese_forward

    config = NetConfig(base_filters=2, n_downsamplings=1)
    cfg = LossConfig()
    model = build(config, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for p in model.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    names = list(model.params)
    x = rng.standard_normal((1, 1, 4, 6, 6))
    target = (rng.random(x.shape) < 0.4).astype(np.float64)
    m = target * (rng.random(x.shape) < 0.7)

    def fn(*arrays):
        for name, t in zip(names, arrays):
            model.params[name] = t
        logits, e, e_flip = siamese_forward(model, ad.Tensor(x))
        return total_loss(logits, target, e, e_flip, m, cfg)

    return fn, [model.params[k].data for k in names], None


def run_all(seeds=(0, 1, 2), tol=1e-4, include_composite=True):
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = _cases(rng)
        if include_composite:
            cases["total_loss_through_network"] = _composite_case(rng)
        for name, (fn, inputs, diff) in cases.items():
            composite = name == "total_loss_through_network"
            err = check(fn, inputs, np.random.default_rng([seed, len(name)]), differentiable=diff,
                        frozen_branches=composite)
            results.append(CheckResult(name, seed, err, tol))
    return results


def format_table(results):
    lines = [f"{'operator':<28} {'seed':>4} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<28} {r.seed:>4} {r.max_rel_err:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
