"""3D convolution and transposed convolution.

Inputs are (N, C, D, H, W). The strided convolution is computed by
unfolding slabs of output depth into column matrices (im2col) and doing one
matrix product per slab, which bounds the temporary memory to about
``SLAB_BYTES`` regardless of the volume size.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch
from .tensor import make_node

SLAB_BYTES = 64 * 2**20


def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _slabs(depth, row_bytes):
    step = max(1, min(depth, SLAB_BYTES // max(row_bytes, 1)))
    return [(d0, min(depth, d0 + step)) for d0 in range(0, depth, step)]


def _columns(xp_n, k, stride, d0, d1, out_hw):
    """(C*k^3, (d1-d0)*Ho*Wo) column matrix for output depth rows [d0, d1)."""
    ho, wo = out_hw
    lo = d0 * stride
    hi = (d1 - 1) * stride + k
    win = sliding_window_view(xp_n[:, lo:hi], (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    c = xp_n.shape[0]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c * k**3, -1)


def sum_batch_outer(a, b):
    """sum_n a[n] @ b[n].T for (N, P, V) and (N, Q, V) stacks."""
    out = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ b[i].T
    return out


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` with ``weight`` (O, C, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv3d: input {x.shape} vs weight {weight.shape}")
    k = weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ShapeMismatch("conv3d: only cubic kernels are supported")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"conv3d: bias {bias.shape} for {weight.shape[0]} outputs")
    if stride not in (1, 2):
        raise ShapeMismatch("conv3d: stride must be 1 or 2")
    n, c, d, h, w = x.shape
    o = weight.shape[0]
    do, ho, wo = (_out_size(s, k, stride, padding) for s in (d, h, w))
    if min(do, ho, wo) < 1:
        raise ShapeMismatch(f"conv3d: input {x.shape} too small for kernel {k}")
    wmat = weight.data.reshape(o, -1)
    dtype = np.result_type(x.data, weight.data)

    if k == 1 and stride == 1 and padding == 0:
        x2 = x.data.reshape(n, c, -1)
        out = np.matmul(wmat, x2).reshape(n, o, d, h, w)
        if bias is not None:
            out += bias.data.reshape(1, o, 1, 1, 1)

        def bw_pointwise(g):
            g2 = g.reshape(n, o, -1)
            gx = np.matmul(wmat.T, g2).reshape(x.shape) if x.requires_grad else None
            gw = sum_batch_outer(g2, x2).reshape(weight.shape)
            gb = g2.sum(axis=(0, 2)) if bias is not None else None
            return gx, gw, gb

        parents = (x, weight) if bias is None else (x, weight, bias)
        return make_node(out, parents, bw_pointwise, "conv3d")

    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(x.data, pad) if padding else x.data
    out = np.empty((n, o, do, ho, wo), dtype=dtype)
    slabs = _slabs(do, c * k**3 * ho * wo * xp.itemsize)
    for i in range(n):
        for d0, d1 in slabs:
            cols = _columns(xp[i], k, stride, d0, d1, (ho, wo))
            out[i, :, d0:d1] = (wmat @ cols).reshape(o, d1 - d0, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1, 1)

    def bw(g):
        gw = np.zeros_like(wmat)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(n):
            for d0, d1 in slabs:
                gs = g[i, :, d0:d1].reshape(o, -1)
                cols = _columns(xp[i], k, stride, d0, d1, (ho, wo))
                gw += gs @ cols.T
                if gxp is None:
                    continue
                dcols = (wmat.T @ gs).reshape(c, k, k, k, d1 - d0, ho, wo)
                lo = d0 * stride
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            gxp[i, :,
                                lo + a: lo + a + stride * (d1 - d0): stride,
                                b: b + stride * ho: stride,
                                e: e + stride * wo: stride] += dcols[:, a, b, e]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding: padding + d, padding: padding + h, padding: padding + w]
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "conv3d")


def conv_transpose3d(x, weight, bias=None, stride=2):
    """Non-overlapping transposed convolution; ``weight`` is (C_in, C_out, s, s, s).

    Each input voxel scatters a learned s^3 block, so every spatial dimension
    is multiplied by ``stride``.
    """
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"conv_transpose3d: input {x.shape} vs weight {weight.shape}")
    s = stride
    if weight.shape[2:] != (s, s, s):
        raise ShapeMismatch("conv_transpose3d: kernel size must equal the stride")
    n, c, d, h, w = x.shape
    o = weight.shape[1]
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"conv_transpose3d: bias {bias.shape} for {o} outputs")
    wmat = weight.data.reshape(c, o * s**3)
    x2 = x.data.reshape(n, c, -1)
    blocks = np.matmul(wmat.T, x2).reshape(n, o, s, s, s, d, h, w)
    out = np.ascontiguousarray(blocks.transpose(0, 1, 5, 2, 6, 3, 7, 4)).reshape(n, o, d * s, h * s, w * s)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1, 1)

    def bw(g):
        gb = g.reshape(n, o, d, s, h, s, w, s).transpose(0, 1, 3, 5, 7, 2, 4, 6)
        gb = gb.reshape(n, o * s**3, d * h * w)
        gx = np.matmul(wmat, gb).reshape(x.shape) if x.requires_grad else None
        gw = sum_batch_outer(x2, gb).reshape(weight.shape)
        gbias = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "conv_transpose3d")
