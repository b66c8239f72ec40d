"""Neural primitives on :class:`~hrss.tensor.Tensor`: convolution, linear maps,
layer normalization, activations, resampling and bilinear sampling.

All spatial ops zero-pad.  Contractions also report multiply-accumulate counts
to any active :class:`MacCounter`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import Tensor, record, tree_sum

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# MAC census


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.total += int(macs)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)


_counters: list[MacCounter] = []


@contextmanager
def count_macs():
    """Tally multiply-accumulates of every contraction run inside the block."""
    c = MacCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def tally(op: str, macs: int) -> None:
    for c in _counters:
        c.add(op, macs)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of Phi."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def rule(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record("gelu", (x,), xd * cdf, rule)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return record("silu", (x,), xd * s, lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))``, evaluated as ``x`` past the overflow threshold."""
    xd = x.data
    big = xd > 30.0
    out = np.where(big, xd, np.log1p(np.exp(np.minimum(xd, 30.0))))
    return record("softplus", (x,), out, lambda g: (g * expit(xd),))


# ---------------------------------------------------------------------------
# linear maps


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is stored (in, out)."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input features {xd.shape[-1]} != weight rows {wd.shape[0]}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    y = x2 @ wd
    if b is not None:
        y = y + b.data
    tally("linear", x2.shape[0] * wd.shape[0] * wd.shape[1])

    def rule(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, tree_sum(g2, axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", inputs, y.reshape(lead + (wd.shape[1],)), rule)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW input, weights (Cout, Cin/groups, k, k)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got rank {xd.ndim}")
    n, c, h, wid = xd.shape
    co, cg, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd-sized, got {k}x{k2}")
    if c % groups:
        raise ValueError(f"conv2d: input channels C={c} not divisible by groups={groups}")
    if co % groups:
        raise ValueError(f"conv2d: output channels Cout={co} not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(f"conv2d: weight in-channel dim {cg} != C/groups = {c // groups}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: spatial dims H={h}, W={wid} too small for kernel {k} with pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    tally("conv2d", n * co * cg * k * k * ho * wo)

    def tap(arr, i, j):
        return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    depthwise = groups == c and co == c
    if depthwise:
        out = np.zeros((n, c, ho, wo))
        for i in range(k):
            for j in range(k):
                out += wd[None, :, 0, i, j, None, None] * tap(xp, i, j)
    else:
        cog = co // groups
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = []
        out = np.empty((n, co, ho, wo))
        for g in range(groups):
            # (n, ho, wo, cg*k*k)
            cg_win = win[:, g * cg : (g + 1) * cg, :ho, :wo]
            col = np.ascontiguousarray(cg_win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cg * k * k)
            wg = wd[g * cog : (g + 1) * cog].reshape(cog, cg * k * k)
            out[:, g * cog : (g + 1) * cog] = (col @ wg.T).reshape(n, ho, wo, cog).transpose(0, 3, 1, 2)
            cols.append(col)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def rule(g):
        gxp = np.zeros(xp.shape)
        if depthwise:
            gw = np.zeros(wd.shape)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, tap(xp, i, j))
                    tap(gxp, i, j)[...] += wd[None, :, 0, i, j, None, None] * g
        else:
            gw = np.empty(wd.shape)
            cog = co // groups
            for gi in range(groups):
                gg = np.ascontiguousarray(g[:, gi * cog : (gi + 1) * cog].transpose(0, 2, 3, 1)).reshape(-1, cog)
                wg = wd[gi * cog : (gi + 1) * cog].reshape(cog, cg * k * k)
                gw[gi * cog : (gi + 1) * cog] = (gg.T @ cols[gi]).reshape(cog, cg, k, k)
                gcol = (gg @ wg).reshape(n, ho, wo, cg, k, k)
                for i in range(k):
                    for j in range(k):
                        tap(gxp[:, gi * cg : (gi + 1) * cg], i, j)[...] += gcol[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, tree_sum(g, axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, out, rule)


# ---------------------------------------------------------------------------
# normalization


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the affine map."""
    if eps < 0:
        raise ValueError("layernorm eps must be non-negative")
    xd = x.data
    c = xd.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    mu = tree_sum(xd, axis=-1, keepdims=True) / c
    xc = xd - mu
    var = tree_sum(xc * xc, axis=-1, keepdims=True) / c
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def rule(g):
        gxhat = g * gd
        m1 = tree_sum(gxhat, axis=-1, keepdims=True) / c
        m2 = tree_sum(gxhat * xhat, axis=-1, keepdims=True) / c
        gx = rstd * (gxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return gx, tree_sum(g * xhat, axis=lead), tree_sum(g, axis=lead)

    return record("layernorm", (x, gamma, beta), xhat * gd + beta.data, rule)


def layernorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Channel layer norm on NCHW (normalizes each pixel's channel vector)."""
    y = layernorm(x.permute(0, 2, 3, 1), gamma, beta, eps)
    return y.permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# resampling and channel ops


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def rule(g):
        return (tree_sum(g.reshape(n, c, h, factor, w, factor), axis=(3, 5)),)

    return record("upsample", (x,), out, rule)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Reshape channels to (groups, C/groups), transpose, flatten back."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channel_shuffle: C={c} not divisible by groups={groups}")
    y = x.reshape(n, groups, c // groups, h, w).permute(0, 2, 1, 3, 4)
    return y.reshape(n, c, h, w)


def shuffle_order(channels: int, groups: int) -> np.ndarray:
    """Source channel index feeding each output position of channel_shuffle."""
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(x, px: float, py: float, n: int, c: int) -> float:
    """Sample channel ``c`` of image ``n`` at column ``px``, row ``py``.

    Integer corners outside the map contribute zero.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    h, w = arr.shape[2], arr.shape[3]
    x0, y0 = math.floor(px), math.floor(py)
    lx, ly = px - x0, py - y0
    total = 0.0
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * float(arr[n, c, yy, xx])
    return total
