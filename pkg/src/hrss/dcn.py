"""Deformable 3x3 spatial aggregation with unnormalized modulation.

Channel layouts (per position):

* offsets: ``2 * G * K`` channels, index ``(g * K + k) * 2 + {0: dx, 1: dy}``
  (dx along width, dy along height);
* modulation: ``G * K`` channels, index ``g * K + k``;
* kernel point ``k`` sits at grid offset ``(dy, dx) = (k // 3 - 1, k % 3 - 1)``.

Group ``g`` owns input/output channels ``[g * C/G, (g + 1) * C/G)``.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .functional import conv2d, linear, tally
from .tensor import Tensor, record

POINTS = 9
GRID = tuple((k // 3 - 1, k % 3 - 1) for k in range(POINTS))


class DeformParams(nn.Module):
    """Offset/modulation predictor: depthwise 3x3 conv, then pointwise maps.

    The pointwise weights start at zero with modulation bias 1, so a fresh
    predictor yields zero offsets and unit modulation (a 3x3 box filter).
    """

    def __init__(self, channels: int, groups: int = 4, rng=None):
        if channels % groups:
            raise ValueError(f"DCN channels {channels} not divisible by groups {groups}")
        self.channels = channels
        self.groups = groups
        gk = groups * POINTS
        self.dw_w = nn.fan_in(rng, (channels, 1, 3, 3), 9)
        self.dw_b = nn.zeros(rng, (channels,))
        self.w_off = nn.zeros(rng, (channels, 2 * gk))
        self.b_off = nn.zeros(rng, (2 * gk,))
        self.w_mod = nn.zeros(rng, (channels, gk))
        self.b_mod = nn.ones(rng, (gk,))


def predict_offsets(x: Tensor, p: DeformParams) -> tuple[Tensor, Tensor]:
    """Offsets (N, 2GK, H, W) and modulation (N, GK, H, W) from ``x``."""
    feat = conv2d(x, p.dw_w, p.dw_b, pad=1, groups=p.channels).permute(0, 2, 3, 1)
    offsets = linear(feat, p.w_off, p.b_off).permute(0, 3, 1, 2)
    modulation = linear(feat, p.w_mod, p.b_mod).permute(0, 3, 1, 2)
    return offsets, modulation


def _corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Bilinear corners: (row, col, weight, d weight/d px, d weight/d py, in-bounds)."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    out = []
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        wy = ly if oy else 1.0 - ly
        wx = lx if ox else 1.0 - lx
        dwy = 1.0 if oy else -1.0
        dwx = 1.0 if ox else -1.0
        iy, ix = y0 + oy, x0 + ox
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out.append((np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1), wy * wx * valid,
                    wy * dwx * valid, wx * dwy * valid, valid))
    return out


def deform_aggregate(x: Tensor, offsets: Tensor, modulation: Tensor, groups: int) -> Tensor:
    """``Y_g(p0) = sum_k m_gk X_g(p0 + p_k + dp_gk)``, groups concatenated on channels."""
    xd, od, md = x.data, offsets.data, modulation.data
    n, c, h, w = xd.shape
    if c % groups:
        raise ValueError(f"deform_aggregate: C={c} not divisible by groups={groups}")
    gk = groups * POINTS
    if od.shape != (n, 2 * gk, h, w) or md.shape != (n, gk, h, w):
        raise ValueError(f"deform_aggregate: offsets {od.shape} / modulation {md.shape} "
                         f"do not match (N={n}, G={groups}, K={POINTS}, H={h}, W={w})")
    if not np.all(np.isfinite(od)):
        raise ValueError("deform_aggregate: non-finite offsets")
    cg = c // groups
    xg = np.ascontiguousarray(xd.reshape(n, groups, cg, h, w).transpose(0, 1, 3, 4, 2))
    off = od.reshape(n, groups, POINTS, 2, h, w)
    mod = md.reshape(n, groups, POINTS, h, w)
    ni = np.arange(n)[:, None, None, None]
    gi = np.arange(groups)[None, :, None, None]
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    tally("deform", n * c * h * w * POINTS * 5)

    def positions(k):
        ky, kx = GRID[k]
        return rows + ky + off[:, :, k, 1], cols + kx + off[:, :, k, 0]

    out = np.zeros((n, groups, h, w, cg))
    for k in range(POINTS):
        py, px = positions(k)
        s = np.zeros_like(out)
        for iy, ix, wt, _, _, _ in _corners(py, px, h, w):
            s += wt[..., None] * xg[ni, gi, iy, ix]
        out += mod[:, :, k, :, :, None] * s
    y = out.transpose(0, 1, 4, 2, 3).reshape(n, c, h, w)

    def rule(gy):
        gout = np.ascontiguousarray(gy.reshape(n, groups, cg, h, w).transpose(0, 1, 3, 4, 2))
        gxg = np.zeros_like(xg)
        goff = np.zeros((n, groups, POINTS, 2, h, w))
        gmod = np.zeros((n, groups, POINTS, h, w))
        for k in range(POINTS):
            py, px = positions(k)
            gs = mod[:, :, k, :, :, None] * gout
            s = np.zeros_like(gout)
            for iy, ix, wt, dwx, dwy, _ in _corners(py, px, h, w):
                val = xg[ni, gi, iy, ix]
                s += wt[..., None] * val
                np.add.at(gxg, (ni, gi, iy, ix), gs * wt[..., None])
                dot = np.einsum("nghwc,nghwc->nghw", gs, val)
                goff[:, :, k, 0] += dot * dwx
                goff[:, :, k, 1] += dot * dwy
            gmod[:, :, k] = np.einsum("nghwc,nghwc->nghw", gout, s)
        gx = gxg.transpose(0, 1, 4, 2, 3).reshape(n, c, h, w)
        return gx, goff.reshape(od.shape), gmod.reshape(md.shape)

    return record("deform_aggregate", (x, offsets, modulation), y, rule)


def deform_conv(x: Tensor, p: DeformParams) -> Tensor:
    offsets, modulation = predict_offsets(x, p)
    return deform_aggregate(x, offsets, modulation, p.groups)
