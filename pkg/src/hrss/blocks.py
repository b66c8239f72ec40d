"""Composite blocks: four-way 2-D selective scan (optionally with deformable
aggregation), multi-scale depthwise block, feed-forward unit and the block
assemblies built from them.

All blocks take and return NCHW tensors of unchanged shape.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .dcn import DeformParams, deform_conv
from .functional import channel_shuffle, conv2d, gelu, layernorm, layernorm2d, linear, silu
from .sscan import DEFAULT_CHUNK, ScanParams, selective_scan
from .tensor import Tensor, concat, stack, take

DIRECTIONS = ("row", "row_rev", "col", "col_rev")


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    ssm_ratio: int = 2
    mlp_ratio: int = 2
    state_dim: int = 16
    dcn_groups: int = 4
    multidw_groups: int = 4
    use_dcn: bool = True
    use_multidw: bool = True
    multidw_in_ffn: bool = False
    multidw_uniform: bool = False
    dt_rank: int | None = None
    chunk: int = DEFAULT_CHUNK

    @property
    def inner(self) -> int:
        return self.ssm_ratio * self.channels

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.channels

    def validate(self) -> "BlockConfig":
        if self.channels < 1 or self.ssm_ratio < 1 or self.mlp_ratio < 1 or self.state_dim < 1:
            raise ValueError(f"non-positive block dimension in {self}")
        if self.use_dcn and self.inner % self.dcn_groups:
            raise ValueError(f"inner dim {self.inner} not divisible by DCN groups {self.dcn_groups}")
        if self.use_multidw and self.channels % self.multidw_groups:
            raise ValueError(f"channels {self.channels} not divisible by MultiDW groups {self.multidw_groups}")
        if self.multidw_in_ffn and self.hidden % self.multidw_groups:
            raise ValueError(f"FFN hidden {self.hidden} not divisible by MultiDW groups {self.multidw_groups}")
        return self


# ablation name -> (use_dcn, use_multidw, multidw_in_ffn, multidw_uniform)
ABLATIONS = {
    "ss2d": (False, False, False, False),
    "dss2d": (True, False, False, False),
    "multidw-in-ffn": (True, False, True, False),
    "dss2d+multidw": (True, True, False, False),
    "dss2d+multidw3": (True, True, False, True),
}


def apply_ablation(cfg: BlockConfig, name: str) -> BlockConfig:
    try:
        dcn, mdw, in_ffn, uniform = ABLATIONS[name]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
    return replace(cfg, use_dcn=dcn, use_multidw=mdw, multidw_in_ffn=in_ffn, multidw_uniform=uniform)


# ---------------------------------------------------------------------------
# four-way scan ordering


def direction_orders(h: int, w: int) -> list[np.ndarray]:
    """Flat (row-major) pixel index visited at each step of every direction."""
    row = np.arange(h * w)
    col = row.reshape(h, w).T.reshape(-1)
    return [row, row[::-1].copy(), col, col[::-1].copy()]


def cross_scan(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, 4, C, H*W) token sequences, one per direction."""
    b, c, h, w = x.shape
    flat = x.reshape(b, c, h * w)
    return stack([take(flat, order, axis=2) for order in direction_orders(h, w)], axis=1)


def cross_merge(y: Tensor, h: int, w: int) -> Tensor:
    """Undo each direction's ordering and sum the four maps -> (B, C, H, W)."""
    b, _, c, _ = y.shape
    out = None
    for d, order in enumerate(direction_orders(h, w)):
        back = take(y[:, d], np.argsort(order), axis=2)
        out = back if out is None else out + back
    return out.reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# 2-D selective scan


class SS2D(nn.Module):
    """expand -> 3x3 depthwise (or deformable) -> SiLU -> four-way scan ->
    merge -> LayerNorm -> SiLU gate -> project."""

    def __init__(self, channels: int, ssm_ratio: int = 2, state_dim: int = 16, use_dcn: bool = False,
                 dcn_groups: int = 4, dt_rank: int | None = None, chunk: int = DEFAULT_CHUNK, rng=None):
        d = ssm_ratio * channels
        self.channels, self.inner, self.use_dcn, self.chunk = channels, d, use_dcn, chunk
        self.w_in = nn.fan_in(rng, (channels, 2 * d), channels)
        if use_dcn:
            self.dcn = DeformParams(d, dcn_groups, rng=rng)
        else:
            self.dw_w = nn.fan_in(rng, (d, 1, 3, 3), 9)
            self.dw_b = nn.zeros(rng, (d,))
        rank = dt_rank if dt_rank is not None else max(1, channels // 16)
        self.scans = [ScanParams(d, state_dim, rank, rng=rng) for _ in DIRECTIONS]
        self.norm_g = nn.ones(rng, (d,))
        self.norm_b = nn.zeros(rng, (d,))
        self.w_out = nn.fan_in(rng, (d, channels), d)

    def local(self, x: Tensor) -> Tensor:
        if self.use_dcn:
            return deform_conv(x, self.dcn)
        return conv2d(x, self.dw_w, self.dw_b, pad=1, groups=self.inner)

    def scan_merge(self, x: Tensor) -> Tensor:
        b, d, h, w = x.shape
        seqs = cross_scan(x)
        ys = []
        for k, params in enumerate(self.scans):
            xs = seqs[:, k].permute(0, 2, 1)
            ys.append(selective_scan(xs, params, self.chunk).permute(0, 2, 1))
        return cross_merge(stack(ys, axis=1), h, w)

    def forward(self, x: Tensor) -> Tensor:
        d = self.inner
        xz = linear(x.permute(0, 2, 3, 1), self.w_in)
        xi, z = xz[..., :d], xz[..., d:]
        u = silu(self.local(xi.permute(0, 3, 1, 2)))
        y = self.scan_merge(u).permute(0, 2, 3, 1)
        y = layernorm(y, self.norm_g, self.norm_b) * silu(z)
        return linear(y, self.w_out).permute(0, 3, 1, 2)


def ss2d(x: Tensor, block: SS2D) -> Tensor:
    return block(x)


def dss2d(x: Tensor, block: SS2D) -> Tensor:
    if not block.use_dcn:
        raise ValueError("dss2d needs an SS2D built with use_dcn=True")
    return block(x)


# ---------------------------------------------------------------------------
# multi-scale depthwise


class MultiDW(nn.Module):
    """Split channels into G groups; group g (1-based) gets a (2g+1)x(2g+1)
    depthwise conv; concat, channel shuffle, GELU."""

    def __init__(self, channels: int, groups: int = 4, uniform: bool = False, rng=None):
        if channels % groups:
            raise ValueError(f"MultiDW: channels {channels} not divisible by groups {groups}")
        self.channels, self.groups = channels, groups
        self.kernel_sizes = tuple(3 if uniform else 2 * g + 1 for g in range(1, groups + 1))
        cg = channels // groups
        self.weights = [nn.fan_in(rng, (cg, 1, k, k), k * k) for k in self.kernel_sizes]
        self.biases = [nn.zeros(rng, (cg,)) for _ in self.kernel_sizes]

    def set_identity(self) -> None:
        for wt, b, k in zip(self.weights, self.biases, self.kernel_sizes):
            arr = np.zeros(wt.shape)
            arr[:, 0, k // 2, k // 2] = 1.0
            wt.data = arr
            b.data = np.zeros(b.shape)

    def forward(self, x: Tensor) -> Tensor:
        cg = self.channels // self.groups
        parts = []
        for g, (wt, b, k) in enumerate(zip(self.weights, self.biases, self.kernel_sizes)):
            xg = x[:, g * cg : (g + 1) * cg]
            parts.append(conv2d(xg, wt, b, pad=k // 2, groups=cg))
        return gelu(channel_shuffle(concat(parts, axis=1), self.groups))


def multidw(x: Tensor, block: MultiDW) -> Tensor:
    return block(x)


# ---------------------------------------------------------------------------
# feed-forward


class FFN(nn.Module):
    """LayerNorm -> expand by R -> GELU [-> MultiDW] -> project.  Returns the
    residual branch only."""

    def __init__(self, channels: int, ratio: int = 2, multidw_in_ffn: bool = False, multidw_groups: int = 4,
                 multidw_uniform: bool = False, rng=None):
        hidden = ratio * channels
        self.norm_g = nn.ones(rng, (channels,))
        self.norm_b = nn.zeros(rng, (channels,))
        self.w1 = nn.fan_in(rng, (channels, hidden), channels)
        self.b1 = nn.zeros(rng, (hidden,))
        self.w2 = nn.fan_in(rng, (hidden, channels), hidden)
        self.b2 = nn.zeros(rng, (channels,))
        self.mdw = MultiDW(hidden, multidw_groups, multidw_uniform, rng=rng) if multidw_in_ffn else None

    def forward(self, x: Tensor) -> Tensor:
        h = layernorm(x.permute(0, 2, 3, 1), self.norm_g, self.norm_b)
        h = gelu(linear(h, self.w1, self.b1))
        if self.mdw is not None:
            h = self.mdw(h.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return linear(h, self.w2, self.b2).permute(0, 3, 1, 2)


def ffn(x: Tensor, block: FFN) -> Tensor:
    return block(x)


# ---------------------------------------------------------------------------
# block assemblies


class DVSSBlock(nn.Module):
    """``x + SS2D(LN x)`` -> MultiDW -> ``x + FFN(x)``.

    Flags in the config select the ablation wiring; with ``use_dcn`` and
    ``use_multidw`` both off this is the plain VSS block.  MultiDW carries no
    residual of its own.
    """

    def __init__(self, cfg: BlockConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        self.norm_g = nn.ones(rng, (c,))
        self.norm_b = nn.zeros(rng, (c,))
        self.mixer = SS2D(c, cfg.ssm_ratio, cfg.state_dim, cfg.use_dcn, cfg.dcn_groups, cfg.dt_rank, cfg.chunk, rng=rng)
        self.mdw = MultiDW(c, cfg.multidw_groups, cfg.multidw_uniform, rng=rng) if cfg.use_multidw else None
        self.ffn = FFN(c, cfg.mlp_ratio, cfg.multidw_in_ffn, cfg.multidw_groups, cfg.multidw_uniform, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.mixer(layernorm2d(x, self.norm_g, self.norm_b))
        if self.mdw is not None:
            x = self.mdw(x)
        return x + self.ffn(x)


def dvss_block(x: Tensor, block: DVSSBlock) -> Tensor:
    return block(x)


class VSSBlock(nn.Module):
    """Reference VSS block: ``x + SS2D(LN x)`` then ``x + FFN(x)``."""

    def __init__(self, channels: int, ssm_ratio: int = 2, mlp_ratio: int = 2, state_dim: int = 16,
                 chunk: int = DEFAULT_CHUNK, rng=None):
        self.norm_g = nn.ones(rng, (channels,))
        self.norm_b = nn.zeros(rng, (channels,))
        self.mixer = SS2D(channels, ssm_ratio, state_dim, use_dcn=False, chunk=chunk, rng=rng)
        self.ffn = FFN(channels, mlp_ratio, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x + self.mixer(layernorm2d(x, self.norm_g, self.norm_b))
        return h + self.ffn(h)
