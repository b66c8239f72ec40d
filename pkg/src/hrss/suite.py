"""Finite-difference battery over every differentiable op and composite block.

Each ``check_*`` function builds a small seeded instance, draws fixed probe
weights and returns one :class:`FDCheckReport` per parameter.  Single ops are
probed coordinate-wise; composite blocks along random directions.  Parameters are
re-drawn at non-degenerate values (zero-initialized projections would give
identically zero gradients and prove nothing).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import blocks, dcn, net, sscan
from .functional import (channel_shuffle, conv2d, gelu, layernorm, layernorm2d, linear, relu, silu, softplus,
                         upsample_nearest)
from .gradcheck import FDCheckReport, fd_check, weighted_sum_loss
from .nn import Module
from .rng import stream
from .tensor import Tensor, concat, exp, log, matmul, split, square, stack, take

MODULES = ("core", "sscan", "dcn", "blocks", "net")


def _param(rng: np.random.Generator, *shape, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale + shift, requires_grad=True)


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite every parameter with ``N(0, scale^2)`` noise around its current value."""
    for _, p in module.named_parameters():
        p.data = np.array(p.data) + rng.standard_normal(p.shape) * scale


def _check(op: str, out_fn: Callable[[], Tensor], params: dict, rng: np.random.Generator,
           samples: int = 6, mode: str = "entries") -> list[FDCheckReport]:
    probe = rng.standard_normal(out_fn().shape)
    return fd_check(op, lambda: weighted_sum_loss(out_fn(), probe), params, samples=samples, rng=rng, mode=mode)


# ---------------------------------------------------------------------------
# tensor-core ops


def check_core(seed: int = 0) -> list[FDCheckReport]:
    rng = stream(seed, "gradcheck.core")
    a = _param(rng, 3, 4)
    b = _param(rng, 3, 4)
    pos = _param(rng, 3, 4, scale=0.2, shift=1.5)
    w = _param(rng, 4, 5)
    bias = _param(rng, 5)
    img = _param(rng, 2, 4, 5, 5)
    wg = _param(rng, 6, 2, 3, 3, scale=0.3)
    wdw = _param(rng, 4, 1, 3, 3, scale=0.3)
    bconv = _param(rng, 6)
    g = _param(rng, 4, shift=1.0)
    beta = _param(rng, 4)
    idx = np.array([2, 0, 0, 3])
    out = []
    out += _check("add", lambda: a + b, {"a": a, "b": b}, rng)
    out += _check("sub", lambda: a - b, {"a": a, "b": b}, rng)
    out += _check("mul", lambda: a * b, {"a": a, "b": b}, rng)
    out += _check("div", lambda: a / pos, {"a": a, "b": pos}, rng)
    out += _check("exp", lambda: exp(a), {"x": a}, rng)
    out += _check("log", lambda: log(pos), {"x": pos}, rng)
    out += _check("square", lambda: square(a), {"x": a}, rng)
    out += _check("sum", lambda: a.sum(axis=1, keepdims=True) * b, {"x": a}, rng)
    out += _check("mean", lambda: a.mean(axis=0) * 2.0, {"x": a}, rng)
    out += _check("broadcast", lambda: a * bias[:4], {"a": a, "b": bias}, rng)
    out += _check("reshape_permute", lambda: a.reshape(2, 6).permute(1, 0) * 1.5, {"x": a}, rng)
    out += _check("getitem", lambda: a[1:, ::2] * 1.0, {"x": a}, rng)
    out += _check("take", lambda: take(a, idx, axis=1), {"x": a}, rng)
    out += _check("concat", lambda: concat([a, b * 2.0], axis=0), {"a": a, "b": b}, rng)
    out += _check("stack", lambda: stack([a, b], axis=1), {"a": a, "b": b}, rng)
    out += _check("split", lambda: split(a, [1, 3], axis=-1)[1] * 1.0, {"x": a}, rng)
    out += _check("matmul", lambda: matmul(a, w), {"a": a, "b": w}, rng)
    out += _check("linear", lambda: linear(a, w, bias), {"x": a, "w": w, "b": bias}, rng)
    out += _check("relu", lambda: relu(a), {"x": a}, rng)
    out += _check("gelu", lambda: gelu(a), {"x": a}, rng)
    out += _check("silu", lambda: silu(a), {"x": a}, rng)
    out += _check("softplus", lambda: softplus(a), {"x": a}, rng)
    out += _check("layernorm", lambda: layernorm(a, g, beta), {"x": a, "gamma": g, "beta": beta}, rng)
    out += _check("layernorm2d", lambda: layernorm2d(img, g, beta), {"x": img, "gamma": g, "beta": beta}, rng)
    out += _check("conv2d_grouped", lambda: conv2d(img, wg, bconv, stride=2, pad=1, groups=2),
                  {"x": img, "w": wg, "b": bconv}, rng)
    out += _check("conv2d_depthwise", lambda: conv2d(img, wdw, pad=1, groups=4), {"x": img, "w": wdw}, rng)
    out += _check("upsample_nearest", lambda: upsample_nearest(img, 2), {"x": img}, rng)
    out += _check("channel_shuffle", lambda: channel_shuffle(img, 2), {"x": img}, rng)
    return out


# ---------------------------------------------------------------------------
# selective scan


def check_sscan(seed: int = 0) -> list[FDCheckReport]:
    rng = stream(seed, "gradcheck.sscan")
    p = sscan.ScanParams(6, state_dim=4, rank=2, rng=rng)
    randomize(p, rng, 0.2)
    _condition_scans(p, rng)
    x = _param(rng, 2, 13, 6)
    params = {"x": x, **dict(p.named_parameters())}
    out = []
    for chunk in (4, 13):
        out += _check(f"selective_scan[chunk={chunk}]", lambda c=chunk: sscan.selective_scan(x, p, c), params, rng)
    out += _check("s6_exact_zoh", lambda: sscan.scan_chunked(sscan.s6_parameterize(x, p, exact_zoh=True), x, 4),
                  params, rng)
    return out


# ---------------------------------------------------------------------------
# deformable aggregation


def check_dcn(seed: int = 0) -> list[FDCheckReport]:
    rng = stream(seed, "gradcheck.dcn")
    groups, c, h, w = 2, 4, 5, 6
    gk = groups * dcn.POINTS
    x = _param(rng, 1, c, h, w)
    # fractional parts kept near 0.5 (at least 0.3 away from the lattice)
    frac = rng.uniform(-0.2, 0.2, size=(1, 2 * gk, h, w)) + 0.5
    offsets = Tensor(frac + rng.integers(-2, 2, size=frac.shape), requires_grad=True)
    modulation = _param(rng, 1, gk, h, w)
    out = _check("deform_aggregate",
                 lambda: dcn.deform_aggregate(x, offsets, modulation, groups),
                 {"x": x, "offsets": offsets, "modulation": modulation}, rng)

    p = dcn.DeformParams(c, groups, rng=rng)
    randomize(p, rng, 0.02)
    p.b_off.data = np.array(p.b_off.data) + 0.5
    out += _check("deform_conv", lambda: dcn.deform_conv(x, p), {"x": x, **dict(p.named_parameters())}, rng)
    return out


# ---------------------------------------------------------------------------
# composite blocks


def _dcn_offsets_off_lattice(module: Module) -> None:
    for _, sub in _walk(module):
        if isinstance(sub, dcn.DeformParams):
            sub.w_off.data = np.array(sub.w_off.data) * 0.02
            sub.b_off.data = np.full(sub.b_off.shape, 0.5)


def _condition_scans(module: Module, rng: np.random.Generator) -> None:
    # unit-order step sizes; the default tiny ones leave d/d a_log near roundoff
    for _, sub in _walk(module):
        if isinstance(sub, sscan.ScanParams):
            sub.delta_bias.data = rng.normal(0.0, 0.3, size=sub.delta_bias.shape)


def _walk(module: Module, prefix: str = ""):
    yield prefix, module
    for name, child in module.children():
        yield from _walk(child, prefix + name + ".")


def _block_check(op: str, module: Module, x: Tensor, rng, samples: int = 4) -> list[FDCheckReport]:
    params = {"x": x, **dict(module.named_parameters())}
    return _check(op, lambda: module(x), params, rng, samples=samples, mode="directions")


def check_blocks(seed: int = 0) -> list[FDCheckReport]:
    rng = stream(seed, "gradcheck.blocks")
    c, h, w = 8, 4, 5
    x = _param(rng, 1, c, h, w)
    out = []

    ss = blocks.SS2D(c, 2, state_dim=2, use_dcn=False, chunk=4, rng=rng)
    randomize(ss, rng, 0.1)
    _condition_scans(ss, rng)
    out += _block_check("SS2D", ss, x, rng)

    dss = blocks.SS2D(c, 2, state_dim=2, use_dcn=True, dcn_groups=4, chunk=4, rng=rng)
    randomize(dss, rng, 0.1)
    _condition_scans(dss, rng)
    _dcn_offsets_off_lattice(dss)
    out += _block_check("DSS2D", dss, x, rng)

    mdw = blocks.MultiDW(c, 4, rng=rng)
    randomize(mdw, rng, 0.1)
    out += _block_check("MultiDW", mdw, x, rng)

    ffn = blocks.FFN(c, 2, multidw_in_ffn=True, rng=rng)
    randomize(ffn, rng, 0.1)
    out += _block_check("FFN", ffn, x, rng)

    cfg = blocks.BlockConfig(c, state_dim=2, chunk=4)
    blk = blocks.DVSSBlock(cfg, rng=rng)
    randomize(blk, rng, 0.1)
    _condition_scans(blk, rng)
    _dcn_offsets_off_lattice(blk)
    out += _block_check("DVSS", blk, x, rng)
    return out


# ---------------------------------------------------------------------------
# network pieces


def check_net(seed: int = 0) -> list[FDCheckReport]:
    rng = stream(seed, "gradcheck.net")
    out = []
    fz = net.Fuse((4, 8, 8), rng=rng)
    randomize(fz, rng, 0.1)
    xs = [_param(rng, 1, 4, 8, 8), _param(rng, 1, 8, 4, 4), _param(rng, 1, 8, 2, 2)]
    params = {f"x{i}": t for i, t in enumerate(xs)}
    params.update(fz.named_parameters())
    out += _check("fuse", lambda: concat([y.reshape(-1) for y in fz(xs)], axis=0), params, rng, mode="directions")

    # one two-branch module of HRVMamba-S at its true widths, on a small map
    cfg = net.preset("S")
    mod = net.HRModule(cfg, 2, cfg.blocks[1], rng=rng)
    randomize(mod, rng, 0.05)
    _condition_scans(mod, rng)
    _dcn_offsets_off_lattice(mod)
    ys = [_param(rng, 1, cfg.channels[0], 4, 4), _param(rng, 1, cfg.channels[1], 2, 2)]
    params = {f"x{i}": t for i, t in enumerate(ys)}
    params.update(mod.named_parameters())
    out += _check("hrvmamba_s_module", lambda: concat([y.reshape(-1) for y in mod(ys)], axis=0), params, rng,
                  samples=2, mode="directions")

    stem = net.Stem(4, rng=rng)
    img = _param(rng, 1, 3, 32, 32)
    out += _check("stem", lambda: stem(img), {"x": img, **dict(stem.named_parameters())}, rng, samples=3,
                  mode="directions")
    return out


CHECKS: dict[str, Callable[[int], list[FDCheckReport]]] = {
    "core": check_core,
    "sscan": check_sscan,
    "dcn": check_dcn,
    "blocks": check_blocks,
    "net": check_net,
}


def run(module: str = "all", seed: int = 0) -> list[FDCheckReport]:
    names = MODULES if module == "all" else (module,)
    unknown = [m for m in names if m not in CHECKS]
    if unknown:
        raise ValueError(f"unknown module {unknown[0]!r}; choose from all, {', '.join(MODULES)}")
    reports = []
    for name in names:
        reports += CHECKS[name](seed)
    return reports
