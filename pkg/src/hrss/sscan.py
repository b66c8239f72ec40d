"""Selective (input-dependent) state-space scan.

Shapes: sequences are (B, L, C); per-channel diagonal state has N entries, so
discretized transition and input terms are (B, L, C, N) and the readout
vectors are (B, L, N).

The recurrence is ``h_t = abar_t * h_{t-1} + bbar_t * x_t`` with ``h_0 = 0`` and
``y_t = <c_t, h_t>`` per channel.  Token indices in the contribution analysis
are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .functional import linear, softplus, tally
from .parallel import split_apply
from .tensor import Tensor, exp, record

DEFAULT_CHUNK = 64


class ScanParams(nn.Module):
    """Parameters of one selective-scan head over ``channels`` channels.

    ``A = -exp(a_log)`` so the transition is negative by construction.  The
    step-size projection is low rank: ``x -> x @ w_dt_down @ w_dt_up``.
    """

    def __init__(self, channels: int, state_dim: int = 16, rank: int | None = None, rng=None,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        self.channels = channels
        self.state_dim = state_dim
        self.rank = rank if rank is not None else max(1, channels // 16)
        c, n, r = channels, state_dim, self.rank
        if rng is None:
            self.a_log = nn.zeros(None, (c, n))
            self.delta_bias = nn.zeros(None, (c,))
        else:
            self.a_log = Tensor(np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (c, 1)), requires_grad=True)
            dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=c))
            # inverse softplus so that softplus(delta_bias) == dt
            self.delta_bias = Tensor(dt + np.log(-np.expm1(-dt)), requires_grad=True)
        self.w_b = nn.fan_in(rng, (c, n), c)
        self.w_c = nn.fan_in(rng, (c, n), c)
        self.w_dt_down = nn.fan_in(rng, (c, r), c)
        self.w_dt_up = nn.fan_in(rng, (r, c), r)

    @property
    def A(self) -> Tensor:
        return -exp(self.a_log)


@dataclass
class DiscretizedStep:
    abar: Tensor   # (B, L, C, N), in (0, 1)
    bbar: Tensor   # (B, L, C, N)
    c: Tensor      # (B, L, N)
    delta: Tensor  # (B, L, C), > 0
    A: Tensor      # (C, N), < 0

    @property
    def length(self) -> int:
        return self.abar.shape[1]


def s6_parameterize(x: Tensor, p: ScanParams, exact_zoh: bool = False) -> DiscretizedStep:
    """Input-dependent discretization of one scan head.

    ``bbar`` uses the first-order form ``delta * B``; ``exact_zoh=True`` uses
    ``(exp(delta A) - 1) / A * B`` instead (for comparison only).
    """
    if x.ndim != 3 or x.shape[-1] != p.channels:
        raise ValueError(f"s6_parameterize expects (B, L, {p.channels}), got {x.shape}")
    b, l, c = x.shape
    n = p.state_dim
    b_t = linear(x, p.w_b)
    c_t = linear(x, p.w_c)
    delta = softplus(linear(linear(x, p.w_dt_down), p.w_dt_up) + p.delta_bias)
    A = p.A
    delta4 = delta.reshape(b, l, c, 1)
    abar = exp(delta4 * A)
    b4 = b_t.reshape(b, l, 1, n)
    bbar = (abar - 1.0) / A * b4 if exact_zoh else delta4 * b4
    return DiscretizedStep(abar, bbar, c_t, delta, A)


# ---------------------------------------------------------------------------
# reference scan


def _naive_states(abar: np.ndarray, bbar: np.ndarray, c: np.ndarray, x: np.ndarray):
    bsz, l, ch, n = abar.shape
    h = np.zeros((bsz, ch, n))
    hs = np.empty((bsz, l, ch, n))
    y = np.empty((bsz, l, ch))
    for t in range(l):
        h = abar[:, t] * h + bbar[:, t] * x[:, t, :, None]
        hs[:, t] = h
        y[:, t] = np.einsum("bcn,bn->bc", h, c[:, t])
    return hs, y


def scan_naive(step: DiscretizedStep, x: Tensor) -> Tensor:
    """Token-by-token recurrence; the oracle for every other scan."""
    _, y = _naive_states(step.abar.data, step.bbar.data, step.c.data, x.data)
    return Tensor(y)


# ---------------------------------------------------------------------------
# chunked scan


def _sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    h[:, 0] = b[:, 0]
    for t in range(1, a.shape[1]):
        h[:, t] = a[:, t] * h[:, t - 1] + b[:, t]
    return h


def _two_level(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """Local prefix inside every chunk at once, then carry states across chunks."""
    bsz, l = a.shape[:2]
    rest = a.shape[2:]
    nc = -(-l // chunk)
    lp = nc * chunk
    if lp != l:
        pad = [(0, 0), (0, lp - l)] + [(0, 0)] * len(rest)
        a = np.pad(a, pad, constant_values=1.0)
        b = np.pad(b, pad)
    a4 = a.reshape((bsz, nc, chunk) + rest)
    b4 = b.reshape((bsz, nc, chunk) + rest)
    h = np.empty_like(b4)
    prod = np.empty_like(a4)
    h[:, :, 0] = b4[:, :, 0]
    prod[:, :, 0] = a4[:, :, 0]
    for t in range(1, chunk):
        h[:, :, t] = a4[:, :, t] * h[:, :, t - 1] + b4[:, :, t]
        prod[:, :, t] = prod[:, :, t - 1] * a4[:, :, t]
    for j in range(1, nc):
        h[:, j] = h[:, j] + prod[:, j] * h[:, j - 1, -1][:, None]
    return h.reshape((bsz, lp) + rest)[:, :l]


def linear_recurrence(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """All states of ``h_t = a_t h_{t-1} + b_t`` (axis 1 is time, h_0 = 0)."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    out = np.empty_like(b)
    l = a.shape[1]

    def work(sl):
        if chunk >= l:
            out[:, :, sl] = _sequential(a[:, :, sl], b[:, :, sl])
        else:
            out[:, :, sl] = _two_level(a[:, :, sl], b[:, :, sl], chunk)

    split_apply(work, a.shape[2])
    return out


def scan_chunked(step: DiscretizedStep, x: Tensor, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Selective scan via chunk-wise prefix composition; differentiable.

    ``chunk >= L`` runs the reference token loop itself.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    abar, bbar, c = step.abar.data, step.bbar.data, step.c.data
    xd = x.data
    bsz, l, ch, n = abar.shape
    if xd.shape != (bsz, l, ch):
        raise ValueError(f"scan input {xd.shape} does not match step {(bsz, l, ch)}")
    tally("scan", 2 * bsz * l * ch * n)
    if chunk >= l:
        h, y = _naive_states(abar, bbar, c, xd)
    else:
        h = linear_recurrence(abar, bbar * xd[..., None], chunk)
        y = np.einsum("blcn,bln->blc", h, c)

    def rule(gy):
        return scan_backward(abar, bbar, c, xd, h, gy, chunk)

    return record("selective_scan", (step.abar, step.bbar, step.c, x), y, rule)


def scan_backward(abar, bbar, c, x, h, gy, chunk: int = DEFAULT_CHUNK):
    """Adjoints of the scan: ``dh_t = abar_{t+1} dh_{t+1} + c_t * dy_t``.

    Returns gradients for (abar, bbar, c, x).
    """
    src = c[:, :, None, :] * gy[..., None]
    a_next = np.zeros_like(abar)
    a_next[:, :-1] = abar[:, 1:]
    dh = linear_recurrence(a_next[:, ::-1], src[:, ::-1], min(chunk, abar.shape[1]))[:, ::-1]
    h_prev = np.zeros_like(h)
    h_prev[:, 1:] = h[:, :-1]
    g_abar = dh * h_prev
    g_bbar = dh * x[..., None]
    g_x = np.einsum("blcn,blcn->blc", dh, bbar)
    g_c = np.einsum("blc,blcn->bln", gy, h)
    return g_abar, g_bbar, g_c, g_x


def selective_scan(x: Tensor, p: ScanParams, chunk: int = DEFAULT_CHUNK) -> Tensor:
    return scan_chunked(s6_parameterize(x, p), x, chunk)


# ---------------------------------------------------------------------------
# token contribution analysis


def _log_terms(step: DiscretizedStep, batch: int) -> np.ndarray:
    # delta_i * A per token, (L, C, N); same product the discretization exponentiates
    return step.delta.data[batch][:, :, None] * step.A.data[None]


def log_decay(step: DiscretizedStep, m: int, batch: int = 0, inclusive: bool = True) -> np.ndarray:
    """``sum_{i=m}^{n} delta_i A`` for n = m..L, accumulated left to right.

    Row ``j`` of the (L - m + 1, C, N) result corresponds to n = m + j.  With
    ``inclusive=False`` the sum starts at i = m + 1 (row 0 is then zero).
    """
    l = step.length
    if not 1 <= m <= l:
        raise ValueError(f"token index m={m} outside 1..{l}")
    terms = _log_terms(step, batch)[m - 1 :].copy()
    if not inclusive:
        terms[0] = 0.0
    return np.cumsum(terms, axis=0)


def contribution(step: DiscretizedStep, m: int, n: int, channel: int, batch: int = 0,
                 inclusive: bool = True) -> float:
    """Weight of token ``m`` in the output at token ``n`` for one channel.

    ``c_n . exp(sum_{i=m}^{n} delta_i A) * bbar_m``; ``inclusive=False`` drops
    the i = m term, which is what unrolling the recurrence produces.
    """
    if m < 1:
        raise ValueError(f"token index m={m} must be >= 1")
    if m >= n:
        raise ValueError(f"contribution needs m < n, got m={m}, n={n}")
    if n > step.length:
        raise ValueError(f"token index n={n} exceeds sequence length {step.length}")
    decay = log_decay(step, m, batch, inclusive)[n - m, channel]
    cn = step.c.data[batch, n - 1]
    bm = step.bbar.data[batch, m - 1, channel]
    return float(np.sum(cn * np.exp(decay) * bm))


def contribution_map(step: DiscretizedStep, n: int, channel: int | None = None, batch: int = 0,
                     inclusive: bool = True) -> np.ndarray:
    """``|contribution(m, n)|`` for every m < n (zeros for m >= n), length L.

    ``channel=None`` averages the magnitudes over channels.
    """
    l = step.length
    if not 1 <= n <= l:
        raise ValueError(f"query index n={n} outside 1..{l}")
    out = np.zeros(l)
    if n == 1:
        return out
    terms = _log_terms(step, batch)[:n]          # i = 1..n
    # suffix sums S[m-1] = sum_{i=m}^{n}
    suffix = np.cumsum(terms[::-1], axis=0)[::-1]
    if not inclusive:
        suffix = suffix - terms
    decay = np.exp(suffix[: n - 1])              # m = 1..n-1, (n-1, C, N)
    cn = step.c.data[batch, n - 1]
    bm = step.bbar.data[batch, : n - 1]
    vals = np.abs(np.einsum("n,mcn->mc", cn, decay * bm))
    out[: n - 1] = vals.mean(axis=1) if channel is None else vals[:, channel]
    return out


def normalize_map(values: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    return values / peak if peak > 0 else np.zeros_like(values)
