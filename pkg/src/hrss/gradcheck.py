"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, no_grad

H = 1e-5
THRESHOLD = 1e-4
FLOOR = 1e-8


@dataclass
class FDCheckReport:
    op: str
    param: str
    max_rel_err: float
    h: float
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.threshold)

    def csv_row(self) -> str:
        return f"{self.op},{self.param},{self.max_rel_err:.6e},{self.h:.0e},{'pass' if self.passed else 'FAIL'}"


CSV_HEADER = "op,param,max_rel_err,h,status"


def rel_err(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def fd_check(op: str, loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], *,
             h: float = H, samples: int = 6, rng: np.random.Generator | None = None,
             threshold: float = THRESHOLD, mode: str = "entries") -> list[FDCheckReport]:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``mode="entries"`` probes ``samples`` coordinates per parameter (all of
    them for small tensors).  ``mode="directions"`` instead compares the
    directional derivative ``<g, v>`` along ``samples`` random Gaussian
    directions, which keeps deep composites, whose individual coordinates can
    have derivatives below the roundoff floor of the loss, well conditioned.
    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    on every call.
    """
    if mode not in ("entries", "directions"):
        raise ValueError(f"unknown fd_check mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        if not (p.data.flags.writeable and p.data.flags.c_contiguous):
            p.data = np.array(p.data, order="C")
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)

    def central(flat, idx, step):
        orig = flat[idx].copy()
        with no_grad():
            flat[idx] = orig + step
            fp = loss_fn().item()
            flat[idx] = orig - step
            fm = loss_fn().item()
        flat[idx] = orig
        return (fp - fm) / (2 * h)

    reports = []
    for name, p in params.items():
        g = grads.get(p)
        g = np.zeros(p.shape) if g is None else g
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        worst = 0.0
        if mode == "entries":
            if flat.size <= samples:
                idx = np.arange(flat.size)
            else:
                idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
            for i in idx:
                worst = max(worst, float(rel_err(gflat[i], central(flat, slice(i, i + 1), h))))
        else:
            everything = slice(None)
            for _ in range(samples):
                v = rng.standard_normal(flat.size)
                worst = max(worst, float(rel_err(gflat @ v, central(flat, everything, h * v))))
        reports.append(FDCheckReport(op, name, worst, h, threshold))
    return reports


def weighted_sum_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe ``sum(w * out)`` with fixed random weights."""
    return (out * Tensor(weights)).sum()
