"""Parameter containers.

A :class:`Module` owns :class:`Tensor` parameters and child modules as plain
attributes.  Passing ``rng=None`` to an initializer yields a *shape-only*
parameter: a zero-strided view of a single zero, which costs no memory and is
enough for parameter census and for forward passes where values are
irrelevant.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def abstract(shape) -> np.ndarray:
    return np.broadcast_to(np.zeros(1), tuple(shape))


def normal(rng, shape, std: float) -> Tensor:
    if rng is None:
        return _param(abstract(shape))
    return _param(rng.standard_normal(tuple(shape)) * std)


def fan_in(rng, shape, fan: int, gain: float = 1.0) -> Tensor:
    return normal(rng, shape, gain / np.sqrt(max(fan, 1)))


def const(rng, shape, value: float) -> Tensor:
    if rng is None:
        return _param(np.broadcast_to(np.full(1, float(value)), tuple(shape)))
    return _param(np.full(tuple(shape), float(value)))


def zeros(rng, shape) -> Tensor:
    return const(rng, shape, 0.0)


def ones(rng, shape) -> Tensor:
    return const(rng, shape, 1.0)


class Module:
    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield f"{name}.{i}.{j}", sub

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = state[name]
            value = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=np.float64)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)
