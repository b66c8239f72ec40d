"""Binary tensor container and weight files.

Container layout (all little-endian)::

    b"HRT1" | u32 rank | u64 extent * rank | f64 payload (row-major)

A weights file is a plain concatenation of containers; the sidecar manifest
(JSON) maps each parameter name to the byte offset of its container.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"HRT1"


class FormatError(ValueError):
    pass


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated payload: expected {8 * count} bytes, got {len(payload)}")
    return Tensor(np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape))


def tensor_from_bytes(buf: bytes) -> Tensor:
    import io

    return read_tensor(io.BytesIO(buf))


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_weights(path: str | Path, named: Mapping[str, Tensor | np.ndarray]) -> dict[str, int]:
    """Write ``named`` tensors to ``path`` plus ``<path>.manifest.json``."""
    offsets: dict[str, int] = {}
    with open(path, "wb") as fh:
        for name, t in named.items():
            offsets[name] = fh.tell()
            fh.write(tensor_to_bytes(t))
    manifest_path(path).write_text(json.dumps({"format": "HRT1", "tensors": offsets}, indent=2) + "\n")
    return offsets


def load_weights(path: str | Path) -> dict[str, Tensor]:
    meta = json.loads(manifest_path(path).read_text())
    out: dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        for name, offset in meta["tensors"].items():
            fh.seek(offset)
            out[name] = read_tensor(fh)
    return out
