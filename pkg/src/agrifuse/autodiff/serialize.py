"""AGT1 binary container for a single tensor.

Layout (all little-endian)::

    b"AGT1" | rank: u64 | dims: rank x u64 | data: prod(dims) x f64 (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from agrifuse.autodiff.tensor import Tensor
from agrifuse.errors import InputError

MAGIC = b"AGT1"


def to_bytes(value: Union[Tensor, np.ndarray]) -> bytes:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    data = np.ascontiguousarray(data, dtype="<f8")
    header = MAGIC + struct.pack(f"<{1 + data.ndim}Q", data.ndim, *data.shape)
    return header + data.tobytes(order="C")


def from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise InputError(f"not an AGT1 container (magic {blob[:4]!r})")
    (rank,) = struct.unpack_from("<Q", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(blob) != offset + 8 * count:
        raise InputError(f"AGT1 payload length {len(blob) - offset} does not match dims {dims}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)


def save_tensor(path: Union[str, Path], value: Union[Tensor, np.ndarray]) -> None:
    Path(path).write_bytes(to_bytes(value))


def load_array(path: Union[str, Path]) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def load_tensor(path: Union[str, Path], requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)
