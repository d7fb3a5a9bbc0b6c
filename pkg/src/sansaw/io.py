"""Binary tensor blobs (SAWT) and named-tensor checkpoints (SAWM).

SAWT layout, all little-endian::

    b"SAWT" | u32 version=1 | u32 ndim | u32 dims[ndim] | f32 payload (row-major)

SAWM layout::

    b"SAWM" | u32 version=1 | u32 count | count x (u32 name_len | name utf-8 | SAWT blob)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"SAWT"
CHECKPOINT_MAGIC = b"SAWM"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if not 1 <= t.ndim <= 4:
        raise FormatError(f"SAWT holds rank 1-4 tensors, got rank {t.ndim}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", VERSION, t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, ndim = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"bad rank {ndim}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(dims))
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.astype(np.float32).reshape(dims)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, t in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, t)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(Path(path), "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
