"""Binary tensor file format used for fixtures and CLI output.

Layout (little-endian):

    bytes 0..3   magic "AVPT"
    u32          rank
    u32 * rank   dimension sizes
    f64 * prod   payload, row-major

Arrays of any rank are accepted; feature maps are written (y, x, c).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVPT"
_MAX_RANK = 8


class TensorFormatError(ValueError):
    """The file does not look like a valid tensor fixture."""


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank < 1 or rank > _MAX_RANK:
        raise TensorFormatError(f"{path}: implausible rank {rank}")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise TensorFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=header_end, count=count)
    return data.astype(np.float64).reshape(dims)
