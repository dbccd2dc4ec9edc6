"""Writers for the inference engine's on-disk formats.

The engine consumes two files: a line-oriented model text (one layer per
line) and an "FSNW" weight file carrying dense float32 filters so a single
file serves every density sweep.  This module reimplements the encodings
from their wire definitions; the engine is never imported.

All encodings are little-endian.  A dense 3-D tensor ("FDT3") is stored
channel-innermost: element (c, h, w) at payload offset (w*H + h)*C + c.
"""

from __future__ import annotations

import struct

import numpy as np

DENSE3_MAGIC = b"FDT3"
WEIGHTS_MAGIC = b"FSNW"
WEIGHTS_VERSION = 1

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; sequential by definition, fine for desk-scale tensors."""
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def dense3_bytes(arr: np.ndarray) -> bytes:
    """Serialize a (C, H, W)-indexed float32 array as an FDT3 blob."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != 3:
        raise ValueError(f"expected a 3-D tensor, got shape {a.shape}")
    c, h, w = a.shape
    payload = np.ascontiguousarray(a.transpose(2, 1, 0)).astype("<f4").tobytes()
    return DENSE3_MAGIC + struct.pack("<III", c, h, w) + payload


def conv_record_bytes(filters: np.ndarray, bias: np.ndarray) -> bytes:
    """One conv layer's weight-file record: dims, N filter blobs, N biases."""
    n, c, h, w = filters.shape
    parts = [struct.pack("<IIII", n, c, h, w)]
    for f in range(n):
        parts.append(dense3_bytes(filters[f]))
    parts.append(np.asarray(bias, dtype="<f4").tobytes())
    return b"".join(parts)


def batchnorm_record_bytes(scale, shift, mean, var, epsilon: float) -> bytes:
    parts = [np.asarray(a, dtype="<f4").tobytes() for a in (scale, shift, mean, var)]
    parts.append(struct.pack("<f", np.float32(epsilon)))
    return b"".join(parts)


def weights_file_bytes(records: list[bytes]) -> bytes:
    head = WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(records))
    return head + b"".join(records)
