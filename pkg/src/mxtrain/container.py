"""MXT1 tensor container.

Layout (little-endian)::

    magic   b"MXT1"
    u32     rows
    u32     cols
    u8      axis       0 = row groups (1x32), 1 = column groups (32x1)
    u8      format id  0 = E2M1, 1 = E3M0
    blocks  17 bytes each, row-major group order

A block is 16 bytes of nibble-packed codes (low nibble holds the even index)
followed by the signed exponent byte ``s``.  Slots past a ragged tail carry
the zero code.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codec import BLOCK_NBYTES, BLOCK_SIZE, S_MAX, S_MIN, WireFormatError
from .formats import FormatId, get_format
from .mx_linear import Axis, QuantizedMatrix, group_lengths

MAGIC = b"MXT1"
_HEADER = struct.Struct("<4sIIBB")
HEADER_NBYTES = _HEADER.size


def pack_blocks(codes: np.ndarray, exponents: np.ndarray) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8)
    out = np.empty((codes.shape[0], BLOCK_NBYTES), dtype=np.uint8)
    out[:, :16] = codes[:, 0::2] | (codes[:, 1::2] << 4)
    out[:, 16] = np.asarray(exponents, dtype=np.int8).view(np.uint8)
    return out.tobytes()


def unpack_blocks(buf: bytes, n_blocks: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(buf, dtype=np.uint8, count=n_blocks * BLOCK_NBYTES).reshape(n_blocks, BLOCK_NBYTES)
    codes = np.empty((n_blocks, BLOCK_SIZE), dtype=np.uint8)
    codes[:, 0::2] = raw[:, :16] & 0x0F
    codes[:, 1::2] = raw[:, :16] >> 4
    exps = raw[:, 16].view(np.int8).copy()
    return codes, exps


def to_bytes(qm: QuantizedMatrix) -> bytes:
    rows, cols = qm.shape
    header = _HEADER.pack(MAGIC, rows, cols, int(qm.axis), int(qm.fmt.format_id))
    return header + pack_blocks(qm.codes, qm.exponents)


def from_bytes(buf: bytes) -> QuantizedMatrix:
    if len(buf) < HEADER_NBYTES:
        raise WireFormatError(f"truncated header: {len(buf)} bytes")
    magic, rows, cols, axis, fmt_id = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if axis not in (0, 1):
        raise WireFormatError(f"bad axis byte {axis}")
    if fmt_id not in tuple(FormatId):
        raise WireFormatError(f"unknown format id {fmt_id}")
    if rows == 0 or cols == 0:
        raise WireFormatError(f"empty shape {rows}x{cols}")
    axis = Axis(axis)
    lengths = group_lengths((rows, cols), axis)
    need = HEADER_NBYTES + len(lengths) * BLOCK_NBYTES
    if len(buf) != need:
        raise WireFormatError(f"expected {need} bytes for {rows}x{cols}, found {len(buf)}")
    codes, exps = unpack_blocks(buf[HEADER_NBYTES:], len(lengths))
    if np.any(exps < S_MIN) or np.any(exps > S_MAX):
        raise WireFormatError(f"scale exponent outside [{S_MIN}, {S_MAX}]")
    pad = np.arange(BLOCK_SIZE)[None, :] >= lengths[:, None]
    if np.any(codes[pad] != 0):
        raise WireFormatError("non-zero code in a padding slot")
    return QuantizedMatrix((rows, cols), axis, codes, exps, get_format(fmt_id), provenance="MXT1")


def save(path, qm: QuantizedMatrix) -> None:
    Path(path).write_bytes(to_bytes(qm))


def load(path) -> QuantizedMatrix:
    return from_bytes(Path(path).read_bytes())
