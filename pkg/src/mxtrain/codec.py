"""MX block codec: shared-scale computation, FP4 rounding, encode/decode, wire format.

Scalar helpers (``bracket``, ``round_deterministic``, ``round_stochastic``)
mirror the definitions element by element and serve as the readable reference.
The block paths go through the vectorised kernels in :mod:`mxtrain.kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .formats import E2M1, Fp4Format, get_format
from .rng import StreamKey, block_uniforms

BLOCK_SIZE = 32
SCALE_EPS = 1e-8
S_MIN, S_MAX = -127, 127
BLOCK_NBYTES = 17


class ScaleRule(Enum):
    TRUNCATION_FREE = "truncation_free"
    MICROSCALING = "microscaling"

    @property
    def kernel_id(self) -> int:
        if self is ScaleRule.TRUNCATION_FREE:
            return kernels.RULE_TRUNCATION_FREE
        return kernels.RULE_MICROSCALING


class Rounding(Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


class QuantRangeError(ValueError):
    """A scaled value fell outside ``[Qn, Qp]`` where the caller promised it would not."""


class InvalidInputError(ValueError):
    pass


class WireFormatError(ValueError):
    pass


def _as_finite(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("block contains non-finite values")
    return arr


@dataclass(frozen=True)
class MxScale:
    """Shared power-of-two block scale ``2**s``."""

    s: int

    def __post_init__(self):
        if not S_MIN <= self.s <= S_MAX:
            raise ValueError(f"scale exponent {self.s} outside [{S_MIN}, {S_MAX}]")

    @property
    def value(self) -> float:
        return math.ldexp(1.0, self.s)


def _clamp_exponent(s: int) -> int:
    return max(S_MIN, min(S_MAX, s))


def compute_scale_truncation_free(values, fmt: Fp4Format = E2M1) -> MxScale:
    """Smallest ``s`` with ``max|v| <= Qp * 2**s`` (``ceil(log2(2M / (Qp - Qn)))``)."""
    arr = _as_finite(values)
    if arr.size == 0:
        raise InvalidInputError("empty block")
    m = float(np.max(np.abs(arr))) or SCALE_EPS
    # log2 gives a guess; exact comparisons against Qp * 2**s settle it
    s = math.ceil(math.log2(m / fmt.q_pos))
    if m > math.ldexp(fmt.q_pos, s):
        s += 1
    if m <= math.ldexp(fmt.q_pos, s - 1):
        s -= 1
    return MxScale(_clamp_exponent(s))


def compute_scale_microscaling(values, fmt: Fp4Format = E2M1) -> MxScale:
    """``floor(log2 M) - e_max``; scaled values may exceed ``Qp``."""
    arr = _as_finite(values)
    if arr.size == 0:
        raise InvalidInputError("empty block")
    m = float(np.max(np.abs(arr))) or SCALE_EPS
    _, e = math.frexp(m)
    return MxScale(_clamp_exponent(e - 1 - fmt.e_max))


def compute_scale(values, fmt: Fp4Format, rule: ScaleRule) -> MxScale:
    if rule is ScaleRule.TRUNCATION_FREE:
        return compute_scale_truncation_free(values, fmt)
    return compute_scale_microscaling(values, fmt)


def bracket(x: float, fmt: Fp4Format = E2M1) -> tuple[float, float]:
    if not fmt.q_neg <= x <= fmt.q_pos:
        raise QuantRangeError(f"{x!r} outside [{fmt.q_neg}, {fmt.q_pos}]")
    grid = fmt.grid
    i = int(np.searchsorted(grid, x, side="right")) - 1
    if grid[i] == x:
        return float(x), float(x)
    return float(grid[i]), float(grid[i + 1])


def round_deterministic(x: float, fmt: Fp4Format = E2M1) -> float:
    if not math.isfinite(x):
        raise InvalidInputError(f"non-finite value {x!r}")
    x = min(max(x, fmt.q_neg), fmt.q_pos)
    q1, q2 = bracket(x, fmt)
    return q1 if abs(x - q1) < abs(x - q2) else q2


def round_stochastic(x: float, fmt: Fp4Format = E2M1, rng: np.random.Generator | None = None) -> float:
    if rng is None:
        raise ValueError("stochastic rounding needs an explicit random stream")
    q1, q2 = bracket(x, fmt)
    xi = (rng.random() - 0.5) * (q2 - q1)
    return q1 if x + xi < (q1 + q2) / 2 else q2


@dataclass(frozen=True, eq=False)
class MxBlock:
    codes: np.ndarray  # uint8, one 4-bit code per element
    scale: MxScale
    fmt: Fp4Format = E2M1

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if not 1 <= codes.size <= BLOCK_SIZE or codes.ndim != 1:
            raise ValueError(f"a block holds 1..{BLOCK_SIZE} codes, got shape {codes.shape}")
        if np.any(codes > 15):
            raise ValueError("codes must fit in 4 bits")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    def __len__(self):
        return int(self.codes.size)

    def __eq__(self, other):
        if not isinstance(other, MxBlock):
            return NotImplemented
        return (
            self.fmt == other.fmt
            and self.scale == other.scale
            and np.array_equal(self.codes, other.codes)
        )

    @property
    def values(self) -> np.ndarray:
        """Decoded grid values before scaling."""
        return self.fmt.decode_table[self.codes]


def quantize_block(
    values,
    fmt: Fp4Format = E2M1,
    scale_rule: ScaleRule = ScaleRule.TRUNCATION_FREE,
    rounding: Rounding = Rounding.DETERMINISTIC,
    rng: StreamKey | None = None,
    block_index: int = 0,
) -> MxBlock:
    """Quantize up to 32 values to one MX block.

    Stochastic rounding draws from block ``block_index`` of the substream
    ``rng``.  Under Microscaling scaling, values beyond ``Qp`` are clamped
    before rounding in both modes.
    """
    arr = _as_finite(values).ravel()
    if not 1 <= arr.size <= BLOCK_SIZE:
        raise InvalidInputError(f"block must hold 1..{BLOCK_SIZE} values, got {arr.size}")
    fmt = get_format(fmt)
    padded = np.zeros((1, BLOCK_SIZE))
    padded[0, : arr.size] = arr
    uniforms = None
    if rounding is Rounding.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic rounding needs a StreamKey")
        uniforms = block_uniforms(rng, 1, first_block=block_index)
    codes, exps = kernels.quantize_groups(
        padded, fmt.grid, fmt.code_of_index, fmt.e_max, scale_rule.kernel_id, uniforms
    )
    return MxBlock(codes[0, : arr.size], MxScale(int(exps[0])), fmt)


def dequantize_block(block: MxBlock) -> np.ndarray:
    return np.ldexp(block.values, block.scale.s)


def serialize_block(block: MxBlock) -> bytes:
    """17 bytes: 16 bytes of nibble-packed codes (low nibble = even index), then ``s``."""
    codes = np.zeros(BLOCK_SIZE, dtype=np.uint8)
    codes[: len(block)] = block.codes
    packed = codes[0::2] | (codes[1::2] << 4)
    return packed.tobytes() + int(block.scale.s).to_bytes(1, "little", signed=True)


def deserialize_block(buf: bytes, length: int = BLOCK_SIZE, fmt: Fp4Format = E2M1) -> MxBlock:
    if len(buf) < BLOCK_NBYTES:
        raise WireFormatError(f"need {BLOCK_NBYTES} bytes for a block, got {len(buf)}")
    packed = np.frombuffer(buf[:16], dtype=np.uint8)
    codes = np.empty(BLOCK_SIZE, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    s = int.from_bytes(buf[16:17], "little", signed=True)
    if not S_MIN <= s <= S_MAX:
        raise WireFormatError(f"scale exponent {s} outside [{S_MIN}, {S_MAX}]")
    return MxBlock(codes[:length], MxScale(s), get_format(fmt))
