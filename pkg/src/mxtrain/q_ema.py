"""EMA weight quantizer.

The block scale and the two bracketing grid candidates come from the current
master weights; the candidate is then chosen by proximity to the moving average
of the masters (scaled by the same block scale).  A master that jitters across
a rounding threshold therefore keeps its quantized value as long as its
average stays on one side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .codec import BLOCK_SIZE, MxBlock, MxScale, _as_finite
from .formats import E2M1, Fp4Format, get_format
from .mx_linear import Axis, QuantizedMatrix, to_groups

DEFAULT_BETA = 0.998
BETA_SWEEP = (0.993, 0.995, 0.997, 0.998, 0.999, 0.9995)


@dataclass
class EmaState:
    w_ema: np.ndarray
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")

    @classmethod
    def init_from(cls, w, beta: float = DEFAULT_BETA) -> "EmaState":
        return cls(np.array(w, dtype=np.float64, copy=True), beta)


def update_ema(state: EmaState, w_t) -> EmaState:
    """In-place ``ema = beta * ema + (1 - beta) * w``; returns ``state``."""
    w_t = np.asarray(w_t, dtype=state.w_ema.dtype)
    if w_t.shape != state.w_ema.shape:
        raise ValueError(f"shape mismatch: EMA {state.w_ema.shape} vs weights {w_t.shape}")
    state.w_ema *= state.beta
    state.w_ema += (1.0 - state.beta) * w_t
    return state


def quantize_block_ema(w_block, ema_block, fmt: Fp4Format = E2M1) -> MxBlock:
    w = _as_finite(w_block).ravel()
    e = _as_finite(ema_block).ravel()
    if w.shape != e.shape or not 1 <= w.size <= BLOCK_SIZE:
        raise ValueError(f"need matching blocks of 1..{BLOCK_SIZE} values, got {w.shape} and {e.shape}")
    fmt = get_format(fmt)
    pw = np.zeros((1, BLOCK_SIZE))
    pe = np.zeros((1, BLOCK_SIZE))
    pw[0, : w.size] = w
    pe[0, : e.size] = e
    codes, exps = kernels.quantize_groups_ema(pw, pe, fmt.grid, fmt.code_of_index, fmt.e_max)
    return MxBlock(codes[0, : w.size], MxScale(int(exps[0])), fmt)


def quantize_matrix_ema(w, w_ema, axis: Axis, fmt: Fp4Format = E2M1) -> QuantizedMatrix:
    w = _as_finite(w)
    w_ema = _as_finite(w_ema)
    if w.shape != w_ema.shape:
        raise ValueError(f"shape mismatch: weights {w.shape} vs EMA {w_ema.shape}")
    fmt = get_format(fmt)
    codes, exps = kernels.quantize_groups_ema(
        to_groups(w, axis), to_groups(w_ema, axis), fmt.grid, fmt.code_of_index, fmt.e_max
    )
    return QuantizedMatrix(w.shape, Axis(axis), codes, exps, fmt, provenance="Q2-EMA")
