"""Block-quantized matrices and the MXFP4 linear layer.

Forward ``Y = Q1(X) @ Q2(W^T)``.  The default backward re-quantizes the forward
tapes along the opposite axis (double quantization) with stochastic rounding:

    grad_X = Q3(G)   @ Q4(Q2(W^T)^T)
    grad_W = Q5(G^T) @ Q6(Q1(X))

``backward_microscaling`` instead quantizes the full-precision ``X`` and ``W``
for the backward matmuls, which is the biased baseline.  All matmuls run on
dequantized operands in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Union

import numpy as np

from . import kernels
from .codec import BLOCK_SIZE, MxBlock, MxScale, Rounding, ScaleRule, _as_finite
from .formats import E2M1, Fp4Format, get_format
from .rng import StreamKey, block_uniforms


class Axis(IntEnum):
    ROW_GROUPS = 0  # 1x32 groups, contiguous along a row
    COL_GROUPS = 1  # 32x1 groups, contiguous along a column


class AxisContractError(ValueError):
    """Operands violate the (1x32, 32x1) matmul orientation rule."""


class TapeMismatchError(ValueError):
    pass


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def to_groups(m: np.ndarray, axis: Axis) -> np.ndarray:
    """Zero-padded ``(n_blocks, 32)`` view of ``m`` in row-major group order."""
    rows, cols = m.shape
    if axis == Axis.ROW_GROUPS:
        nb = _ceil_div(cols, BLOCK_SIZE)
        padded = np.zeros((rows, nb * BLOCK_SIZE))
        padded[:, :cols] = m
        return padded.reshape(rows * nb, BLOCK_SIZE)
    nb = _ceil_div(rows, BLOCK_SIZE)
    padded = np.zeros((nb * BLOCK_SIZE, cols))
    padded[:rows] = m
    return np.ascontiguousarray(
        padded.reshape(nb, BLOCK_SIZE, cols).transpose(0, 2, 1)
    ).reshape(nb * cols, BLOCK_SIZE)


def from_groups(groups: np.ndarray, shape: tuple[int, int], axis: Axis) -> np.ndarray:
    rows, cols = shape
    if axis == Axis.ROW_GROUPS:
        nb = _ceil_div(cols, BLOCK_SIZE)
        return groups.reshape(rows, nb * BLOCK_SIZE)[:, :cols]
    nb = _ceil_div(rows, BLOCK_SIZE)
    full = groups.reshape(nb, cols, BLOCK_SIZE).transpose(0, 2, 1).reshape(nb * BLOCK_SIZE, cols)
    return full[:rows]


def group_lengths(shape: tuple[int, int], axis: Axis) -> np.ndarray:
    rows, cols = shape
    along, across = (cols, rows) if axis == Axis.ROW_GROUPS else (rows, cols)
    nb = _ceil_div(along, BLOCK_SIZE)
    per = np.full(nb, BLOCK_SIZE, dtype=np.int64)
    per[-1] = along - BLOCK_SIZE * (nb - 1)
    if axis == Axis.ROW_GROUPS:
        return np.tile(per, across)
    return np.repeat(per, across)


@dataclass(eq=False)
class QuantizedMatrix:
    shape: tuple[int, int]
    axis: Axis
    codes: np.ndarray  # (n_blocks, 32) uint8; padding slots hold the zero code
    exponents: np.ndarray  # (n_blocks,) int8
    fmt: Fp4Format = E2M1
    provenance: str = ""

    def __post_init__(self):
        rows, cols = self.shape
        along, across = (cols, rows) if self.axis == Axis.ROW_GROUPS else (rows, cols)
        expected = across * _ceil_div(along, BLOCK_SIZE)
        if self.codes.shape != (expected, BLOCK_SIZE) or self.exponents.shape != (expected,):
            raise ValueError(
                f"{self.axis.name} matrix of shape {self.shape} needs {expected} blocks, "
                f"got codes {self.codes.shape} and exponents {self.exponents.shape}"
            )

    @property
    def n_blocks(self) -> int:
        return self.codes.shape[0]

    def block(self, i: int) -> MxBlock:
        n = int(group_lengths(self.shape, self.axis)[i])
        return MxBlock(self.codes[i, :n], MxScale(int(self.exponents[i])), self.fmt)

    def dequantize(self) -> np.ndarray:
        return dequantize_matrix(self)

    def same_bits(self, other: "QuantizedMatrix") -> bool:
        return (
            self.shape == other.shape
            and self.axis == other.axis
            and self.fmt == other.fmt
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.exponents, other.exponents)
        )


def quantize_matrix(
    m,
    axis: Axis,
    scale_rule: ScaleRule = ScaleRule.TRUNCATION_FREE,
    rounding: Rounding = Rounding.DETERMINISTIC,
    rng: StreamKey | None = None,
    fmt: Fp4Format = E2M1,
    provenance: str = "",
) -> QuantizedMatrix:
    m = _as_finite(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    fmt = get_format(fmt)
    groups = to_groups(m, axis)
    uniforms = None
    if rounding is Rounding.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic rounding needs a StreamKey")
        uniforms = block_uniforms(rng, groups.shape[0])
    codes, exps = kernels.quantize_groups(
        groups, fmt.grid, fmt.code_of_index, fmt.e_max, scale_rule.kernel_id, uniforms
    )
    return QuantizedMatrix(m.shape, Axis(axis), codes, exps, fmt, provenance)


def dequantize_matrix(qm: QuantizedMatrix) -> np.ndarray:
    groups = kernels.dequantize_groups(qm.codes, qm.exponents, qm.fmt.decode_table)
    return np.ascontiguousarray(from_groups(groups, qm.shape, qm.axis))


def mx_matmul(a: QuantizedMatrix, b: QuantizedMatrix) -> np.ndarray:
    if not isinstance(a, QuantizedMatrix) or not isinstance(b, QuantizedMatrix):
        raise AxisContractError("mx_matmul takes two QuantizedMatrix operands")
    if a.axis != Axis.ROW_GROUPS or b.axis != Axis.COL_GROUPS:
        raise AxisContractError(
            f"left operand must use 1x32 groups and right 32x1, got {a.axis.name} x {b.axis.name}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return dequantize_matrix(a) @ dequantize_matrix(b)


# -- linear layer ----------------------------------------------------------

Operand = Union[QuantizedMatrix, np.ndarray]


def _dense(op: Operand) -> np.ndarray:
    return dequantize_matrix(op) if isinstance(op, QuantizedMatrix) else op


def _matmul(a: Operand, b: Operand) -> np.ndarray:
    if isinstance(a, QuantizedMatrix) and isinstance(b, QuantizedMatrix):
        return mx_matmul(a, b)
    if isinstance(a, QuantizedMatrix) and a.axis != Axis.ROW_GROUPS:
        raise AxisContractError("left operand must use 1x32 groups")
    if isinstance(b, QuantizedMatrix) and b.axis != Axis.COL_GROUPS:
        raise AxisContractError("right operand must use 32x1 groups")
    return _dense(a) @ _dense(b)


@dataclass(frozen=True)
class QuantizerMask:
    """Enable flags for Q1..Q6; a disabled quantizer is the identity."""

    q1: bool = True
    q2: bool = True
    q3: bool = True
    q4: bool = True
    q5: bool = True
    q6: bool = True

    @classmethod
    def all_on(cls) -> "QuantizerMask":
        return cls()

    @classmethod
    def all_off(cls) -> "QuantizerMask":
        return cls(False, False, False, False, False, False)

    @classmethod
    def only(cls, *indices: int) -> "QuantizerMask":
        return cls(*(i in indices for i in range(1, 7)))

    @classmethod
    def from_string(cls, text: str) -> "QuantizerMask":
        """``"all"``, ``"none"`` or a comma list such as ``"1,2"``."""
        text = text.strip().lower()
        if text in ("all", "on", ""):
            return cls.all_on()
        if text in ("none", "off"):
            return cls.all_off()
        return cls.only(*(int(t) for t in text.split(",")))

    def __getitem__(self, i: int) -> bool:
        return (self.q1, self.q2, self.q3, self.q4, self.q5, self.q6)[i - 1]

    def __str__(self):
        on = [str(i) for i in range(1, 7) if self[i]]
        if len(on) == 6:
            return "all"
        return ",".join(on) if on else "none"

    @property
    def gradient_quantizers_off(self) -> bool:
        return not (self.q3 or self.q4 or self.q5 or self.q6)


class GradPath(IntEnum):
    DOUBLE_QUANTIZATION = 0
    MICROSCALING = 1


@dataclass(frozen=True)
class LinearQuantConfig:
    fmt: Fp4Format = E2M1  # forward operands (activations and weights)
    grad_fmt: Fp4Format = E2M1  # backward operands
    scale_rule: ScaleRule = ScaleRule.TRUNCATION_FREE
    backward_rounding: Rounding = Rounding.STOCHASTIC
    grad_path: GradPath = GradPath.DOUBLE_QUANTIZATION

    @classmethod
    def microscaling(cls, **kw) -> "LinearQuantConfig":
        base = dict(
            scale_rule=ScaleRule.MICROSCALING,
            backward_rounding=Rounding.DETERMINISTIC,
            grad_path=GradPath.MICROSCALING,
        )
        base.update(kw)
        return cls(**base)


DEFAULT_CONFIG = LinearQuantConfig()


@dataclass
class LinearLayerTapes:
    """Forward operands kept for backward: ``Q1(X)`` (N x D) and ``Q2(W^T)`` (D x C)."""

    x_q: Operand
    wt_q: Operand
    mask: QuantizerMask
    layer_id: int = 0
    step: int = 0
    # full-precision inputs, only kept for the Microscaling gradient path
    x: np.ndarray | None = field(default=None, repr=False)
    w: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.x_q.shape[0]

    @property
    def c(self) -> int:
        return self.wt_q.shape[1]


def _tensor_id(layer_id: int, quantizer: int) -> int:
    return layer_id * 8 + quantizer


def forward(
    x,
    w,
    mask: QuantizerMask = QuantizerMask(),
    cfg: LinearQuantConfig = DEFAULT_CONFIG,
    *,
    w_ema=None,
    layer_id: int = 0,
    step: int = 0,
) -> tuple[np.ndarray, LinearLayerTapes]:
    """``Y = Q1(X) @ Q2(W^T)``; ``w_ema`` switches Q2 to the EMA quantizer."""
    x = _as_finite(x)
    w = _as_finite(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"expected X (N x D) and W (C x D), got {x.shape} and {w.shape}")
    x_q: Operand = x
    wt_q: Operand = np.ascontiguousarray(w.T)
    if mask.q1:
        x_q = quantize_matrix(x, Axis.ROW_GROUPS, cfg.scale_rule, fmt=cfg.fmt, provenance="Q1")
    if mask.q2:
        if w_ema is not None:
            from .q_ema import quantize_matrix_ema

            wt_q = quantize_matrix_ema(wt_q, np.asarray(w_ema, dtype=np.float64).T, Axis.COL_GROUPS, cfg.fmt)
        else:
            wt_q = quantize_matrix(wt_q, Axis.COL_GROUPS, cfg.scale_rule, fmt=cfg.fmt, provenance="Q2")
    keep_masters = cfg.grad_path == GradPath.MICROSCALING
    tapes = LinearLayerTapes(
        x_q, wt_q, mask, layer_id, step,
        x=x if keep_masters else None,
        w=w if keep_masters else None,
    )
    return _matmul(x_q, wt_q), tapes


def _check_grad(grad_y, tapes: LinearLayerTapes) -> np.ndarray:
    g = _as_finite(grad_y)
    if g.shape != (tapes.n, tapes.c):
        raise TapeMismatchError(f"grad_y has shape {g.shape}, tapes expect {(tapes.n, tapes.c)}")
    return g


def _grad_quantizer(cfg: LinearQuantConfig, key: StreamKey | None, layer_id: int):
    stochastic = cfg.backward_rounding is Rounding.STOCHASTIC
    if stochastic and key is None:
        raise ValueError("stochastic backward quantizers need a StreamKey")

    def q(m: np.ndarray, axis: Axis, index: int) -> QuantizedMatrix:
        sub = key.child(_tensor_id(layer_id, index)) if stochastic else None
        return quantize_matrix(
            m, axis, cfg.scale_rule, cfg.backward_rounding, sub, cfg.grad_fmt, provenance=f"Q{index}"
        )

    return q


def backward(
    grad_y,
    tapes: LinearLayerTapes,
    cfg: LinearQuantConfig = DEFAULT_CONFIG,
    key: StreamKey | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch on ``cfg.grad_path``."""
    if cfg.grad_path == GradPath.MICROSCALING:
        if tapes.x is None or tapes.w is None:
            raise TapeMismatchError("tapes were recorded without full-precision inputs")
        return backward_microscaling(grad_y, tapes.x, tapes.w, tapes.mask, cfg, key, tapes.layer_id)
    return backward_tetrajet(grad_y, tapes, cfg, key)


def backward_tetrajet(
    grad_y,
    tapes: LinearLayerTapes,
    cfg: LinearQuantConfig = DEFAULT_CONFIG,
    key: StreamKey | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(tapes, LinearLayerTapes):
        raise TapeMismatchError("backward needs the tapes returned by forward()")
    g = _check_grad(grad_y, tapes)
    if key is not None and key.step != tapes.step:
        raise TapeMismatchError(f"tapes are from step {tapes.step}, backward called for step {key.step}")
    mask = tapes.mask
    q = None
    if not mask.gradient_quantizers_off:
        q = _grad_quantizer(cfg, key, tapes.layer_id)
    w_fwd = np.ascontiguousarray(_dense(tapes.wt_q).T)  # C x D, already on the forward grid
    x_fwd = _dense(tapes.x_q)  # N x D

    a3: Operand = q(g, Axis.ROW_GROUPS, 3) if mask.q3 else g
    b4: Operand = q(w_fwd, Axis.COL_GROUPS, 4) if mask.q4 else w_fwd
    a5: Operand = np.ascontiguousarray(g.T)
    if mask.q5:
        a5 = q(a5, Axis.ROW_GROUPS, 5)
    b6: Operand = q(x_fwd, Axis.COL_GROUPS, 6) if mask.q6 else x_fwd
    return _matmul(a3, b4), _matmul(a5, b6)


def backward_microscaling(
    grad_y,
    x,
    w,
    mask: QuantizerMask = QuantizerMask(),
    cfg: LinearQuantConfig | None = None,
    key: StreamKey | None = None,
    layer_id: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward with Q4/Q6 applied to the full-precision ``W`` and ``X``.

    Deterministic rounding unless ``cfg`` says otherwise (ablation use).
    """
    cfg = cfg or LinearQuantConfig.microscaling()
    x = _as_finite(x)
    w = _as_finite(w)
    g = _as_finite(grad_y)
    if g.shape != (x.shape[0], w.shape[0]) or x.shape[1] != w.shape[1]:
        raise ValueError(f"shape mismatch: grad_y {g.shape}, X {x.shape}, W {w.shape}")
    q = None
    if not mask.gradient_quantizers_off:
        q = _grad_quantizer(cfg, key, layer_id)
    a3: Operand = q(g, Axis.ROW_GROUPS, 3) if mask.q3 else g
    b4: Operand = q(w, Axis.COL_GROUPS, 4) if mask.q4 else w
    a5: Operand = np.ascontiguousarray(g.T)
    if mask.q5:
        a5 = q(a5, Axis.ROW_GROUPS, 5)
    b6: Operand = q(x, Axis.COL_GROUPS, 6) if mask.q6 else x
    return _matmul(a3, b4), _matmul(a5, b6)


def ste_reference_grad(grad_y, tapes: LinearLayerTapes) -> tuple[np.ndarray, np.ndarray]:
    """Exact straight-through gradients w.r.t. the forward operands, no gradient quantization."""
    g = _check_grad(grad_y, tapes)
    w_fwd = np.ascontiguousarray(_dense(tapes.wt_q).T)
    x_fwd = _dense(tapes.x_q)
    return g @ w_fwd, np.ascontiguousarray(g.T) @ x_fwd


def with_config(cfg: LinearQuantConfig, **changes) -> LinearQuantConfig:
    return replace(cfg, **changes)
