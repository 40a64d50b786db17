"""Pure-numpy block kernels.

Every routine here has a twin in ``_kernels.pyx``; the two must agree bit for
bit, so both use the same sequence of IEEE double operations.  Scaling by
``2**-s`` is a multiplication by an exact power of two, which rounds the same
way ``ldexp`` does.

Groups are passed as a ``(n_groups, 32)`` float64 array.  Ragged groups are
zero padded by the caller; zeros never change a block maximum or round away
from zero, so padding is inert.
"""

import numpy as np

RULE_TRUNCATION_FREE = 0
RULE_MICROSCALING = 1

SCALE_EPS = 1e-8
S_MIN, S_MAX = -127, 127


def scale_exponents(groups, q_pos, e_max, rule):
    """Per-group shared exponent ``s`` as int32."""
    m = np.max(np.abs(groups), axis=1)
    m = np.where(m == 0.0, SCALE_EPS, m)
    if rule == RULE_TRUNCATION_FREE:
        # smallest s with m <= q_pos * 2**s, i.e. ceil(log2(m / q_pos)) exactly
        est = np.clip(np.ceil(np.log2(m) - np.log2(q_pos)), S_MIN - 2, S_MAX + 2)
        s = est.astype(np.int64)
        s = np.where(m > np.ldexp(q_pos, s), s + 1, s)
        s = np.where(m <= np.ldexp(q_pos, s - 1), s - 1, s)
    elif rule == RULE_MICROSCALING:
        _, e = np.frexp(m)
        s = e.astype(np.int64) - 1 - e_max
    else:
        raise ValueError(f"unknown scale rule {rule}")
    return np.clip(s, S_MIN, S_MAX).astype(np.int32)


def _bracket_indices(x, grid):
    top = len(grid) - 1
    i1 = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, top)
    on_grid = grid[i1] == x
    i2 = np.where(on_grid, i1, np.minimum(i1 + 1, top))
    return i1, i2


def quantize_groups(groups, grid, code_of_index, e_max, rule, uniforms=None):
    """Quantize each row of ``groups`` to one MX block.

    Returns ``(codes uint8 (n, 32), exponents int8 (n,))``.  Deterministic
    round-to-nearest (ties to the upper neighbour) when ``uniforms`` is None,
    otherwise stochastic rounding driven by the given U[0, 1) draws.
    """
    groups = np.ascontiguousarray(groups, dtype=np.float64)
    q_pos = grid[-1]
    s = scale_exponents(groups, q_pos, e_max, rule)
    inv = np.ldexp(1.0, -s)[:, None]
    x = np.clip(groups * inv, -q_pos, q_pos)
    i1, i2 = _bracket_indices(x, grid)
    q1 = grid[i1]
    q2 = grid[i2]
    if uniforms is None:
        pick_low = np.abs(x - q1) < np.abs(x - q2)
    else:
        d = q2 - q1
        xi = (uniforms - 0.5) * d
        pick_low = x + xi < (q1 + q2) / 2
    idx = np.where(pick_low, i1, i2)
    return code_of_index[idx], s.astype(np.int8)


def quantize_groups_ema(groups, ema_groups, grid, code_of_index, e_max):
    """Truncation-free scale from ``groups``; candidate pick by EMA proximity."""
    groups = np.ascontiguousarray(groups, dtype=np.float64)
    q_pos = grid[-1]
    s = scale_exponents(groups, q_pos, e_max, RULE_TRUNCATION_FREE)
    inv = np.ldexp(1.0, -s)[:, None]
    x = np.clip(groups * inv, -q_pos, q_pos)
    e = np.asarray(ema_groups, dtype=np.float64) * inv
    i1, i2 = _bracket_indices(x, grid)
    pick_low = np.abs(e - grid[i1]) < np.abs(e - grid[i2])
    idx = np.where(pick_low, i1, i2)
    return code_of_index[idx], s.astype(np.int8)


def dequantize_groups(codes, exponents, decode_table):
    return decode_table[codes] * np.ldexp(1.0, exponents.astype(np.int32))[:, None]
