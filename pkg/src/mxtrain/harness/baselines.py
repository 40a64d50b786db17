"""Oscillation baselines from prior work: Dampen (pull toward the quantized value) and Freeze."""

from __future__ import annotations

import numpy as np


def dampen_penalty(w, wq, lam: float) -> tuple[float, np.ndarray]:
    """``lam * sum((w - wq)**2)`` and its gradient in ``w`` with ``wq`` held constant."""
    w = np.asarray(w, dtype=np.float64)
    wq = np.asarray(wq, dtype=np.float64)
    if w.shape != wq.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {wq.shape}")
    d = w - wq
    return float(lam * np.sum(d * d)), 2.0 * lam * d


def freeze_baseline(f, f_th: float, running_avg, frozen=None) -> tuple[np.ndarray, np.ndarray]:
    """Mask of elements to freeze (``f > f_th``, sticky) and the values they are pinned to."""
    f = np.asarray(f, dtype=np.float64)
    mask = f > f_th
    if frozen is not None:
        mask |= np.asarray(frozen, dtype=bool)
    return mask, np.asarray(running_avg, dtype=np.float64)


def freeze_warmup_steps(total_steps: int, warmup_frac: float) -> int:
    return int(np.ceil(total_steps * warmup_frac))


def flips_to_freeze(momentum: float, f_th: float) -> float:
    """Steps of continuous flipping before the flip-frequency EMA (from 0) exceeds ``f_th``."""
    if f_th >= 1.0:
        return float("inf")
    if f_th < 0.0:
        return 1.0
    # 1 - m**t > f_th  <=>  t > log(1 - f_th) / log(m)
    return float(np.floor(np.log1p(-f_th) / np.log(momentum)) + 1)
