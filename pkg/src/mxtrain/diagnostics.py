"""Oscillation and instability statistics for quantized training.

* oscillation ratio ``R_w = dist_Q / dist_W`` over a window of steps
* quantization confidence of latent weights ``w / S``
* rate of change ``r(X)``, the windowed mean relative Frobenius step
* EMA flip frequency (used by the Freeze baseline)

All trackers only read the tensors handed to them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .formats import E2M1, Fp4Format

log = logging.getLogger(__name__)

OSCILLATION_THRESHOLD = 16.0
T0_TRAINING = 30
T0_VALIDATION = 200
HIST_BINS = 50


class TrajectoryTracker:
    """Per-element path lengths of master and quantized weights."""

    def __init__(self, w0, wq0, t0: int = T0_TRAINING):
        self.t0 = t0
        self.reset(w0, wq0)

    def reset(self, w0, wq0):
        w0 = np.array(w0, dtype=np.float64)
        wq0 = np.array(wq0, dtype=np.float64)
        if w0.shape != wq0.shape:
            raise ValueError(f"shape mismatch: {w0.shape} vs {wq0.shape}")
        self.prev_w, self.prev_q = w0, wq0
        self.dist_w = np.zeros_like(w0)
        self.dist_q = np.zeros_like(w0)
        self.steps = 0

    def update(self, w_t, wq_t) -> "TrajectoryTracker":
        w_t = np.asarray(w_t, dtype=np.float64)
        wq_t = np.asarray(wq_t, dtype=np.float64)
        if w_t.shape != self.prev_w.shape or wq_t.shape != self.prev_q.shape:
            raise ValueError(f"expected shape {self.prev_w.shape}, got {w_t.shape} / {wq_t.shape}")
        self.dist_w += np.abs(w_t - self.prev_w)
        self.dist_q += np.abs(wq_t - self.prev_q)
        self.prev_w = w_t.copy()
        self.prev_q = wq_t.copy()
        self.steps += 1
        return self

    @property
    def complete(self) -> bool:
        return self.steps >= self.t0


def update_trajectory(tracker: TrajectoryTracker, w_t, wq_t) -> TrajectoryTracker:
    return tracker.update(w_t, wq_t)


def ratio_from_distances(dist_q, dist_w) -> np.ndarray:
    """``dist_q / dist_w``; 0 where neither moved, +inf where only the quantized value moved."""
    dist_q = np.asarray(dist_q, dtype=np.float64)
    dist_w = np.asarray(dist_w, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = dist_q / dist_w
    r = np.where(dist_w == 0, np.where(dist_q == 0, 0.0, np.inf), r)
    return r


def oscillation_ratio(tracker: TrajectoryTracker) -> np.ndarray:
    if not tracker.complete:
        raise ValueError(f"window incomplete: {tracker.steps} of {tracker.t0} steps recorded")
    return ratio_from_distances(tracker.dist_q, tracker.dist_w)


def classify_oscillating(ratios, threshold: float = OSCILLATION_THRESHOLD) -> tuple[np.ndarray, float]:
    ratios = np.asarray(ratios, dtype=np.float64)
    mask = ratios > threshold
    frac = float(mask.mean()) if mask.size else 0.0
    return mask, frac


def _cells(fmt: Fp4Format):
    """Lower/upper edge of each grid value's rounding cell and its MaxDist."""
    thr = fmt.thresholds
    lo = np.concatenate([[fmt.q_neg], thr])
    hi = np.concatenate([thr, [fmt.q_pos]])
    max_dist = (hi - lo) / 2
    # the end cells have a threshold on one side only
    max_dist[0] = hi[0] - lo[0]
    max_dist[-1] = hi[-1] - lo[-1]
    return lo, hi, max_dist


def quant_confidence(latent, fmt: Fp4Format = E2M1) -> np.ndarray:
    """Distance to the nearest threshold, normalised by the largest such distance in the cell."""
    x = np.asarray(latent, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < fmt.q_neg) or np.any(x > fmt.q_pos):
        raise ValueError(f"latent weights must lie in [{fmt.q_neg}, {fmt.q_pos}]")
    thr = fmt.thresholds
    # cell index = grid index of the round-to-nearest value (ties go up)
    cell = np.searchsorted(thr, x, side="right")
    _, _, max_dist = _cells(fmt)
    j = np.clip(np.searchsorted(thr, x), 0, len(thr) - 1)
    nearest = np.abs(x - thr[j])
    j_lo = np.clip(j - 1, 0, len(thr) - 1)
    nearest = np.minimum(nearest, np.abs(x - thr[j_lo]))
    return nearest / max_dist[cell]


@dataclass
class ConfidenceReport:
    confidence: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, HIST_BINS + 1))
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.counts is None:
            self.counts, _ = np.histogram(self.confidence, bins=self.edges)

    @classmethod
    def from_latent(cls, latent, fmt: Fp4Format = E2M1) -> "ConfidenceReport":
        return cls(quant_confidence(latent, fmt))


class ChangeRateAccumulator:
    """Running mean of ``||X_t - X_{t-1}||_F / ||X_{t-1}||_F``."""

    def __init__(self):
        self.prev: np.ndarray | None = None
        self.total = 0.0
        self.count = 0
        self.skipped = 0

    def record(self, x) -> None:
        x = np.array(x, dtype=np.float64)
        if self.prev is not None:
            if x.shape != self.prev.shape:
                raise ValueError(f"shape changed from {self.prev.shape} to {x.shape}")
            denom = float(np.linalg.norm(self.prev))
            if denom == 0.0:
                self.skipped += 1
                log.warning("rate of change: zero-norm predecessor, step skipped")
            else:
                self.total += float(np.linalg.norm(x - self.prev)) / denom
                self.count += 1
        self.prev = x

    def reset(self) -> None:
        self.__init__()


def rate_of_change(acc: ChangeRateAccumulator) -> float:
    if acc.count == 0:
        raise ValueError("rate of change undefined: no step recorded")
    return acc.total / acc.count


def flip_frequency(flip_history, momentum: float, f0=0.0) -> np.ndarray:
    """EMA of per-element flip indicators; ``flip_history`` has time on axis 0."""
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
    flips = np.asarray(flip_history, dtype=np.float64)
    f = np.broadcast_to(np.asarray(f0, dtype=np.float64), flips.shape[1:]).copy()
    for row in flips:
        f = momentum * f + (1.0 - momentum) * row
    return f


class FlipTracker:
    """Streaming form of :func:`flip_frequency` over quantized snapshots."""

    def __init__(self, wq0, momentum: float):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.momentum = momentum
        self.prev = np.array(wq0, dtype=np.float64)
        self.f = np.zeros_like(self.prev)

    def update(self, wq_t) -> np.ndarray:
        wq_t = np.asarray(wq_t, dtype=np.float64)
        flips = (wq_t != self.prev).astype(np.float64)
        self.f = self.momentum * self.f + (1.0 - self.momentum) * flips
        self.prev = wq_t.copy()
        return flips


def metric_record(step: int, metric: str, tensor: str, value=None, histogram=None) -> dict:
    """One JSON-lines diagnostic record."""
    rec = {"step": int(step), "metric": metric, "tensor": tensor}
    if histogram is not None:
        counts, edges = histogram
        rec["histogram"] = {"counts": [int(c) for c in counts], "edges": [float(e) for e in edges]}
    else:
        v = float(value)
        rec["value"] = v if math.isfinite(v) else str(v)
    return rec
