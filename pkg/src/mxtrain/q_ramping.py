"""Adaptive ramping optimizer.

Every ``t_update`` steps a short calibration window of ``t0`` ordinary steps
measures each quantized weight element's oscillation ratio ``R_w``.  Elements
then get an amplification ``N_w = min(k2 * floor(R_w / k1) + 1, n_max)``: they
accumulate gradients over ``N_w`` steps and apply one AdamW update with the
mean gradient at learning rate ``N_w * lr``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Iterator, Protocol

import numpy as np
import torch

from .diagnostics import TrajectoryTracker, classify_oscillating, oscillation_ratio


class RampingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RampingConfig:
    k1: float = 16.0
    k2: int = 5
    n_max: int = 10
    t0: int = 30
    t_update: int = 1000

    def __post_init__(self):
        problems = []
        if not self.k1 > 0:
            problems.append("k1 must be > 0")
        if int(self.k2) != self.k2 or self.k2 < 1:
            problems.append("k2 must be an integer >= 1")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            problems.append("n_max must be an integer >= 1")
        if self.t0 < 1:
            problems.append("t0 must be >= 1")
        if self.t0 >= self.t_update:
            problems.append("t0 must be smaller than t_update")
        if problems:
            raise RampingConfigError("optimizer.qramping: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def amplification(ratios, cfg: RampingConfig) -> np.ndarray:
    """Integer ``N_w`` per element; ``R_w = inf`` maps to ``n_max``."""
    r = np.asarray(ratios, dtype=np.float64)
    steps = np.floor(np.where(np.isfinite(r), r, 0.0) / cfg.k1)
    n = np.minimum(cfg.k2 * steps + 1, cfg.n_max)
    n = np.where(np.isfinite(r), n, cfg.n_max)
    return n.astype(np.int64)


class _BiasCorrection:
    """``1 - beta**t`` in double precision, cached per step count."""

    def __init__(self, beta: float):
        self.beta = beta
        self.values = [0.0]

    def __call__(self, t: int) -> float:
        while len(self.values) <= t:
            self.values.append(1.0 - self.beta ** len(self.values))
        return self.values[t]

    def table(self, t_max: int, dtype) -> torch.Tensor:
        self(t_max)
        return torch.tensor(self.values[: t_max + 1], dtype=dtype)


class AdamW(torch.optim.Optimizer):
    """Decoupled-weight-decay Adam written with plain elementwise ops.

    Supports permanently frozen elements (Freeze baseline): they keep their
    pinned value and their moments stop advancing.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        self._bc = {}

    def _bias(self, beta: float) -> _BiasCorrection:
        if beta not in self._bc:
            self._bc[beta] = _BiasCorrection(beta)
        return self._bc[beta]

    @staticmethod
    def _scalars(group, dtype):
        b1, b2 = group["betas"]
        t = lambda x: torch.tensor(x, dtype=dtype)
        return t(group["lr"]), t(b1), t(1.0 - b1), t(b2), t(1.0 - b2), t(group["eps"]), t(group["weight_decay"])

    def _init_state(self, p):
        state = self.state[p]
        if not state:
            state["step"] = 0
            state["m"] = torch.zeros_like(p)
            state["v"] = torch.zeros_like(p)
        return state

    def freeze(self, p: torch.Tensor, mask: torch.Tensor, values: torch.Tensor) -> None:
        """Pin ``p[mask]`` to ``values[mask]`` and exclude those elements from updates for good."""
        state = self._init_state(p)
        frozen = state.get("frozen")
        new = mask & ~frozen if frozen is not None else mask
        with torch.no_grad():
            p.copy_(torch.where(new, values.to(p.dtype), p))
        state["frozen"] = new if frozen is None else (frozen | new)

    def frozen_mask(self, p) -> torch.Tensor | None:
        return self.state[p].get("frozen") if p in self.state else None

    @torch.no_grad()
    def step(self, closure: Callable | None = None):
        loss = None if closure is None else closure()
        for group in self.param_groups:
            lr, b1, c1, b2, c2, eps, wd = None, None, None, None, None, None, None
            for p in group["params"]:
                if p.grad is None:
                    continue
                if lr is None:
                    lr, b1, c1, b2, c2, eps, wd = self._scalars(group, p.dtype)
                state = self._init_state(p)
                self._update(p, p.grad, state, group, (lr, b1, c1, b2, c2, eps, wd))
        return loss

    def _update(self, p, g, state, group, scalars):
        lr, b1, c1, b2, c2, eps, wd = scalars
        t = state["step"] + 1
        m = state["m"] * b1 + g * c1
        v = state["v"] * b2 + (g * g) * c2
        bc1 = torch.tensor(self._bias(group["betas"][0])(t), dtype=p.dtype)
        bc2 = torch.tensor(self._bias(group["betas"][1])(t), dtype=p.dtype)
        new = p - p * (lr * wd)
        new = new - lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)
        frozen = state.get("frozen")
        if frozen is not None:
            new = torch.where(frozen, p, new)
            m = torch.where(frozen, state["m"], m)
            v = torch.where(frozen, state["v"], v)
        state["step"] = t
        state["m"], state["v"] = m, v
        p.copy_(new)


class RampingAdamW(AdamW):
    """AdamW with per-element gradient accumulation for amplified elements.

    Parameters without an amplification map follow the plain AdamW path.  An
    element with ``N_w = 1`` takes exactly the plain AdamW update.
    """

    def set_amplification(self, p: torch.Tensor, n) -> None:
        state = self._init_state(p)
        n = torch.as_tensor(np.asarray(n), dtype=torch.int64).reshape(p.shape)
        if torch.any(n < 1):
            raise ValueError("amplification factors must be >= 1")
        state["n"] = n
        state["t_elem"] = torch.full(p.shape, state["step"], dtype=torch.int64) if "t_elem" not in state else state["t_elem"]
        state["acc"] = torch.zeros_like(p)
        state["phase"] = torch.zeros(p.shape, dtype=torch.int64)

    def clear_amplification(self, p: torch.Tensor) -> None:
        """Back to plain updates; pending partial accumulations are dropped."""
        state = self.state.get(p)
        if not state or "n" not in state:
            return
        state["n"] = torch.ones(p.shape, dtype=torch.int64)
        state["acc"] = torch.zeros_like(p)
        state["phase"] = torch.zeros(p.shape, dtype=torch.int64)

    def amplification_of(self, p) -> torch.Tensor | None:
        return self.state[p].get("n") if p in self.state else None

    def _update(self, p, g, state, group, scalars):
        if "n" not in state:
            return super()._update(p, g, state, group, scalars)
        lr, b1, c1, b2, c2, eps, wd = scalars
        n_int = state["n"]
        n = n_int.to(p.dtype)
        acc = state["acc"] + g
        phase = state["phase"] + 1
        ready = phase >= n_int
        frozen = state.get("frozen")
        if frozen is not None:
            ready = ready & ~frozen
        g_eff = acc / n
        m = state["m"] * b1 + g_eff * c1
        v = state["v"] * b2 + (g_eff * g_eff) * c2
        t_new = state["t_elem"] + ready.to(torch.int64)
        t_max = int(t_new.max())
        bc1 = self._bias(group["betas"][0]).table(t_max, p.dtype)[t_new]
        bc2 = self._bias(group["betas"][1]).table(t_max, p.dtype)[t_new]
        lr_e = lr * n
        new = p - p * (lr_e * wd)
        new = new - lr_e * (m / bc1) / (torch.sqrt(v / bc2) + eps)
        p.copy_(torch.where(ready, new, p))
        state["m"] = torch.where(ready, m, state["m"])
        state["v"] = torch.where(ready, v, state["v"])
        state["t_elem"] = t_new
        state["acc"] = torch.where(ready, torch.zeros_like(acc), acc)
        state["phase"] = torch.where(ready, torch.zeros_like(phase), phase)
        state["step"] += 1


# -- training-loop integration ---------------------------------------------


class RampingTrainer(Protocol):
    """What the ramping schedule needs from a training engine."""

    optimizer: RampingAdamW

    def train_step(self, batch) -> float: ...

    def quantized_params(self) -> list[tuple[str, torch.nn.Parameter]]: ...

    def quantized_weight(self, name: str) -> np.ndarray: ...


@dataclass
class DetectionSummary:
    step: int
    ratios: dict[str, np.ndarray]
    amplification: dict[str, np.ndarray]
    oscillating_fraction: float

    def histogram(self, n_max: int) -> list[int]:
        counts = np.zeros(n_max + 1, dtype=np.int64)
        for n in self.amplification.values():
            counts += np.bincount(n.ravel(), minlength=n_max + 1)[: n_max + 1]
        return counts[1:].tolist()


def detect_oscillation(
    trainer: RampingTrainer, batches: Iterator, cfg: RampingConfig, step: int = 0
) -> DetectionSummary:
    """Run ``t0`` ordinary steps, measure ``R_w`` and install ``N_w`` per element.

    The calibration steps are real training steps: their updates stay applied.
    """
    if cfg.t0 < 1:
        raise RampingConfigError("t0 must be >= 1")
    opt = trainer.optimizer
    params = trainer.quantized_params()
    for _, p in params:
        opt.clear_amplification(p)
    trackers = {
        name: TrajectoryTracker(p.detach().double().numpy(), trainer.quantized_weight(name), cfg.t0)
        for name, p in params
    }
    for _ in range(cfg.t0):
        trainer.train_step(next(batches))
        for name, p in params:
            trackers[name].update(p.detach().double().numpy(), trainer.quantized_weight(name))
    ratios, amps, flags = {}, {}, []
    for name, p in params:
        r = oscillation_ratio(trackers[name])
        n = amplification(r, cfg)
        ratios[name], amps[name] = r, n
        flags.append(classify_oscillating(r, cfg.k1)[0].ravel())
        opt.set_amplification(p, n)
    frac = float(np.concatenate(flags).mean()) if flags else 0.0
    return DetectionSummary(step, ratios, amps, frac)


def training_with_qramping(
    trainer: RampingTrainer,
    batches: Iterator,
    total_steps: int,
    cfg: RampingConfig,
    on_detection: Callable[[DetectionSummary], None] | None = None,
):
    """Detection at steps 0, t_update, 2*t_update, ...; ramping updates in between.

    Calibration steps count toward ``total_steps``.
    """
    t = 0
    while t < total_steps:
        if t % cfg.t_update == 0:
            window = min(cfg.t0, total_steps - t)
            if window < cfg.t0:
                # not enough budget left for a full window: finish with plain steps
                for _, p in trainer.quantized_params():
                    trainer.optimizer.clear_amplification(p)
                for _ in range(window):
                    trainer.train_step(next(batches))
                t += window
                continue
            summary = detect_oscillation(trainer, batches, cfg, step=t)
            if on_detection is not None:
                on_detection(summary)
            t += cfg.t0
            continue
        trainer.train_step(next(batches))
        t += 1
    return trainer
