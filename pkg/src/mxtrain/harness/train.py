"""Training engine: loop, LR schedule, baselines, diagnostics windows, logs and checkpoints."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..codec import InvalidInputError
from ..diagnostics import (
    ChangeRateAccumulator,
    ConfidenceReport,
    FlipTracker,
    TrajectoryTracker,
    classify_oscillating,
    metric_record,
    oscillation_ratio,
    rate_of_change,
)
from ..q_ramping import AdamW, DetectionSummary, RampingAdamW, training_with_qramping
from .baselines import dampen_penalty, freeze_baseline, freeze_warmup_steps
from .config import TrainConfig, dump_config, loads_config
from .data import BatchStream, Dataset, load_dataset
from .model import QuantContext, build_model

CHECKPOINT_MAGIC = b"MXCK"
CHECKPOINT_VERSION = 1


class NumericAbort(RuntimeError):
    """Non-finite loss; ``snapshot`` holds the state at the time of the abort."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(ValueError):
    pass


class MetricLog:
    """Append-only JSON-lines writer; records are also kept in memory."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = open(self.path, "w") if self.path else None
        self._last_step = -1

    def emit(self, rec: dict) -> None:
        if rec["step"] < self._last_step:
            raise ValueError(f"log steps must not decrease: {rec['step']} after {self._last_step}")
        self._last_step = rec["step"]
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def select(self, metric: str, tensor: str | None = None) -> list[dict]:
        return [r for r in self.records if r["metric"] == metric and (tensor is None or r["tensor"] == tensor)]


class DiagnosticsWindow:
    """Observes ``length`` consecutive steps starting from the trainer's current state."""

    def __init__(self, trainer: "Trainer", length: int):
        self.length = length
        self.start = trainer.step
        self.traj, self.rate_w, self.rate_q = {}, {}, {}
        for name, layer in trainer.layers.items():
            w, wq = trainer.master(name), layer.quantized_weight()
            self.traj[name] = TrajectoryTracker(w, wq, length)
            self.rate_w[name] = ChangeRateAccumulator()
            self.rate_q[name] = ChangeRateAccumulator()
            self.rate_w[name].record(w)
            self.rate_q[name].record(wq)
        self.rate_y = ChangeRateAccumulator()
        self.rate_y.record(trainer.probe())
        self.summary: dict | None = None

    @property
    def done(self) -> bool:
        return self.summary is not None

    def observe(self, trainer: "Trainer") -> None:
        for name, layer in trainer.layers.items():
            w, wq = trainer.master(name), layer.quantized_weight()
            self.traj[name].update(w, wq)
            self.rate_w[name].record(w)
            self.rate_q[name].record(wq)
        self.rate_y.record(trainer.probe())
        if trainer.step - self.start >= self.length:
            self._finish(trainer)

    def _finish(self, trainer: "Trainer") -> None:
        step, log = trainer.step, trainer.log
        r_w, r_q, flags, conf = [], [], [], []
        for name, layer in trainer.layers.items():
            ratios = oscillation_ratio(self.traj[name])
            mask, frac = classify_oscillating(ratios)
            flags.append(mask.ravel())
            rw, rq = _rate(self.rate_w[name]), _rate(self.rate_q[name])
            r_w.append(rw)
            r_q.append(rq)
            log.emit(metric_record(step, "r_w", name, rw))
            log.emit(metric_record(step, "r_wq", name, rq))
            log.emit(metric_record(step, "oscillating_fraction", name, frac))
            latent = np.clip(layer.latent_weight(), layer.lcfg.fmt.q_neg, layer.lcfg.fmt.q_pos)
            conf.append(ConfidenceReport.from_latent(latent, layer.lcfg.fmt).confidence.ravel())
        frac = float(np.concatenate(flags).mean()) if flags else 0.0
        report = ConfidenceReport(np.concatenate(conf)) if conf else None
        self.summary = {
            "step": step,
            "window": self.length,
            "r_w": float(np.mean(r_w)) if r_w else 0.0,
            "r_wq": float(np.mean(r_q)) if r_q else 0.0,
            "r_y": _rate(self.rate_y),
            "oscillating_fraction": frac,
            "confidence_counts": report.counts.tolist() if report is not None else [],
        }
        log.emit(metric_record(step, "r_w", "model", self.summary["r_w"]))
        log.emit(metric_record(step, "r_wq", "model", self.summary["r_wq"]))
        log.emit(metric_record(step, "r_y", "probe", self.summary["r_y"]))
        log.emit(metric_record(step, "oscillating_fraction", "model", frac))
        if report is not None:
            log.emit(metric_record(step, "confidence", "model", histogram=(report.counts, report.edges)))


def _json_number(x) -> float | str:
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _rate(acc: ChangeRateAccumulator) -> float:
    return rate_of_change(acc) if acc.count else 0.0


@dataclass
class TrainResult:
    trainer: "Trainer"
    val_acc: float
    final_loss: float
    diagnostics: list[dict] = field(default_factory=list)
    detections: list[dict] = field(default_factory=list)

    @property
    def model(self):
        return self.trainer.model

    @property
    def log(self) -> MetricLog:
        return self.trainer.log

    @property
    def final_diagnostics(self) -> dict | None:
        return self.diagnostics[-1] if self.diagnostics else None


class Trainer:
    """Owns model, optimizer and per-step hooks; implements the ramping trainer protocol."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset | None = None, model=None, log: MetricLog | None = None):
        self.cfg = cfg.validate()
        self.seed = 0 if cfg.seed is None else cfg.seed
        self.data = dataset if dataset is not None else load_dataset(cfg.data)
        if model is None:
            model = build_model(cfg.model, cfg.quant, self.data.dim, self.data.classes, self.seed, QuantContext(self.seed))
        self.model = model
        self.qctx: QuantContext = model.qctx
        self.qctx.seed = self.seed
        self.layers = dict(model.quantized_layers())
        decay = [p for n, p in model.named_parameters() if p.ndim == 2 and n != "pos"]
        other = [p for n, p in model.named_parameters() if not (p.ndim == 2 and n != "pos")]
        opt_cls = RampingAdamW if cfg.optimizer == "qramping" else AdamW
        self.optimizer = opt_cls(
            [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": other, "weight_decay": 0.0}],
            lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        )
        self.step = 0
        self.log = log if log is not None else MetricLog()
        self.last_loss = float("nan")
        self._probe_x = torch.from_numpy(np.ascontiguousarray(self.data.x_val[:256]))
        self._windows: list[DiagnosticsWindow] = []
        self.diagnostics: list[dict] = []
        self.detections: list[dict] = []
        self._flip: dict[str, FlipTracker] = {}
        self._avg: dict[str, np.ndarray] = {}
        if cfg.baseline.name == "freeze":
            for name, layer in self.layers.items():
                wq = layer.quantized_weight()
                self._flip[name] = FlipTracker(wq, cfg.baseline.momentum)
                self._avg[name] = wq.copy()

    # -- protocol used by the ramping schedule --------------------------------

    def quantized_params(self):
        return [(name, layer.weight) for name, layer in self.layers.items()]

    def quantized_weight(self, name: str) -> np.ndarray:
        return self.layers[name].quantized_weight()

    def master(self, name: str) -> np.ndarray:
        return self.layers[name].weight.detach().double().numpy().copy()

    # ---------------------------------------------------------------------------

    def lr_at(self, t: int) -> float:
        """Linear warmup then cosine decay to ``min_lr`` over ``steps``; held at the last value beyond."""
        cfg = self.cfg
        t = min(t, cfg.steps - 1)
        if t < cfg.warmup_steps:
            return cfg.lr * (t + 1) / cfg.warmup_steps
        span = max(cfg.steps - cfg.warmup_steps, 1)
        cos = 0.5 * (1.0 + math.cos(math.pi * (t - cfg.warmup_steps) / span))
        return cfg.min_lr + (cfg.lr - cfg.min_lr) * cos

    def batches(self) -> BatchStream:
        return BatchStream(self.data.x_train, self.data.y_train, self.cfg.batch_size, self.seed, start_step=self.step)

    @torch.no_grad()
    def probe(self) -> np.ndarray:
        _, y = self.model(self._probe_x, probe_block=self.cfg.diagnostics.probe_block)
        return y.double().numpy()

    @torch.no_grad()
    def evaluate(self) -> float:
        correct = 0
        x, y = self.data.x_val, self.data.y_val
        for i in range(0, len(y), 1024):
            logits = self.model(torch.from_numpy(np.ascontiguousarray(x[i : i + 1024])))
            correct += int((logits.argmax(dim=1).numpy() == y[i : i + 1024]).sum())
        return correct / len(y)

    def train_step(self, batch) -> float:
        cfg = self.cfg
        x, y = batch
        self.qctx.step = self.step
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        dampen = cfg.baseline.name == "dampen"
        wq_fwd = {n: layer.quantized_weight() for n, layer in self.layers.items()} if dampen else {}
        try:
            logits = self.model(torch.from_numpy(np.ascontiguousarray(x)))
        except InvalidInputError:  # non-finite values reached a quantizer
            self._abort(float("nan"), lr)
        loss = F.cross_entropy(logits, torch.from_numpy(np.asarray(y, dtype=np.int64)))
        value = float(loss.detach())
        extra = {}
        for name, wq in wq_fwd.items():
            pen, grad = dampen_penalty(self.master(name), wq, cfg.baseline.dampen_lambda)
            value += pen
            extra[name] = grad
        if not math.isfinite(value):
            self._abort(value, lr)
        self.optimizer.zero_grad(set_to_none=True)
        try:
            loss.backward()
        except InvalidInputError:
            self._abort(float("nan"), lr)
        for name, grad in extra.items():
            p = self.layers[name].weight
            p.grad += torch.from_numpy(grad).to(p.dtype)
        self.optimizer.step()
        self.step += 1
        self.last_loss = value
        for layer in self.layers.values():
            layer.update_ema()
        if self._flip:
            self._freeze_update()
        self._after_step()
        return value

    def _freeze_update(self) -> None:
        b = self.cfg.baseline
        armed = self.step >= freeze_warmup_steps(self.cfg.steps, b.warmup_frac)
        for name, layer in self.layers.items():
            wq = layer.quantized_weight()
            tracker = self._flip[name]
            tracker.update(wq)
            avg = self._avg[name]
            avg *= b.momentum
            avg += (1.0 - b.momentum) * wq
            if not armed:
                continue
            p = layer.weight
            prev = self.optimizer.frozen_mask(p)
            mask, values = freeze_baseline(tracker.f, b.f_th, avg, None if prev is None else prev.numpy())
            if mask.any():
                self.optimizer.freeze(p, torch.from_numpy(mask), torch.from_numpy(values))

    def _after_step(self) -> None:
        cfg = self.cfg
        if cfg.log_every and (self.step % cfg.log_every == 0 or self.step == cfg.steps):
            self.log.emit(metric_record(self.step, "loss", "model", self.last_loss))
            self.log.emit(metric_record(self.step, "lr", "model", self.lr_at(self.step - 1)))
        if cfg.eval_every and self.step % cfg.eval_every == 0:
            self.log.emit(metric_record(self.step, "val_acc", "model", self.evaluate()))
        for w in list(self._windows):
            w.observe(self)
            if w.done:
                self._windows.remove(w)
                self.diagnostics.append(w.summary)
        d = cfg.diagnostics
        if d.enabled and self.step < cfg.steps:
            final = self.step == cfg.steps - d.window
            periodic = d.every and self.step % d.every == 0 and self.step + d.window < cfg.steps - d.window
            if final or periodic:
                self.open_window(d.window)

    def open_window(self, length: int) -> DiagnosticsWindow:
        w = DiagnosticsWindow(self, length)
        self._windows.append(w)
        return w

    def on_detection(self, summary: DetectionSummary) -> None:
        n_max = self.cfg.ramping.n_max
        step = summary.step + self.cfg.ramping.t0
        rec = {"step": step, "oscillating_fraction": summary.oscillating_fraction, "n_histogram": summary.histogram(n_max)}
        self.detections.append(rec)
        self.log.emit(metric_record(step, "qramping_oscillating_fraction", "model", summary.oscillating_fraction))

    def _abort(self, value: float, lr: float):
        snapshot = {
            "step": self.step,
            "loss": str(value),
            "lr": lr,
            "param_norms": {n: _json_number(p.detach().double().norm()) for n, p in self.model.named_parameters()},
        }
        if self.cfg.out_dir:
            out = Path(self.cfg.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "abort_snapshot.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
        raise NumericAbort(f"non-finite loss {value} at step {self.step}", snapshot)

    def run(self, steps: int | None = None) -> None:
        """Train until ``steps`` total steps (default: the configured count)."""
        total = self.cfg.steps if steps is None else steps
        d = self.cfg.diagnostics
        if d.enabled and self.step == 0:
            if self.cfg.steps <= d.window:
                self.open_window(self.cfg.steps)
            elif d.every and d.window < self.cfg.steps - d.window:
                self.open_window(d.window)
        stream = self.batches()
        if self.cfg.optimizer == "qramping":
            training_with_qramping(self, stream, total - self.step, self.cfg.ramping, self.on_detection)
        else:
            while self.step < total:
                self.train_step(next(stream))

    # -- checkpoints ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": dump_config(self.cfg),
            "step": self.step,
            "seed": self.seed,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "ema": {n: torch.from_numpy(l.ema.w_ema.copy()) for n, l in self.layers.items() if l.ema is not None},
            "flip": {n: torch.from_numpy(t.f.copy()) for n, t in self._flip.items()},
            "flip_prev": {n: torch.from_numpy(t.prev.copy()) for n, t in self._flip.items()},
            "flip_avg": {n: torch.from_numpy(a.copy()) for n, a in self._avg.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])
        self.qctx.step = self.step
        for n, t in state["ema"].items():
            self.layers[n].ema.w_ema = t.numpy().copy()
        for n, t in state["flip"].items():
            self._flip[n].f = t.numpy().copy()
            self._flip[n].prev = state["flip_prev"][n].numpy().copy()
            self._avg[n] = state["flip_avg"][n].numpy().copy()

    def save_checkpoint(self, path) -> None:
        buf = io.BytesIO()
        torch.save(self.state_dict(), buf)
        Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + buf.getvalue())


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a training checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return torch.load(io.BytesIO(raw[6:]), weights_only=True)


def trainer_from_checkpoint(path, dataset: Dataset | None = None, **overrides) -> Trainer:
    state = read_checkpoint(path)
    cfg = loads_config(state["config"])
    if overrides:
        cfg = cfg.replace(**overrides)
    trainer = Trainer(cfg, dataset)
    trainer.load_state_dict(state)
    return trainer


def train(model=None, data: Dataset | None = None, cfg: TrainConfig | None = None, *, log: MetricLog | None = None) -> TrainResult:
    """Run a full training job.  With ``cfg.out_dir`` set, writes ``metrics.jsonl`` and ``final.ckpt``."""
    cfg = cfg or TrainConfig()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if log is None:
            log = MetricLog(out / "metrics.jsonl")
    trainer = Trainer(cfg, data, model, log)
    try:
        trainer.run()
        acc = trainer.evaluate()
        trainer.log.emit(metric_record(trainer.step, "val_acc", "model", acc))
        if out is not None:
            trainer.save_checkpoint(out / "final.ckpt")
    finally:
        trainer.log.close()
    return TrainResult(trainer, acc, trainer.last_loss, trainer.diagnostics, trainer.detections)
