"""Experiment configuration and its ``.cfg`` (INI) file format.

Sections and keys (all optional except ``run.seed`` when any rounding is
stochastic; ``mxtrain train --print-defaults`` shows every default)::

    [run]        seed, steps, batch_size, lr, min_lr, warmup_steps, weight_decay,
                 beta1, beta2, eps, log_every, eval_every, out_dir
    [model]      depth, width, heads, mlp_ratio, tokens, allow_ragged, init_std
    [data]       kind (gaussian | file), classes, dim, noise, separation,
                 n_train, n_val, seed, path
    [quantizer]  enabled, mask, format, grad_format, scale_rule,
                 backward_rounding, grad_path, weight (plain | qema), beta
    [optimizer]  name (adamw | qramping), k1, k2, n_max, t0, t_update
    [baseline]   name (none | dampen | freeze), lambda, f_th, momentum, warmup_frac
    [diagnostics] enabled, window, probe_block, every
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..codec import Rounding, ScaleRule
from ..formats import E2M1, Fp4Format, get_format
from ..mx_linear import GradPath, LinearQuantConfig, QuantizerMask
from ..q_ema import DEFAULT_BETA
from ..q_ramping import RampingConfig, RampingConfigError


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` names the offending ``section.key`` entries."""

    def __init__(self, message: str, keys: tuple[str, ...] = ()):
        self.keys = tuple(keys)
        prefix = f"[{', '.join(self.keys)}] " if self.keys else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    tokens: int = 8
    allow_ragged: bool = False
    init_std: float = 0.02

    def validate(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1", ("model.depth",))
        if self.width < 32:
            raise ConfigError("width must be >= 32", ("model.width",))
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads", ("model.width", "model.heads"))
        if not self.allow_ragged and self.width % 32:
            raise ConfigError(
                "quantized dims must be multiples of 32 unless allow_ragged is set",
                ("model.width", "model.allow_ragged"),
            )


@dataclass(frozen=True)
class DataConfig:
    kind: str = "gaussian"
    classes: int = 16
    dim: int = 64
    noise: float = 1.0
    separation: float = 1.0
    n_train: int = 8192
    n_val: int = 2048
    seed: int = 0
    path: str = ""

    def validate(self):
        if self.kind not in ("gaussian", "file"):
            raise ConfigError(f"unknown data kind {self.kind!r}", ("data.kind",))
        if self.kind == "file" and not self.path:
            raise ConfigError("file data needs a path", ("data.kind", "data.path"))
        if self.classes < 2 or self.n_train < 1 or self.n_val < 1:
            raise ConfigError("need >= 2 classes and non-empty splits", ("data.classes", "data.n_train", "data.n_val"))


@dataclass(frozen=True)
class QuantConfig:
    enabled: bool = True
    mask: QuantizerMask = QuantizerMask()
    fmt: Fp4Format = E2M1
    grad_fmt: Fp4Format = E2M1
    scale_rule: ScaleRule = ScaleRule.TRUNCATION_FREE
    backward_rounding: Rounding = Rounding.STOCHASTIC
    grad_path: GradPath = GradPath.DOUBLE_QUANTIZATION
    weight: str = "plain"
    beta: float = DEFAULT_BETA

    def linear_config(self) -> LinearQuantConfig:
        return LinearQuantConfig(self.fmt, self.grad_fmt, self.scale_rule, self.backward_rounding, self.grad_path)

    @property
    def effective_mask(self) -> QuantizerMask:
        return self.mask if self.enabled else QuantizerMask.all_off()

    @property
    def stochastic(self) -> bool:
        m = self.effective_mask
        return self.backward_rounding is Rounding.STOCHASTIC and not m.gradient_quantizers_off


@dataclass(frozen=True)
class BaselineConfig:
    name: str = "none"
    dampen_lambda: float = 1e-4
    f_th: float = 0.5
    momentum: float = 0.9
    warmup_frac: float = 0.1


@dataclass(frozen=True)
class DiagnosticsConfig:
    enabled: bool = False
    window: int = 30
    probe_block: int = -1
    every: int = 0


@dataclass(frozen=True)
class TrainConfig:
    seed: int | None = 0
    steps: int = 1200
    batch_size: int = 128
    lr: float = 2e-3
    min_lr: float = 0.0
    warmup_steps: int = 50
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100
    eval_every: int = 0
    out_dir: str = ""
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    quant: QuantConfig = QuantConfig()
    optimizer: str = "adamw"
    ramping: RampingConfig = field(default_factory=lambda: RampingConfig(t_update=1000))
    baseline: BaselineConfig = BaselineConfig()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "TrainConfig":
        self.model.validate()
        self.data.validate()
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive", ("run.steps", "run.batch_size"))
        if not 0.0 <= self.min_lr <= self.lr:
            raise ConfigError("need 0 <= min_lr <= lr", ("run.min_lr", "run.lr"))
        if self.optimizer not in ("adamw", "qramping"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", ("optimizer.name",))
        q = self.quant
        if q.weight not in ("plain", "qema"):
            raise ConfigError(f"unknown weight quantizer {q.weight!r}", ("quantizer.weight",))
        if q.weight == "qema" and self.optimizer == "qramping":
            raise ConfigError(
                "the EMA weight quantizer cannot be combined with the ramping optimizer",
                ("quantizer.weight", "optimizer.name"),
            )
        if q.weight == "qema" and not (q.enabled and q.mask.q2):
            raise ConfigError("the EMA quantizer replaces Q2, which is disabled", ("quantizer.weight", "quantizer.mask"))
        if q.weight == "qema" and not 0.0 < q.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)", ("quantizer.beta",))
        if self.optimizer == "qramping" and not (q.enabled and q.mask.q2):
            raise ConfigError(
                "ramping detects oscillation of quantized weights; Q2 must be enabled",
                ("optimizer.name", "quantizer.mask"),
            )
        if q.stochastic and self.seed is None:
            raise ConfigError("stochastic rounding requires a seed", ("run.seed", "quantizer.backward_rounding"))
        b = self.baseline
        if b.name not in ("none", "dampen", "freeze"):
            raise ConfigError(f"unknown baseline {b.name!r}", ("baseline.name",))
        if b.name != "none" and not (q.enabled and q.mask.q2):
            raise ConfigError("baselines act on quantized weights; Q2 must be enabled", ("baseline.name", "quantizer.mask"))
        if b.name == "freeze" and not 0.0 < b.momentum < 1.0:
            raise ConfigError("momentum must lie in (0, 1)", ("baseline.momentum",))
        if b.name == "dampen" and b.dampen_lambda < 0:
            raise ConfigError("lambda must be >= 0", ("baseline.lambda",))
        if b.name != "none" and self.optimizer == "qramping":
            raise ConfigError("baselines are compared against plain AdamW only", ("baseline.name", "optimizer.name"))
        d = self.diagnostics
        if d.enabled and d.window < 1:
            raise ConfigError("window must be >= 1", ("diagnostics.window",))
        if d.probe_block >= self.model.depth or d.probe_block < -self.model.depth:
            raise ConfigError("probe_block out of range", ("diagnostics.probe_block", "model.depth"))
        return self


# -- .cfg reading / writing --------------------------------------------------

_ENUMS = {
    "scale_rule": {"truncation_free": ScaleRule.TRUNCATION_FREE, "tf": ScaleRule.TRUNCATION_FREE,
                   "microscaling": ScaleRule.MICROSCALING, "mx": ScaleRule.MICROSCALING},
    "backward_rounding": {"stochastic": Rounding.STOCHASTIC, "deterministic": Rounding.DETERMINISTIC},
    "grad_path": {"double": GradPath.DOUBLE_QUANTIZATION, "double_quantization": GradPath.DOUBLE_QUANTIZATION,
                  "microscaling": GradPath.MICROSCALING},
}


def parse_enum(kind: str, text: str, key: str):
    try:
        return _ENUMS[kind][text.strip().lower()]
    except KeyError:
        choices = ", ".join(sorted(_ENUMS[kind]))
        raise ConfigError(f"{text!r} is not one of: {choices}", (key,)) from None


def _enum_name(value) -> str:
    if isinstance(value, GradPath):
        return "double" if value == GradPath.DOUBLE_QUANTIZATION else "microscaling"
    return value.value


def _coerce(section: str, key: str, raw: str, default):
    name = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"cannot parse {raw!r}", (name,)) from None
    return raw.strip()


def _read_section(cp, section: str, cls, rename: dict[str, str] | None = None, skip=()):
    rename = rename or {}
    if not cp.has_section(section):
        return {}
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in cp.items(section):
        attr = rename.get(key, key)
        if attr in skip:
            continue
        if attr not in known:
            raise ConfigError("unknown key", (f"{section}.{key}",))
        default = known[attr].default
        out[attr] = _coerce(section, key, raw, default)
    return out


def load_config(path: str | Path) -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    return config_from_parser(cp)


def loads_config(text: str) -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return config_from_parser(cp)


_SECTIONS = ("run", "model", "data", "quantizer", "optimizer", "baseline", "diagnostics")


def config_from_parser(cp: configparser.ConfigParser) -> TrainConfig:
    for s in cp.sections():
        if s not in _SECTIONS:
            raise ConfigError("unknown section", (s,))
    run = _read_section(cp, "run", TrainConfig, skip=("seed",))
    for nested in ("model", "data", "quant", "optimizer", "ramping", "baseline", "diagnostics"):
        if nested in run:
            raise ConfigError("unknown key", (f"run.{nested}",))
    cfg = TrainConfig()
    # a file must name its seed; without one, stochastic rounding is rejected
    run["seed"] = None
    if cp.has_option("run", "seed"):
        raw = cp.get("run", "seed").strip().lower()
        run["seed"] = None if raw in ("", "none") else _coerce("run", "seed", raw, 0)
    model = ModelConfig(**_read_section(cp, "model", ModelConfig))
    data = DataConfig(**_read_section(cp, "data", DataConfig))

    quant_kw = {}
    if cp.has_section("quantizer"):
        for key, raw in cp.items("quantizer"):
            name = f"quantizer.{key}"
            if key == "enabled":
                quant_kw["enabled"] = _coerce("quantizer", key, raw, True)
            elif key == "mask":
                try:
                    quant_kw["mask"] = QuantizerMask.from_string(raw)
                except ValueError:
                    raise ConfigError(f"bad mask {raw!r}", (name,)) from None
            elif key in ("format", "grad_format"):
                try:
                    quant_kw["fmt" if key == "format" else "grad_fmt"] = get_format(raw.strip())
                except ValueError as exc:
                    raise ConfigError(str(exc), (name,)) from None
            elif key in _ENUMS:
                quant_kw[key] = parse_enum(key, raw, name)
            elif key == "weight":
                quant_kw["weight"] = raw.strip().lower()
            elif key == "beta":
                quant_kw["beta"] = _coerce("quantizer", key, raw, 0.0)
            else:
                raise ConfigError("unknown key", (name,))
    quant = QuantConfig(**quant_kw)

    optimizer = cfg.optimizer
    ramp_kw = {}
    if cp.has_section("optimizer"):
        for key, raw in cp.items("optimizer"):
            if key == "name":
                optimizer = raw.strip().lower()
            elif key in ("k1",):
                ramp_kw[key] = _coerce("optimizer", key, raw, 0.0)
            elif key in ("k2", "n_max", "t0", "t_update"):
                ramp_kw[key] = _coerce("optimizer", key, raw, 0)
            else:
                raise ConfigError("unknown key", (f"optimizer.{key}",))
    try:
        ramping = dataclasses.replace(cfg.ramping, **ramp_kw)
    except RampingConfigError as exc:
        raise ConfigError(str(exc), tuple(f"optimizer.{k}" for k in ramp_kw)) from None

    baseline = BaselineConfig(**_read_section(cp, "baseline", BaselineConfig, rename={"lambda": "dampen_lambda"}))
    diagnostics = DiagnosticsConfig(**_read_section(cp, "diagnostics", DiagnosticsConfig))
    return TrainConfig(**run).replace(
        model=model, data=data, quant=quant, optimizer=optimizer, ramping=ramping,
        baseline=baseline, diagnostics=diagnostics,
    ).validate()


def dump_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` in the ``.cfg`` format accepted by :func:`load_config`."""
    cp = configparser.ConfigParser(interpolation=None)
    run = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)
           if f.name not in ("model", "data", "quant", "optimizer", "ramping", "baseline", "diagnostics")}
    run["seed"] = "none" if cfg.seed is None else cfg.seed
    cp["run"] = {k: str(v) for k, v in run.items()}
    cp["model"] = {f.name: str(getattr(cfg.model, f.name)) for f in fields(ModelConfig)}
    cp["data"] = {f.name: str(getattr(cfg.data, f.name)) for f in fields(DataConfig)}
    q = cfg.quant
    cp["quantizer"] = {
        "enabled": str(q.enabled), "mask": str(q.mask), "format": q.fmt.name, "grad_format": q.grad_fmt.name,
        "scale_rule": _enum_name(q.scale_rule), "backward_rounding": _enum_name(q.backward_rounding),
        "grad_path": _enum_name(q.grad_path), "weight": q.weight, "beta": repr(q.beta),
    }
    cp["optimizer"] = {"name": cfg.optimizer, **{k: str(v) for k, v in cfg.ramping.to_dict().items()}}
    b = cfg.baseline
    cp["baseline"] = {"name": b.name, "lambda": repr(b.dampen_lambda), "f_th": repr(b.f_th),
                      "momentum": repr(b.momentum), "warmup_frac": repr(b.warmup_frac)}
    cp["diagnostics"] = {f.name: str(getattr(cfg.diagnostics, f.name)) for f in fields(DiagnosticsConfig)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
