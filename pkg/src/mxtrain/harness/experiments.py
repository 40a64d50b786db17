"""Multi-run experiments: per-quantizer impact and ablation grids."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
from pathlib import Path
from typing import Callable

from ..formats import get_format
from ..mx_linear import QuantizerMask
from .config import ConfigError, TrainConfig, parse_enum
from .data import load_dataset
from .train import train

log = logging.getLogger(__name__)

IMPACT_ROWS = (
    ("full-precision", None),
    *((f"Q{i}-only", QuantizerMask.only(i)) for i in range(1, 7)),
    ("all-on", QuantizerMask.all_on()),
)


def _run(cfg: TrainConfig, data, out_dir: Path | None, tag: str) -> dict:
    if out_dir is not None:
        cfg = cfg.replace(out_dir=str(out_dir / tag))
    res = train(None, data, cfg)
    row = {"val_acc": res.val_acc, "final_loss": res.final_loss}
    if res.final_diagnostics:
        row.update({k: res.final_diagnostics[k] for k in ("r_w", "r_wq", "r_y", "oscillating_fraction")})
    return row


def run_quantizer_impact(base: TrainConfig, out_dir=None, progress: Callable[[str], None] | None = None) -> dict:
    """Eight runs that differ only in which quantizers are enabled."""
    base = base.validate()
    data = load_dataset(base.data)
    out = Path(out_dir) if out_dir else None
    rows = []
    for label, mask in IMPACT_ROWS:
        q = dataclasses.replace(base.quant, enabled=False) if mask is None else dataclasses.replace(base.quant, enabled=True, mask=mask)
        cfg = base.replace(quant=q)
        row = {"run": label, "mask": str(q.effective_mask), **_run(cfg, data, out, label)}
        rows.append(row)
        if progress:
            progress(f"{label}: val_acc={row['val_acc']:.4f}")
    return {"experiment": "quantizer_impact", "seed": base.seed, "rows": rows}


# -- ablation grid -------------------------------------------------------------

GRID_AXES = ("rounding", "grad_path", "scale_rule", "format", "weight", "optimizer")


def parse_grid(spec: str) -> dict[str, list[str]]:
    """``"rounding=deterministic,stochastic; scale_rule=tf,mx"`` -> axis -> values."""
    axes: dict[str, list[str]] = {}
    for part in spec.replace("\n", ";").split(";"):
        part = part.strip()
        if not part or part.startswith("#"):
            continue
        if "=" not in part:
            raise ConfigError(f"grid entry {part!r} is not axis=v1,v2", ("grid",))
        axis, values = (t.strip().lower() for t in part.split("=", 1))
        if axis not in GRID_AXES:
            raise ConfigError(f"unknown grid axis {axis!r}; choose from {', '.join(GRID_AXES)}", (f"grid.{axis}",))
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError("empty value list", (f"grid.{axis}",))
        axes[axis] = vals
    if not axes:
        raise ConfigError("empty grid", ("grid",))
    return axes


def apply_cell(base: TrainConfig, cell: dict[str, str]) -> TrainConfig:
    q = base.quant
    changes: dict = {}
    for axis, value in cell.items():
        key = f"grid.{axis}"
        if axis == "rounding":
            q = dataclasses.replace(q, backward_rounding=parse_enum("backward_rounding", value, key))
        elif axis == "grad_path":
            q = dataclasses.replace(q, grad_path=parse_enum("grad_path", value, key))
        elif axis == "scale_rule":
            q = dataclasses.replace(q, scale_rule=parse_enum("scale_rule", value, key))
        elif axis == "format":
            try:
                fmt = get_format(value)
            except ValueError as exc:
                raise ConfigError(str(exc), (key,)) from None
            q = dataclasses.replace(q, fmt=fmt, grad_fmt=fmt)
        elif axis == "weight":
            q = dataclasses.replace(q, weight=value.lower())
        elif axis == "optimizer":
            changes["optimizer"] = value.lower()
    return base.replace(quant=q, **changes).validate()


def run_ablation_grid(
    base: TrainConfig,
    axes: dict[str, list[str]],
    seeds=(0,),
    out_dir=None,
    progress: Callable[[str], None] | None = None,
) -> dict:
    """One run per grid cell and seed; invalid cells are skipped with a notice."""
    names = list(axes)
    data = load_dataset(base.data)
    out = Path(out_dir) if out_dir else None
    rows, skipped = [], []
    for values in itertools.product(*(axes[n] for n in names)):
        cell = dict(zip(names, values))
        try:
            cfg = apply_cell(base, cell)
        except ConfigError as exc:
            skipped.append({"cell": cell, "reason": str(exc)})
            log.warning("skipping cell %s: %s", cell, exc)
            if progress:
                progress(f"skip {cell}: {exc}")
            continue
        accs, losses = [], []
        for seed in seeds:
            tag = "_".join(values) + f"_s{seed}"
            r = _run(cfg.replace(seed=seed), data, out, tag)
            accs.append(r["val_acc"])
            losses.append(r["final_loss"])
        row = {"cell": cell, "seeds": list(seeds), "val_acc": accs, "final_loss": losses,
               "mean_val_acc": sum(accs) / len(accs)}
        rows.append(row)
        if progress:
            progress(f"{cell}: mean val_acc={row['mean_val_acc']:.4f}")
    return {"experiment": "ablation_grid", "axes": axes, "rows": rows, "skipped": skipped}


def format_table(result: dict) -> str:
    """Plain-text rendering of an experiment result."""
    lines = []
    if result["experiment"] == "quantizer_impact":
        lines.append(f"{'run':<16}{'mask':<8}{'val_acc':>9}{'loss':>9}")
        for r in result["rows"]:
            lines.append(f"{r['run']:<16}{r['mask']:<8}{r['val_acc']:>9.4f}{r['final_loss']:>9.4f}")
        return "\n".join(lines)
    names = list(result["axes"])
    width = [max(len(n), *(len(v) for v in result["axes"][n])) + 2 for n in names]
    lines.append("".join(n.ljust(w) for n, w in zip(names, width)) + f"{'mean_acc':>9}")
    for r in result["rows"]:
        lines.append("".join(r["cell"][n].ljust(w) for n, w in zip(names, width)) + f"{r['mean_val_acc']:>9.4f}")
    for s in result["skipped"]:
        lines.append(f"skipped {s['cell']}: {s['reason']}")
    return "\n".join(lines)


def write_result(result: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{result['experiment']}.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    (out / f"{result['experiment']}.txt").write_text(format_table(result) + "\n")
