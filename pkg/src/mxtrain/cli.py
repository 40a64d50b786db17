"""``mxtrain`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import container
from .codec import InvalidInputError, Rounding, WireFormatError
from .harness.config import ConfigError, TrainConfig, dump_config, load_config, parse_enum
from .mx_linear import Axis, dequantize_matrix, quantize_matrix
from .rng import StreamKey

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("mxtrain")


class UsageError(Exception):
    pass


def resolve_config(name: str) -> Path:
    """A filesystem path, or the name of a config bundled with the package."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("mxtrain") / "configs" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config file {name!r} not found", ("--config",))


def _load(args) -> TrainConfig:
    cfg = load_config(resolve_config(args.config))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return cfg.replace(**changes).validate() if changes else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- verbs ---------------------------------------------------------------------


def cmd_quantize(args) -> int:
    src = Path(args.input).read_bytes()
    if src[:4] == container.MAGIC:
        qm = container.from_bytes(src)
        np.save(args.output, dequantize_matrix(qm), allow_pickle=False)
        _emit({"verb": "dequantize", "shape": list(qm.shape), "output": args.output})
        return EXIT_OK
    m = np.load(args.input, allow_pickle=False)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise UsageError(f"expected a 1-D or 2-D array, got shape {m.shape}")
    rounding = Rounding.STOCHASTIC if args.rounding.startswith("stoch") else Rounding.DETERMINISTIC
    key = None
    if rounding is Rounding.STOCHASTIC:
        if args.seed is None:
            raise ConfigError("stochastic rounding requires --seed", ("--seed", "--rounding"))
        key = StreamKey(args.seed, args.tensor_id, 0)
    axis = Axis.ROW_GROUPS if args.axis.startswith("row") else Axis.COL_GROUPS
    rule = parse_enum("scale_rule", args.rule, "--rule")
    qm = quantize_matrix(m, axis, rule, rounding, key, fmt=args.format)
    container.save(args.output, qm)
    _emit({"verb": "quantize", "shape": list(qm.shape), "blocks": qm.n_blocks, "output": args.output})
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness.train import train

    if args.print_defaults:
        sys.stdout.write(dump_config(TrainConfig()))
        return EXIT_OK
    if not args.config:
        raise UsageError("train needs --config")
    cfg = _load(args)
    res = train(None, None, cfg)
    summary = {"verb": "train", "steps": res.trainer.step, "val_acc": res.val_acc, "final_loss": res.final_loss}
    if res.final_diagnostics:
        summary["diagnostics"] = {k: v for k, v in res.final_diagnostics.items() if k != "confidence_counts"}
    if cfg.out_dir:
        summary["out_dir"] = cfg.out_dir
    _emit(summary)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness.experiments import format_table, parse_grid, run_ablation_grid, write_result

    spec = args.grid
    if Path(spec).is_file():
        spec = Path(spec).read_text()
    elif (resources.files("mxtrain") / "configs" / spec).is_file():
        spec = (resources.files("mxtrain") / "configs" / spec).read_text()
    axes = parse_grid(spec)
    base = _load(args) if args.config else TrainConfig(out_dir=args.out or "")
    seeds = [int(s) for s in args.seeds.split(",")]
    res = run_ablation_grid(base.replace(out_dir=""), axes, seeds, args.out, progress=lambda m: log.info(m))
    if args.out:
        write_result(res, args.out)
    print(format_table(res))
    return EXIT_OK


def cmd_impact(args) -> int:
    from .harness.experiments import format_table, run_quantizer_impact, write_result

    cfg = _load(args)
    res = run_quantizer_impact(cfg.replace(out_dir=""), args.out, progress=lambda m: log.info(m))
    if args.out:
        write_result(res, args.out)
    print(format_table(res))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    """Continue a checkpointed run for ``--window`` steps and report the diagnostics."""
    from .harness.train import MetricLog, trainer_from_checkpoint

    if args.window < 1:
        raise ConfigError("window must be >= 1", ("--window",))
    trainer = trainer_from_checkpoint(args.checkpoint)
    trainer.log = MetricLog(args.log)
    window = trainer.open_window(args.window)
    stream = trainer.batches()
    while not window.done:
        trainer.train_step(next(stream))
    trainer.log.close()
    for rec in trainer.log.records:
        if rec["metric"] not in ("loss", "lr", "val_acc"):
            _emit(rec)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mxtrain", description="MXFP4 training simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    q = sub.add_parser("quantize", help=".npy matrix -> MXT1 container (or MXT1 -> .npy)")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--axis", choices=("row", "col"), default="row")
    q.add_argument("--rule", default="truncation_free", help="truncation_free (tf) or microscaling (mx)")
    q.add_argument("--rounding", choices=("deterministic", "stochastic"), default="deterministic")
    q.add_argument("--format", default="E2M1", choices=("E2M1", "E3M0"))
    q.add_argument("--seed", type=int)
    q.add_argument("--tensor-id", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("train", help="train the toy transformer")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out")
    t.add_argument("--print-defaults", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="ablation grid")
    a.add_argument("--grid", required=True, help="axis=v1,v2;... or a file holding that spec")
    a.add_argument("--config")
    a.add_argument("--seeds", default="0")
    a.add_argument("--steps", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("impact", help="per-quantizer impact (eight runs)")
    i.add_argument("--config", required=True)
    i.add_argument("--seed", type=int)
    i.add_argument("--steps", type=int)
    i.add_argument("--out")
    i.set_defaults(func=cmd_impact)

    d = sub.add_parser("diagnose", help="oscillation diagnostics from a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--window", type=int, required=True)
    d.add_argument("--log", help="also write the JSON-lines records here")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    from .harness.train import CheckpointError, NumericAbort

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"mxtrain: numeric abort: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, WireFormatError, CheckpointError, InvalidInputError, OSError, ValueError) as exc:
        print(f"mxtrain: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
