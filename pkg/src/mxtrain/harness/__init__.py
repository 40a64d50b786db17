"""Toy-transformer training harness."""

from .config import ConfigError, TrainConfig, dump_config, load_config, loads_config
from .data import BatchStream, Dataset, load_dataset
from .model import MxLinear, QuantContext, ToyTransformer, build_model
from .train import MetricLog, NumericAbort, Trainer, TrainResult, read_checkpoint, train, trainer_from_checkpoint

__all__ = [
    "BatchStream", "ConfigError", "Dataset", "MetricLog", "MxLinear", "NumericAbort", "QuantContext",
    "ToyTransformer", "TrainConfig", "TrainResult", "Trainer", "build_model", "dump_config", "load_config",
    "load_dataset", "loads_config", "read_checkpoint", "train", "trainer_from_checkpoint",
]
