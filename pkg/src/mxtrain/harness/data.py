"""Toy classification data.

Synthetic: ``classes`` Gaussian clusters in ``dim`` dimensions, means drawn
from ``N(0, separation**2 I)`` and isotropic noise of std ``noise``.

File-backed (``.mxds``), little-endian::

    magic  b"MXDS"
    u32    n_samples
    u32    dim
    u32    n_classes
    f32    features[n_samples * dim]   (row-major)
    u16    labels[n_samples]

The train/val split of a file is a seeded permutation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, DataConfig

MAGIC = b"MXDS"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    classes: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def gaussian_clusters(cfg: DataConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    means = rng.normal(0.0, cfg.separation, size=(cfg.classes, cfg.dim))
    n = cfg.n_train + cfg.n_val
    y = rng.integers(0, cfg.classes, size=n)
    x = means[y] + rng.normal(0.0, cfg.noise, size=(n, cfg.dim))
    x = x.astype(np.float32)
    return Dataset(x[: cfg.n_train], y[: cfg.n_train], x[cfg.n_train :], y[cfg.n_train :], cfg.classes)


def write_dataset_file(path, x: np.ndarray, y: np.ndarray, classes: int) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    y = np.ascontiguousarray(y, dtype="<u2")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", x.shape[0], x.shape[1], classes))
        fh.write(x.tobytes())
        fh.write(y.tobytes())


def read_dataset_file(path) -> tuple[np.ndarray, np.ndarray, int]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC or len(buf) < 16:
        raise ConfigError(f"{path} is not an MXDS file", ("data.path",))
    n, dim, classes = struct.unpack_from("<III", buf, 4)
    need = 16 + 4 * n * dim + 2 * n
    if len(buf) != need:
        raise ConfigError(f"{path}: expected {need} bytes, found {len(buf)}", ("data.path",))
    x = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=16).reshape(n, dim).astype(np.float32)
    y = np.frombuffer(buf, dtype="<u2", count=n, offset=16 + 4 * n * dim).astype(np.int64)
    return x, y, classes


def load_dataset(cfg: DataConfig) -> Dataset:
    if cfg.kind == "gaussian":
        return gaussian_clusters(cfg)
    x, y, classes = read_dataset_file(cfg.path)
    perm = np.random.default_rng(cfg.seed).permutation(len(y))
    n_val = min(cfg.n_val, len(y) - 1)
    val, train = perm[:n_val], perm[n_val:]
    return Dataset(x[train], y[train], x[val], y[val], classes)


class BatchStream:
    """Batch ``t`` is a pure function of ``(seed, t)``: epoch-wise seeded permutations, drop-last."""

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, seed: int, start_step: int = 0):
        if batch_size > len(y):
            raise ConfigError("batch_size exceeds the training set", ("run.batch_size", "data.n_train"))
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = len(y) // batch_size
        self.step = start_step
        self._epoch = -1
        self._perm = None

    def batch(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        epoch, i = divmod(t, self.per_epoch)
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.y))
            self._epoch = epoch
        idx = self._perm[i * self.batch_size : (i + 1) * self.batch_size]
        return self.x[idx], self.y[idx]

    def __iter__(self):
        return self

    def __next__(self):
        b = self.batch(self.step)
        self.step += 1
        return b
