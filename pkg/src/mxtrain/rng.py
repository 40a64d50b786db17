"""Counter-based random streams for stochastic rounding.

Each (seed, tensor id, step) triple selects a disjoint Philox substream.  Block
``b`` of a tensor always consumes uniforms ``[32*b, 32*b + 32)`` of that
substream, so the draws for a block do not depend on how many other blocks are
processed, or in which order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK = 32
# Philox emits four 64-bit words per counter increment; one double per word.
_WORDS_PER_COUNTER = 4


@dataclass(frozen=True)
class StreamKey:
    seed: int
    tensor_id: int = 0
    step: int = 0

    def child(self, tensor_id: int) -> "StreamKey":
        return StreamKey(self.seed, tensor_id, self.step)

    def at_step(self, step: int) -> "StreamKey":
        return StreamKey(self.seed, self.tensor_id, step)


def _bit_generator(key: StreamKey) -> np.random.Philox:
    if key.seed < 0 or key.tensor_id < 0 or key.step < 0:
        raise ValueError(f"stream key fields must be non-negative: {key}")
    # counter word 2 holds the step; word 0 walks through block positions
    counter = np.array([0, 0, key.step, 0], dtype=np.uint64)
    return np.random.Philox(key=np.array([key.seed, key.tensor_id], dtype=np.uint64), counter=counter)


def block_uniforms(key: StreamKey, n_blocks: int, first_block: int = 0) -> np.ndarray:
    """U[0, 1) draws of shape ``(n_blocks, 32)`` for blocks ``first_block...``."""
    bg = _bit_generator(key)
    if first_block:
        bg.advance(first_block * BLOCK // _WORDS_PER_COUNTER)
    return np.random.Generator(bg).random((n_blocks, BLOCK))


def scalar_stream(key: StreamKey) -> np.random.Generator:
    """A plain generator on the same substream, for element-wise use."""
    return np.random.Generator(_bit_generator(key))
