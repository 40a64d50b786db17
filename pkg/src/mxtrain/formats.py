"""FP4 element formats: value grids and 4-bit code tables.

A code is ``sign << 3 | magnitude_index`` where ``magnitude_index`` indexes the
non-negative half of the grid.  For E2M1 this coincides with the usual
``sign | exp(2) | man(1)`` bit layout because the magnitudes are listed in
bit-pattern order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class FormatId(IntEnum):
    E2M1 = 0
    E3M0 = 1


@dataclass(frozen=True)
class Fp4Format:
    name: str
    format_id: FormatId
    magnitudes: tuple[float, ...]
    e_max: int
    # derived tables, filled in __post_init__
    grid: np.ndarray = field(init=False, repr=False, compare=False)
    thresholds: np.ndarray = field(init=False, repr=False, compare=False)
    code_of_index: np.ndarray = field(init=False, repr=False, compare=False)
    decode_table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if len(mags) != 8 or mags[0] != 0.0 or np.any(np.diff(mags) <= 0):
            raise ValueError("magnitudes must be 8 strictly increasing values starting at 0")
        grid = np.concatenate([-mags[:0:-1], mags])
        # grid index -> 4-bit code
        codes = np.concatenate([8 + np.arange(7, 0, -1), np.arange(8)]).astype(np.uint8)
        decode = np.concatenate([mags, -mags])
        decode[8] = 0.0  # negative-zero code decodes to +0
        for name, value in (
            ("grid", grid),
            ("thresholds", (grid[1:] + grid[:-1]) / 2),
            ("code_of_index", codes),
            ("decode_table", decode),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def q_pos(self) -> float:
        return float(self.magnitudes[-1])

    @property
    def q_neg(self) -> float:
        return -float(self.magnitudes[-1])

    def encode(self, value: float) -> int:
        """Return the 4-bit code of a grid value; raises if ``value`` is off-grid."""
        idx = int(np.searchsorted(self.grid, value))
        if idx >= len(self.grid) or self.grid[idx] != value:
            raise ValueError(f"{value!r} is not representable in {self.name}")
        return int(self.code_of_index[idx])

    def decode(self, code: int) -> float:
        if not 0 <= code <= 15:
            raise ValueError(f"code {code} does not fit in 4 bits")
        return float(self.decode_table[code])

    def __str__(self):
        return self.name


E2M1 = Fp4Format("E2M1", FormatId.E2M1, (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0), e_max=2)
# Pure power-of-two grid: exponent field e >= 1 encodes 2**(e - 3), e == 0 is zero.
E3M0 = Fp4Format("E3M0", FormatId.E3M0, (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0), e_max=4)

FORMATS = {f.name: f for f in (E2M1, E3M0)}
_BY_ID = {f.format_id: f for f in (E2M1, E3M0)}


def get_format(key) -> Fp4Format:
    if isinstance(key, Fp4Format):
        return key
    if isinstance(key, str):
        try:
            return FORMATS[key.upper()]
        except KeyError:
            raise ValueError(f"unknown FP4 format {key!r}") from None
    return _BY_ID[FormatId(key)]
