"""Coded-aperture bar pattern and its transmission behavior.

The aperture is a one-dimensional binary bar pattern etched into a slab of
finite thickness.  A pattern coordinate ``u`` (micrometers) runs along the
pattern axis; bit cell ``i`` occupies the half-open interval
``[i * bar_width, (i + 1) * bar_width)``.  Point lookups wrap cyclically in
``u``; for a physical (non-cyclic) mask the geometry layer rejects rays that
leave the pattern extent before a lookup ever wraps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ApertureMask",
    "generate_de_bruijn",
    "transmissivity_at",
    "effective_transmission",
    "load_mask",
    "save_mask",
]


def generate_de_bruijn(order: int) -> np.ndarray:
    """Generate a binary de Bruijn sequence B(2, order) of length 2**order.

    Uses the greedy prefer-1 rule starting from the all-zeros word: repeatedly
    append a 1 if the trailing window of ``order`` bits has not occurred yet,
    otherwise a 0, until no extension is possible.  The first 2**order bits of
    the grown string form the cyclic sequence.  Deterministic for a given
    order.

    Returns an int8 array of 0/1 values.
    """
    if not isinstance(order, (int, np.integer)) or isinstance(order, bool):
        raise ValueError(f"order must be an integer, got {order!r}")
    if not 1 <= order <= 16:
        raise ValueError(f"order must be in [1, 16], got {order}")
    length = 1 << order
    seq = [0] * order
    seen = {tuple(seq)}
    while True:
        for bit in (1, 0):
            window = tuple(seq[len(seq) - order + 1:]) + (bit,)
            if window not in seen:
                seen.add(window)
                seq.append(bit)
                break
        else:
            break
    return np.array(seq[:length], dtype=np.int8)


@dataclass
class ApertureMask:
    """Binary bar pattern with transmissivity coefficients and slab thickness.

    Attributes:
        bits: 0/1 pattern, 1 = absorbing bar, 0 = open cell.
        bar_width: width of one bit cell along the pattern axis, micrometers.
        thickness: slab thickness along the mask optical axis, micrometers.
        transmission_one: transmissivity of a 1-bit, in [0, 1).
        transmission_zero: transmissivity of a 0-bit, in (t_one, 1].
        cyclic: if True the pattern repeats indefinitely; if False (physical
            mask) the geometry layer treats rays outside the extent as misses.
        order: de Bruijn order used to build the pattern, if any.

    Instances are treated as immutable after construction; all operations on
    them are pure functions safe for concurrent use.
    """

    bits: np.ndarray
    bar_width: float = 1.0
    thickness: float = 4.6
    transmission_one: float = 0.0
    transmission_zero: float = 1.0
    cyclic: bool = False
    order: int | None = None

    # derived, filled by __post_init__
    _coeff: np.ndarray = field(init=False, repr=False)
    _prefix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.int8)
        if bits.ndim != 1 or bits.size < 1:
            raise ValueError("bits must be a non-empty 1-D sequence")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("every bit must be 0 or 1")
        if not (self.bar_width > 0):
            raise ValueError(f"bar_width must be > 0, got {self.bar_width}")
        if not (self.thickness >= 0):
            raise ValueError(f"thickness must be >= 0, got {self.thickness}")
        t1, t0 = self.transmission_one, self.transmission_zero
        if not (0.0 <= t1 < t0 <= 1.0):
            raise ValueError(
                f"need 0 <= t_one < t_zero <= 1, got t_one={t1}, t_zero={t0}")
        self.bits = bits
        self._coeff = np.where(bits == 1, t1, t0).astype(np.float64)
        # prefix[i] = integral of transmissivity over [0, i*bar_width)
        self._prefix = np.concatenate(
            ([0.0], np.cumsum(self._coeff) * self.bar_width))

    @property
    def n_bits(self) -> int:
        return int(self.bits.size)

    @property
    def length_um(self) -> float:
        """Pattern extent along the pattern axis."""
        return self.bits.size * self.bar_width

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "bits": [int(b) for b in self.bits],
            "bar_width_um": self.bar_width,
            "thickness_um": self.thickness,
            "t_one": self.transmission_one,
            "t_zero": self.transmission_zero,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApertureMask":
        return cls(
            bits=np.asarray(d["bits"], dtype=np.int8),
            bar_width=float(d["bar_width_um"]),
            thickness=float(d["thickness_um"]),
            transmission_one=float(d["t_one"]),
            transmission_zero=float(d["t_zero"]),
            order=d.get("order"),
        )


def transmissivity_at(mask: ApertureMask, u) -> np.ndarray | float:
    """Transmissivity coefficient of the bit cell containing pattern coordinate u.

    Coordinates outside [0, length_um) wrap cyclically (floor-division
    convention: cell boundaries belong to the cell on their right).
    """
    u_arr = np.asarray(u, dtype=np.float64)
    idx = np.floor_divide(u_arr, mask.bar_width).astype(np.int64) % mask.n_bits
    out = mask._coeff[idx]
    return float(out) if np.isscalar(u) or u_arr.ndim == 0 else out


def _cell_integral(mask: ApertureMask, i: np.ndarray) -> np.ndarray:
    """Integral of the cyclic transmissivity profile over [0, i*bar_width)."""
    q, r = np.divmod(i, mask.n_bits)
    return q * mask._prefix[-1] + mask._prefix[r]


def effective_transmission(mask: ApertureMask, u_entry, u_exit):
    """Path-length-weighted mean transmissivity over the segment [u_entry, u_exit].

    Exact piecewise integration of the bar profile (no sampling).  Symmetric
    in its two coordinates; equals ``transmissivity_at`` when they coincide.
    Accepts scalars or broadcastable arrays.
    """
    a = np.asarray(u_entry, dtype=np.float64)
    b = np.asarray(u_exit, dtype=np.float64)
    scalar = a.ndim == 0 and b.ndim == 0
    a, b = np.broadcast_arrays(a, b)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)

    w = mask.bar_width
    i_lo = np.floor_divide(lo, w).astype(np.int64)
    i_hi = np.floor_divide(hi, w).astype(np.int64)
    coeff_lo = mask._coeff[i_lo % mask.n_bits]
    coeff_hi = mask._coeff[i_hi % mask.n_bits]

    same_cell = i_lo == i_hi
    span = hi - lo
    # partial pieces in the end cells plus whole interior cells; computed
    # piecewise so round-off stays relative to each piece, not the prefix
    piece = (coeff_lo * ((i_lo + 1) * w - lo)
             + coeff_hi * (hi - i_hi * w)
             + _cell_integral(mask, i_hi) - _cell_integral(mask, i_lo + 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        avg = piece / span
    t_min = mask.transmission_one
    t_max = mask.transmission_zero
    out = np.where(same_cell, coeff_lo, np.clip(avg, t_min, t_max))
    if scalar:
        return float(out)
    return out


def save_mask(mask: ApertureMask, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mask.to_dict(), indent=2) + "\n")


def load_mask(path: str | Path) -> ApertureMask:
    return ApertureMask.from_dict(json.loads(Path(path).read_text()))
