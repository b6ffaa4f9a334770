"""Exact fixed-point Bernoulli shift and its generalized (piecewise affine) form.

Binary floating point collapses the doubling map to 0 after ~53 iterates, so
states are stored as integers ``N`` with value ``N / 2**width_bits``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


class ShiftWidthError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftState:
    numerator: int
    width_bits: int

    def __post_init__(self):
        if self.width_bits < 64:
            raise ShiftWidthError(f"width_bits must be >= 64, got {self.width_bits}")
        if not 0 <= self.numerator < (1 << self.width_bits):
            raise ValueError("shift state value must lie in [0, 1)")

    @classmethod
    def from_fraction(cls, q: Fraction | int, width_bits: int) -> "ShiftState":
        q = Fraction(q)
        if not 0 <= q < 1:
            raise ValueError(f"value {q} outside [0, 1)")
        return cls(math.floor(q * (1 << width_bits)), width_bits)

    @classmethod
    def from_float(cls, x: float, width_bits: int) -> "ShiftState":
        """Exact binary expansion of ``x`` (truncated to ``width_bits``)."""
        return cls.from_fraction(Fraction(float(x)), width_bits)

    @classmethod
    def from_seed(cls, seed: int, width_bits: int) -> "ShiftState":
        """Deterministic pseudo-random expansion of an integer seed (any bit length) via SHAKE-256."""
        nbytes = (max(seed.bit_length(), 1) + 7) // 8
        stream = hashlib.shake_256(seed.to_bytes(nbytes, "big")).digest((width_bits + 7) // 8)
        value = int.from_bytes(stream, "big") >> (8 * len(stream) - width_bits)
        return cls(value, width_bits)

    @property
    def value(self) -> Fraction:
        return Fraction(self.numerator, 1 << self.width_bits)

    def __float__(self) -> float:
        return self.numerator / (1 << self.width_bits)

    def doubled(self) -> "ShiftState":
        """``x -> 2x mod 1``: left shift, integer bit dropped."""
        mask = (1 << self.width_bits) - 1
        return ShiftState((self.numerator << 1) & mask, self.width_bits)

    def stretch(self, lo: Fraction, width: Fraction) -> "ShiftState":
        """``x -> (x - lo)/width`` for ``x`` in ``[lo, lo + width)``, truncated to the fixed point."""
        scale = 1 << self.width_bits
        num = Fraction(self.numerator) - Fraction(lo) * scale
        new = math.floor(num / Fraction(width))
        if not 0 <= new < scale:
            raise ValueError(f"value {float(self)} lies outside [{float(lo)}, {float(lo + width)})")
        return ShiftState(new, self.width_bits)

    def offset(self, delta: float) -> "ShiftState":
        """Add ``delta`` modulo 1 (used for companion orbits)."""
        scale = 1 << self.width_bits
        step = round(Fraction(delta) * scale)
        return ShiftState((self.numerator + step) % scale, self.width_bits)


def bernoulli_shift(s: ShiftState, steps: int) -> list[ShiftState]:
    """Orbit ``s, 2s mod 1, ...`` of length ``steps + 1``, exact in fixed point."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if s.width_bits < steps + 64:
        raise ShiftWidthError(
            f"{steps} iterates need width_bits >= {steps + 64} to keep 64 significant bits, got {s.width_bits}"
        )
    orbit = [s]
    for _ in range(steps):
        s = s.doubled()
        orbit.append(s)
    return orbit


def required_width(masses: Sequence[float], steps: int) -> int:
    """Fixed-point width keeping 64 significant bits after ``steps`` generalized-shift iterates."""
    worst = max(-math.log2(m) for m in masses if m > 0)
    return int(math.ceil(steps * worst)) + 64


def cumulative_cuts(masses: Sequence) -> list[Fraction]:
    """Exact cumulative boundaries ``0 = F_0 < ... < F_n = 1`` of (float) masses."""
    fr = [Fraction(m) for m in masses]
    total = sum(fr)
    cuts = [Fraction(0)]
    for m in fr:
        cuts.append(cuts[-1] + m / total)
    return cuts


def generalized_shift(s: ShiftState, cuts: Sequence[Fraction]) -> tuple[int, ShiftState]:
    """One step of the piecewise affine shift: pick the bin of ``s``, stretch it onto [0, 1).

    With cuts (0, 1/2, 1) this is exactly the doubling map.
    """
    v = s.value
    for i in range(len(cuts) - 1):
        if cuts[i] <= v < cuts[i + 1]:
            if cuts[i + 1] - cuts[i] == Fraction(1, 2):
                return i, s.doubled()
            return i, s.stretch(cuts[i], cuts[i + 1] - cuts[i])
    raise ValueError(f"value {float(s)} not covered by cuts")


class ShiftMapFlow:
    """Reference pair flow for the Lyapunov estimator: the exact doubling map, one iterate per unit time."""

    dt = 1.0

    def __init__(self, seed_state: ShiftState):
        self.seed_state = seed_state
        self.orbit: list[float] = []

    def reset(self, particle0, delta0: float) -> None:
        self.a = self.seed_state
        self.b = self.a.offset(delta0)
        self.orbit = [float(self.a)]

    def step(self) -> None:
        self.a = self.a.doubled()
        self.b = self.b.doubled()
        self.orbit.append(float(self.a))

    def separation(self) -> float:
        scale = 1 << self.a.width_bits
        d = abs(self.b.numerator - self.a.numerator)
        return min(d, scale - d) / scale

    def renormalize(self, delta0: float) -> None:
        scale = 1 << self.a.width_bits
        diff = (self.b.numerator - self.a.numerator) % scale
        sign = 1.0 if diff < scale // 2 else -1.0
        self.b = self.a.offset(sign * delta0)
