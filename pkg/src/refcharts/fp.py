"""Fractional-polynomial basis over a positive scaled age axis.

Powers come from the standard eight-element set; power 0 means log(x), and a
repeated power multiplies the previous column by log(x), so the multiset
(1, 1) expands to [x, x log x] and (0, 0) to [log x, (log x)^2].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

STANDARD_POWERS = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0)
MAX_DEGREE = 3


@dataclass(frozen=True)
class PowerSet:
    """Canonical (sorted) multiset of fractional-polynomial powers.

    An empty PowerSet is the null basis: no age columns at all.
    """

    powers: tuple[float, ...] = ()

    def __post_init__(self):
        powers = tuple(sorted(float(p) for p in self.powers))
        if len(powers) > MAX_DEGREE:
            raise DomainError(f"degree {len(powers)} exceeds the maximum {MAX_DEGREE}")
        for p in powers:
            if p not in STANDARD_POWERS:
                raise DomainError(f"power {p} is not in the standard set {STANDARD_POWERS}")
        object.__setattr__(self, "powers", powers)

    @property
    def degree(self) -> int:
        return len(self.powers)

    def exponents(self) -> list[tuple[float, int]]:
        """Per column: (power a, log exponent b) so the column is x^a log(x)^b."""
        out = []
        prev = None
        rep = 0
        for p in self.powers:
            rep = rep + 1 if p == prev else 0
            prev = p
            if p == 0.0:
                out.append((0.0, rep + 1))
            else:
                out.append((p, rep))
        return out

    def labels(self) -> tuple[str, ...]:
        out = []
        for a, b in self.exponents():
            base = f"x^{a:g}" if a != 0.0 else ""
            logs = "*".join(["log(x)"] * b)
            if base and logs:
                out.append(f"{base}*{logs}")
            else:
                out.append(base or logs)
        return tuple(out)


@dataclass(frozen=True)
class AgeScaling:
    """Age-axis scaling stored with every fitted artifact.

    Fitting happens on x = age / divisor; the fitted range is kept so
    downstream consumers can flag extrapolation.
    """

    divisor: float = 10.0
    min_age: float = 18.0
    max_age: float = 120.0

    def __post_init__(self):
        if self.divisor <= 0:
            raise DomainError(f"divisor must be positive, got {self.divisor}")
        if not 0 < self.min_age <= self.max_age:
            raise DomainError(
                f"need 0 < min_age <= max_age, got [{self.min_age}, {self.max_age}]")

    def scale(self, age):
        return np.asarray(age, dtype=float) / self.divisor


def fp_design(x, powers: PowerSet) -> np.ndarray:
    """Design columns of the basis at positive scaled ages x, shape (n, degree)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("fractional-polynomial basis needs strictly positive x")
    if powers.degree == 0:
        return np.empty((x.size, 0))
    logx = np.log(x)
    cols = []
    prev = None
    col = None
    for p in powers.powers:
        if p == prev:
            col = col * logx
        else:
            col = logx.copy() if p == 0.0 else x ** p
            prev = p
        cols.append(col)
    return np.column_stack(cols)


def fp_derivative(powers: PowerSet, coeffs, x, divisor: float = 10.0):
    """Derivative of coeffs . basis(age / divisor) with respect to age."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size != powers.degree:
        raise DomainError(
            f"{powers.degree} powers need {powers.degree} coefficients, got {coeffs.size}")
    if divisor <= 0:
        raise DomainError(f"divisor must be positive, got {divisor}")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise DomainError("fractional-polynomial basis needs strictly positive x")
    logx = np.log(x)
    total = np.zeros_like(x)
    for c, (a, b) in zip(coeffs, powers.exponents()):
        if b == 0:
            d = a * x ** (a - 1.0)
        else:
            d = x ** (a - 1.0) * logx ** (b - 1) * (a * logx + b)
        total += c * d
    total /= divisor
    return float(total[0]) if scalar else total


def candidate_power_sets(max_degree: int = 2, include_null: bool = True) -> list[PowerSet]:
    """All power multisets up to max_degree, optionally with the null basis."""
    from itertools import combinations_with_replacement

    if not 0 <= max_degree <= MAX_DEGREE:
        raise DomainError(f"max_degree must lie in [0, {MAX_DEGREE}]")
    out = [PowerSet()] if include_null else []
    for d in range(1, max_degree + 1):
        out.extend(PowerSet(c) for c in combinations_with_replacement(STANDARD_POWERS, d))
    return out
