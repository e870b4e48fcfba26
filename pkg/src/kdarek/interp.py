"""Newton-form interpolation and the distance-aware interpolation/spline error bounds.

All helpers here are pure functions over small immutable windows of knots. The
bound machinery in :mod:`kdarek.bounds` calls them once per feature column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateKnots, EmptyKnots, LengthMismatch, TooFewKnots

#: relative separation below which two knots count as duplicates
KNOT_SEPARATION_EPS = 1e-10


@dataclass(frozen=True)
class KnotWindow:
    """``order + 1`` strictly increasing knots with paired values."""

    knots: np.ndarray
    values: np.ndarray
    order: int = field(default=-1)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).copy()
        values = np.asarray(self.values, dtype=float).copy()
        if knots.shape != values.shape or knots.ndim != 1:
            raise LengthMismatch(f"knots {knots.shape} vs values {values.shape}")
        if knots.size == 0:
            raise EmptyKnots("a window needs at least one knot")
        order = knots.size - 1 if self.order < 0 else int(self.order)
        if order + 1 != knots.size:
            raise LengthMismatch(f"order {order} needs {order + 1} knots, got {knots.size}")
        _check_separation(knots)
        knots.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "order", order)


@dataclass(frozen=True)
class LipschitzOrderK:
    """Bound on the change rate of the (order-1)-th derivative."""

    order: int
    value: float

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not self.value >= 0:
            raise ValueError(f"Lipschitz constant must be nonnegative, got {self.value}")


@dataclass(frozen=True)
class NewtonPoly:
    window: KnotWindow
    coeffs: np.ndarray

    @classmethod
    def fit(cls, window: KnotWindow) -> "NewtonPoly":
        coeffs = divided_differences(window.knots, window.values)
        coeffs.flags.writeable = False
        return cls(window, coeffs)

    def __call__(self, x):
        return newton_eval(self, x)


def _check_separation(knots):
    if knots.size < 2:
        return
    gaps = np.diff(knots)
    span = knots[-1] - knots[0]
    if np.any(gaps <= 0) or np.any(gaps < KNOT_SEPARATION_EPS * span):
        raise DuplicateKnots(f"knots must be strictly increasing and separated: {knots}")


def divided_differences(knots, values) -> np.ndarray:
    """Top row of the divided-difference table.

    Returns ``c`` with ``p(x) = c[0] + c[1](x-t0) + c[2](x-t0)(x-t1) + ...``.
    """
    t = np.asarray(knots, dtype=float)
    c = np.array(values, dtype=float)
    if t.shape != c.shape or t.ndim != 1:
        raise LengthMismatch(f"knots {t.shape} vs values {c.shape}")
    if t.size == 0:
        raise EmptyKnots("need at least one knot")
    _check_separation(t)
    n = t.size
    # in-place column sweep of the triangular table
    for j in range(1, n):
        c[j:] = (c[j:] - c[j - 1:-1]) / (t[j:] - t[: n - j])
    return c


def newton_eval(poly: NewtonPoly, x):
    """Nested (Horner) evaluation of a Newton-form polynomial; extrapolates freely."""
    t = poly.window.knots
    c = poly.coeffs
    x = np.asarray(x, dtype=float)
    y = np.full_like(x, c[-1])
    for i in range(c.size - 2, -1, -1):
        y = y * (x - t[i]) + c[i]
    return y if y.ndim else float(y)


def select_interval(sorted_knots, x):
    """Index ``j`` with ``knots[j] <= x < knots[j+1]``, clamped to the edge intervals."""
    knots = np.asarray(sorted_knots, dtype=float)
    if knots.size < 2:
        raise EmptyKnots("need at least two knots to define an interval")
    j = np.searchsorted(knots, x, side="right") - 1
    j = np.clip(j, 0, knots.size - 2)
    return j if np.ndim(j) else int(j)


def window_for(sorted_knots, j: int, k: int) -> range:
    """The ``k + 1`` knots nearest to the midpoint of interval ``j``.

    Grows outward from the interval, taking whichever neighbour is closer to the
    midpoint (ties go to the lower index). The result is contiguous and always
    contains both ends of interval ``j`` when ``k >= 1``.
    """
    knots = np.asarray(sorted_knots, dtype=float)
    m = knots.size
    if m < k + 1:
        raise TooFewKnots(f"order {k} needs {k + 1} knots, have {m}")
    if m < 2:
        return range(0, 1)
    j = min(max(int(j), 0), m - 2)
    mid = 0.5 * (knots[j] + knots[j + 1])
    # half-open [a, b); knot j goes first so the midpoint tie never depends on rounding
    a, b = j, j + 1
    for _ in range(k):
        if a > 0 and (b >= m or mid - knots[a - 1] <= knots[b] - mid):
            a -= 1
        else:
            b += 1
    return range(a, b)


def interpolation_error_bound(x, window: KnotWindow, lipschitz: LipschitzOrderK):
    """Worst-case error of the degree-``order`` interpolant through ``window`` at ``x``."""
    k = window.order
    if lipschitz.order != k + 1:
        raise ValueError(f"need an order-{k + 1} Lipschitz constant, got order {lipschitz.order}")
    x = np.asarray(x, dtype=float)
    prod = np.ones_like(x)
    for t in window.knots:
        prod = prod * (x - t)
    u = lipschitz.value / math.factorial(k + 1) * np.abs(prod)
    return u if u.ndim else float(u)


def spline_error_bound(x, window: KnotWindow, lipschitz: LipschitzOrderK):
    """Interpolation bound plus the magnitude of the residual interpolant.

    ``window.values`` are signed residuals at the window knots; the absolute
    value is taken after evaluating their Newton interpolant.
    """
    resid = NewtonPoly.fit(window)
    u = interpolation_error_bound(x, window, lipschitz) + np.abs(newton_eval(resid, x))
    return u if np.ndim(u) else float(u)
