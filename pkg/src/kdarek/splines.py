"""Clamped B-spline bases (Cox-de Boor) with polynomial extrapolation past the ends.

Inputs outside ``[t[p], t[-p-1]]`` are evaluated on the first/last polynomial
piece, so every spline built here is a single polynomial on each interval
between consecutive breakpoints and on the two unbounded edge intervals.
"""

from __future__ import annotations

import numpy as np


def coarse_breaks(grid, stride: int = 1) -> np.ndarray:
    """Every ``stride``-th grid point, always keeping both ends."""
    grid = np.asarray(grid, dtype=float)
    idx = list(range(0, grid.size, stride))
    if idx[-1] != grid.size - 1:
        idx.append(grid.size - 1)
    return grid[idx]


def clamped_knots(breaks, degree: int) -> np.ndarray:
    breaks = np.asarray(breaks, dtype=float)
    return np.concatenate([np.repeat(breaks[0], degree), breaks, np.repeat(breaks[-1], degree)])


def n_basis(n_breaks: int, degree: int) -> int:
    return n_breaks + degree - 1


def find_span(t, degree: int, x) -> np.ndarray:
    """Index ``i`` in ``[p, n-1]`` with ``t[i] <= x < t[i+1]``, clamped at both ends."""
    n = t.size - degree - 1
    span = np.searchsorted(t, x, side="right") - 1
    return np.clip(span, degree, n - 1)


def _cox_de_boor(knot, degree, span, x):
    """Triangular recurrence; returns the active functions of ``degree`` and of ``degree - 1``."""
    N = [np.ones_like(x)]
    low = N
    left, right = [None], [None]
    for j in range(1, degree + 1):
        left.append(x - knot(span + 1 - j))
        right.append(knot(span + j) - x)
        saved = 0.0
        nxt = []
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            nxt.append(saved + right[r + 1] * temp)
            saved = left[j - r] * temp
        nxt.append(saved)
        low, N = N, nxt
    return N, low


def basis_funs(t, degree: int, span, x) -> np.ndarray:
    """Values of the ``degree + 1`` basis functions that are active on ``span``.

    Vectorised form of the triangular Cox-de Boor recurrence. Column ``r``
    holds basis function ``span - degree + r``. Evaluating at ``x`` outside
    the span gives the span's polynomial continued, which is how the edge
    pieces extrapolate.
    """
    x = np.asarray(x, dtype=float)
    N, _ = _cox_de_boor(t.__getitem__, degree, np.asarray(span), x)
    return np.stack(N, axis=1)


def _inv_spans(t, degree):
    """``degree / (t[b + degree] - t[b])`` for every b, zero where the span is empty."""
    d = t[degree:] - t[: t.size - degree]
    out = np.zeros_like(d)
    np.divide(degree, d, out=out, where=d > 0)
    return out


def _fill(t, degree, x, span, base, Bf, dBf=None):
    """Write the active basis values of each point into flat views at ``base + span - degree + r``."""
    N, low = _cox_de_boor(t.__getitem__, degree, span, x)
    first = span - degree
    pos = base + first
    for r in range(degree + 1):
        Bf[pos + r] = N[r]
    if dBf is None or degree == 0:
        return
    # derivative from the degree-1 functions span-degree+1 .. span (also valid when extrapolating)
    inv = _inv_spans(t, degree)
    for r in range(degree + 1):
        term = np.zeros(x.size)
        if r >= 1:
            term += low[r - 1] * inv[first + r]
        if r <= degree - 1:
            term -= low[r] * inv[first + r + 1]
        dBf[pos + r] = term


def design_matrix(t, degree: int, x, deriv: bool = False):
    """Dense basis matrix ``B[n, b]``; with ``deriv`` also returns ``dB/dx``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    nb = t.size - degree - 1
    B = np.zeros((x.size, nb))
    dB = np.zeros((x.size, nb)) if deriv else None
    _fill(t, degree, x, find_span(t, degree, x), np.arange(x.size) * nb, B.reshape(-1),
          None if dB is None else dB.reshape(-1))
    return (B, dB) if deriv else B


def design_tensor(T, degree: int, X, deriv: bool = False):
    """Design matrices of every column at once: ``B[n, c, b]`` for column ``c`` of ``X`` on knots ``T[c]``.

    All rows of ``T`` must have the same length.
    """
    T = np.asarray(T, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, c = X.shape
    nb = T.shape[1] - degree - 1
    B = np.zeros((n, c, nb))
    dB = np.zeros((n, c, nb)) if deriv else None
    row = np.arange(n) * (c * nb)
    for i, t in enumerate(T):
        _fill(t, degree, X[:, i], find_span(t, degree, X[:, i]), row + i * nb, B.reshape(-1),
              None if dB is None else dB.reshape(-1))
    return (B, dB) if deriv else B
