"""Knot selection, Lipschitz budgeting and the distance-aware error bound of the network.

The bound for output ``r`` at a query ``x`` is

    u_r = sum_i [ubar(xi_i; kappa_i) + |P[e_r / q](xi_i)|] + L_sp * L_MLP * sum_p |x_p - tau*_p|

where ``xi`` are the features of ``x``, ``kappa_i`` the sorted feature knots of
column ``i`` and ``tau*_p`` the nearest selected sample along input ``p``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, DuplicateKnots, TooFewSamples
from .interp import (
    KnotWindow,
    LipschitzOrderK,
    NewtonPoly,
    interpolation_error_bound,
    newton_eval,
    select_interval,
    spline_error_bound,
    window_for,
)
from .interp import KNOT_SEPARATION_EPS
from .netcore import sorted_knot_columns


@dataclass(frozen=True)
class KnotTriple:
    """Selected samples ``T`` (m_k x d), targets ``Y`` (m_k x m) and, once filled, feature knots.

    ``K[:, c] = F[perms[:, c], c]`` where ``F`` are the unsorted features of
    the rows of ``T``. ``E = f_hat(T) - Y`` holds signed residuals.
    """

    T: np.ndarray
    Y: np.ndarray
    indices: np.ndarray | None = None
    F: np.ndarray | None = None
    K: np.ndarray | None = None
    perms: np.ndarray | None = None
    E: np.ndarray | None = None

    @property
    def m_k(self):
        return self.T.shape[0]

    @property
    def has_features(self):
        return self.K is not None


@dataclass(frozen=True)
class LipschitzBudget:
    L_f: float
    d: int
    n_layers: int
    N_sp: int
    L_h: float
    L_mlp: float
    L_sp: float
    L_kp1: LipschitzOrderK


@dataclass
class ErrorBound:
    """Per-output bound with its decomposition ``total = spline_term + L_sp * mlp_term``."""

    total: np.ndarray
    spline_term: np.ndarray
    mlp_term: float
    nearest_knot_ids: np.ndarray
    f_hat: np.ndarray | None = None
    features: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# knot selection


def _farthest_point(X, m_k, seeds=None):
    if seeds is None:
        centroid = X.mean(axis=0)
        seeds = [int(np.argmin(np.linalg.norm(X - centroid, axis=1)))]
    chosen = list(seeds)[:m_k]
    dist = np.min([np.linalg.norm(X - X[i], axis=1) for i in chosen], axis=0)
    while len(chosen) < m_k:
        nxt = int(np.argmax(dist))  # first index wins ties
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    return np.array(chosen)


def _extremes_then_spread(X, m_k):
    """Per-coordinate argmin/argmax first, then farthest-point on standardised columns."""
    seeds = []
    for j in range(X.shape[1]):
        for i in (int(np.argmin(X[:, j])), int(np.argmax(X[:, j]))):
            if i not in seeds:
                seeds.append(i)
    if len(seeds) > m_k:
        raise TooFewSamples(f"need m_k >= {len(seeds)} to cover every coordinate's extremes")
    scale = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    return _farthest_point(Z, m_k, seeds)


def select_knots(X, Y, m_k: int, strategy: str = "auto") -> KnotTriple:
    """Pick ``m_k`` training samples to anchor the bound.

    ``quantile`` (the default for 1-D inputs) takes the samples at uniform
    ranks of ``x``, so both extremes are included. ``farthest-point`` (default
    for d > 1) starts from the sample nearest the centroid and greedily adds
    the sample farthest from everything chosen so far. ``extremes`` seeds the
    greedy pass with every coordinate's smallest and largest sample and
    measures distance on standardised columns, so each per-coordinate knot
    grid spans the data.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    n, d = X.shape
    if m_k < 1 or n < m_k:
        raise TooFewSamples(f"need at least {m_k} samples, have {n}")
    if strategy == "auto":
        strategy = "quantile" if d == 1 else "farthest-point"
    if strategy == "quantile":
        if d != 1:
            raise DimensionMismatch("quantile selection is for 1-D inputs")
        order = np.argsort(X[:, 0], kind="stable")
        idx = order[np.round(np.linspace(0, n - 1, m_k)).astype(int)]
    elif strategy == "farthest-point":
        idx = _farthest_point(X, m_k)
    elif strategy == "extremes":
        idx = _extremes_then_spread(X, m_k)
    else:
        raise ValueError(f"unknown knot selection strategy {strategy!r}")
    return KnotTriple(T=X[idx].copy(), Y=Y[idx].copy(), indices=idx)


def compute_feature_knots(model, triple: KnotTriple) -> KnotTriple:
    """Fill feature knots and residuals by passing the selected samples through ``model``."""
    f_hat, F = model.forward(triple.T)
    K, perms = sorted_knot_columns(F)
    E = f_hat - triple.Y
    return replace(triple, F=F, K=K, perms=perms, E=E)


# ---------------------------------------------------------------------------
# budget and bound terms


def make_budget(L_f: float, d: int, L_layers: int, N_sp: int, L_kp1: float, order: int = 3) -> LipschitzBudget:
    """Split ``L_f`` equally over the ``L_layers`` MLP layers and the spline layer."""
    if not (L_f > 0 and d > 0 and L_layers > 0 and N_sp > 0):
        raise ValueError("budget inputs must be positive")
    L_h = (L_f / d) ** (1.0 / (L_layers + 1))
    return LipschitzBudget(
        L_f=float(L_f),
        d=int(d),
        n_layers=int(L_layers),
        N_sp=int(N_sp),
        L_h=L_h,
        L_mlp=L_h ** L_layers,
        L_sp=L_h / N_sp,
        L_kp1=LipschitzOrderK(order + 1, float(L_kp1)),
    )


def budget_for(model, L_f: float, L_kp1: float) -> LipschitzBudget:
    return make_budget(L_f, model.d, model.mlps[0].n_layers, model.q, L_kp1, model.order)


def mlp_block_error(x, triple: KnotTriple, budget: LipschitzBudget, caps=None):
    """``L_MLP * sum_p |x_p - tau*_p|`` and the row ids of the nearest samples per dimension.

    ``caps`` optionally gives a distinct Lipschitz constant per input dimension.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    T = triple.T
    if x.size != T.shape[1]:
        raise DimensionMismatch(f"query has {x.size} dims, knots have {T.shape[1]}")
    dist = np.abs(T - x[None, :])
    ids = np.argmin(dist, axis=0)
    per_dim = dist[ids, np.arange(T.shape[1])]
    lip = np.full(T.shape[1], budget.L_mlp) if caps is None else np.asarray(caps, dtype=float)
    return float(np.sum(lip * per_dim)), ids


def distribute_residuals(E, q: int) -> np.ndarray:
    """Equal split of every residual column over the ``q`` splines of its group: shape ``(q, m_k, m)``."""
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if q < 1:
        raise ValueError("q must be >= 1")
    return np.broadcast_to(E / q, (q,) + E.shape).copy()


def _column_bound(z, knots, values, lip):
    """Spline bound along one sorted knot column for the points ``z`` (vectorised over windows)."""
    z = np.atleast_1d(z)
    out = np.empty(z.size)
    k = lip.order - 1
    js = select_interval(knots, z) if knots.size >= 2 else np.zeros(z.size, dtype=int)
    for j in np.unique(js):
        sel = js == j
        win = window_for(knots, j, k)
        out[sel] = spline_error_bound(z[sel], KnotWindow(knots[win], values[win]), lip)
    return out


def _column_bound_multi(z, knots, values, lip):
    """As :func:`_column_bound` for a matrix of residual columns; returns ``(len(z), n_cols)``.

    Windows are stacked and their divided differences swept together; the
    arithmetic matches :func:`interp.spline_error_bound` term for term.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    values = np.asarray(values, dtype=float)
    k = lip.order - 1
    js = select_interval(knots, z) if knots.size >= 2 else np.zeros(z.size, dtype=int)
    uniq, inv = np.unique(js, return_inverse=True)
    wins = np.array([list(window_for(knots, j, k)) for j in uniq])
    T = knots[wins]
    gaps = np.diff(T, axis=1)
    if np.any(gaps <= 0) or np.any(gaps < KNOT_SEPARATION_EPS * (T[:, -1:] - T[:, :1])):
        raise DuplicateKnots(f"knot column is not strictly increasing and separated: {knots}")
    C = values[wins].copy()  # (windows, k+1, n_cols)
    n = k + 1
    for j in range(1, n):
        C[:, j:] = (C[:, j:] - C[:, j - 1:-1]) / (T[:, j:] - T[:, : n - j])[:, :, None]
    Tz, Cz = T[inv], C[inv]
    prod = np.ones(z.size)
    for i in range(n):
        prod = prod * (z - Tz[:, i])
    ubar = lip.value / math.factorial(n) * np.abs(prod)
    y = Cz[:, -1].copy()
    for i in range(n - 2, -1, -1):
        y = y * (z - Tz[:, i])[:, None] + Cz[:, i]
    return ubar[:, None] + np.abs(y)


def spline_block_error(xi, triple: KnotTriple, shares, budget: LipschitzBudget, r=None):
    """Sum over feature columns of the per-spline bound for output group ``r`` (all groups if None).

    Residual shares are reordered with each column's sort permutation so a
    residual stays paired with the knot produced by its own sample.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    Xi = xi[None, :] if single else xi
    cols = slice(None) if r is None else slice(r, r + 1)
    total = 0.0
    for i in range(triple.K.shape[1]):
        vals = shares[i][triple.perms[:, i], cols]
        total = total + _column_bound_multi(Xi[:, i], triple.K[:, i], vals, budget.L_kp1)
    if r is not None:
        total = total[:, 0]
        return float(total[0]) if single else total
    return total[0] if single else total


def total_bound(model, x, triple: KnotTriple, budget: LipschitzBudget) -> ErrorBound:
    """Full bound at one query point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    f_hat, xi = model.forward(x if model.d > 1 else x[:1].reshape(1, 1))
    f_hat, xi = np.atleast_2d(f_hat)[0], np.atleast_2d(xi)[0]
    shares = distribute_residuals(triple.E, model.q)
    u_sp = spline_block_error(xi, triple, shares, budget)
    u_mlp, ids = mlp_block_error(x, triple, budget)
    return ErrorBound(u_sp + budget.L_sp * u_mlp, u_sp, u_mlp, ids, f_hat, xi)


def total_bound_batch(model, X, triple: KnotTriple, budget: LipschitzBudget):
    """Vectorised bound over rows of ``X``: returns ``(f_hat, total, spline_term, mlp_term)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if model.d == 1 else X[None, :]
    f_hat, xi = model.forward(X)
    shares = distribute_residuals(triple.E, model.q)
    u_sp = spline_block_error(xi, triple, shares, budget)
    dist = np.abs(X[:, None, :] - triple.T[None, :, :]).min(axis=1)
    u_mlp = budget.L_mlp * dist.sum(axis=1)
    return f_hat, u_sp + budget.L_sp * u_mlp[:, None], u_sp, u_mlp


# ---------------------------------------------------------------------------
# two-spline-layer baseline


@dataclass(frozen=True)
class DarekBudget:
    """Per-layer constants for the two-layer bound.

    ``L1_out`` scales the first layer's error into the second; ``L_kp1`` are
    the order-(k+1) constants of each layer.
    """

    L1_out: float
    L_kp1_in: LipschitzOrderK
    L_kp1_out: LipschitzOrderK


def darek_budget(L_f: float, L_kp1: float, order: int = 3) -> DarekBudget:
    """Geometric split of both constants over the two spline layers."""
    return DarekBudget(
        L1_out=float(np.sqrt(L_f)),
        L_kp1_in=LipschitzOrderK(order + 1, float(np.sqrt(L_kp1))),
        L_kp1_out=LipschitzOrderK(order + 1, float(np.sqrt(L_kp1))),
    )


def darek_two_layer_bound(model, X, triple: KnotTriple, budget: DarekBudget):
    """Propagated bound ``u_h2(h1(x); h1(T)) + L1_out * sum_i u_h1,i(x; T)`` for rows of ``X``.

    The first layer has no targets of its own, so its residual term is zero and
    only the interpolation part remains; every hidden unit shares the same
    input-space term. ``triple`` must come from :func:`compute_feature_knots`
    on the baseline (its features are the first-layer outputs). Returns
    ``(f_hat, total, out_term, in_term)``.
    """
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, model.d) if X.ndim < 2 else X
    f_hat, h1 = model.forward(X)
    u_in = np.zeros(X.shape[0])
    for p in range(model.d):
        t_col = model.layer1.grids[p]  # sorted knot inputs, jittered where they coincide
        u_in += _column_bound(X[:, p], t_col, np.zeros_like(t_col), budget.L_kp1_in)
    n_hidden = h1.shape[1]
    shares = distribute_residuals(triple.E, n_hidden)
    u_out = np.zeros((X.shape[0], model.m))
    for i in range(n_hidden):
        vals = shares[i][triple.perms[:, i], :]
        u_out += _column_bound_multi(h1[:, i], triple.K[:, i], vals, budget.L_kp1_out)
    in_term = n_hidden * u_in  # 1^T u_h1 with identical per-unit terms
    return f_hat, u_out + budget.L1_out * in_term[:, None], u_out, in_term


# ---------------------------------------------------------------------------
# export


BOUND_CSV_HEADER_BASE = ["x", "f_hat", "u_total", "u_sp", "u_mlp", "nearest"]


def bound_rows(x, bound: ErrorBound):
    """CSV-ready rows for one query; multi-output bounds give one row per output."""
    x = np.atleast_1d(x)
    xs = ";".join(repr(float(v)) for v in x)
    ids = ";".join(str(int(i)) for i in bound.nearest_knot_ids)
    return [
        [xs, repr(float(bound.f_hat[r])), repr(float(bound.total[r])), repr(float(bound.spline_term[r])),
         repr(float(bound.mlp_term)), ids]
        for r in range(bound.total.size)
    ]


def bounds_to_csv(queries, bounds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOUND_CSV_HEADER_BASE)
    for x, b in zip(queries, bounds):
        w.writerows(bound_rows(x, b))
    return buf.getvalue()
