"""Comparison models: exact GP regression, the two-spline-layer network and its deep ensemble."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch, NotPD
from .netcore import SplineBlock, TrainConfig, sorted_knot_columns, train

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
GP_GRID = {"lengthscale": (0.5, 1.0, 2.0, 4.0), "signal_std": (1.0, 5.0, 10.0), "noise_std": (1e-4, 1e-2)}


# ---------------------------------------------------------------------------
# Gaussian process


def se_kernel(A, B, lengthscale, signal_std):
    A = np.asarray(A, dtype=float).reshape(len(A), -1)
    B = np.asarray(B, dtype=float).reshape(len(B), -1)
    sq = np.sum(A ** 2, 1)[:, None] + np.sum(B ** 2, 1)[None, :] - 2.0 * A @ B.T
    return signal_std ** 2 * np.exp(-0.5 * np.maximum(sq, 0.0) / lengthscale ** 2)


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal_std: float
    noise_std: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    log_marginal: float

    kind = "gp"


def gp_fit(X, y, lengthscale, signal_std, noise_std) -> GpModel:
    """Exact GP posterior with a squared-exponential kernel.

    Jitter is escalated from 0 through 1e-10 ... 1e-6 until the Cholesky
    factorisation succeeds.
    """
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise DimensionMismatch("X and y must be nonempty with matching length")
    if min(lengthscale, signal_std) <= 0 or noise_std < 0:
        raise ValueError("hyperparameters must be positive")
    K = se_kernel(X, X, lengthscale, signal_std) + noise_std ** 2 * np.eye(len(y))
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(y)))
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise NotPD(f"covariance not positive definite even with jitter {JITTERS[-1]}")
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * math.log(2 * math.pi)
    return GpModel(X, y, lengthscale, signal_std, noise_std, L, alpha, jitter, float(lml))


def gp_predict(model: GpModel, Xs):
    """Posterior mean, latent std and the 3-sigma interval ``(lo, hi)``."""
    Xs = np.asarray(Xs, dtype=float).reshape(len(np.atleast_1d(Xs)), -1)
    Ks = se_kernel(Xs, model.X, model.lengthscale, model.signal_std)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = model.signal_std ** 2 - np.sum(v * v, axis=0)
    std = np.sqrt(np.maximum(var, 0.0))
    return mean, std, (mean - 3 * std, mean + 3 * std)


def gp_fit_grid(X, y, grid=None) -> GpModel:
    """Fit every hyperparameter combination and keep the highest log marginal likelihood."""
    grid = GP_GRID if grid is None else grid
    best = None
    for ell, sf, sn in itertools.product(grid["lengthscale"], grid["signal_std"], grid["noise_std"]):
        try:
            m = gp_fit(X, y, ell, sf, sn)
        except NotPD:
            continue
        if best is None or m.log_marginal > best.log_marginal:
            best = m
    if best is None:
        raise NotPD("no hyperparameter setting gave a positive definite covariance")
    return best


# ---------------------------------------------------------------------------
# two spline layers


class DarekModel:
    """Input spline layer ``d -> h`` followed by an output spline layer ``h -> m``.

    Layer-1 grids are the sorted selected inputs of each coordinate; layer-2
    grids are the sorted layer-1 outputs of those same samples, refreshed by
    :meth:`regrid`.
    """

    kind = "darek"

    def __init__(self, layer1: SplineBlock, layer2: SplineBlock, knot_inputs, knot_targets=None):
        self.layer1 = layer1
        self.layer2 = layer2
        self.knot_inputs = np.asarray(knot_inputs, dtype=float).reshape(-1, layer1.n_in)
        self.knot_targets = None if knot_targets is None else np.asarray(knot_targets, dtype=float).reshape(
            self.knot_inputs.shape[0], -1
        )

    @classmethod
    def build(cls, knot_inputs, knot_targets, hidden=5, n_out=1, order=3, stride=2, seed=0):
        knot_inputs = np.asarray(knot_inputs, dtype=float)
        if knot_inputs.ndim == 1:
            knot_inputs = knot_inputs[:, None]
        rng = np.random.default_rng(seed)
        grids, _ = sorted_knot_columns(knot_inputs)
        layer1 = SplineBlock(knot_inputs.shape[1], hidden, order, grids.T, stride=stride, rng=rng, init_scale=1.0)
        h, _ = sorted_knot_columns(layer1.forward(knot_inputs))
        layer2 = SplineBlock(hidden, n_out, order, h.T, stride=stride, rng=rng)
        return cls(layer1, layer2, knot_inputs, knot_targets)

    @property
    def d(self):
        return self.layer1.n_in

    @property
    def q(self):
        return self.layer1.n_out

    @property
    def m(self):
        return self.layer2.n_out

    @property
    def order(self):
        return self.layer2.order

    def params(self):
        return self.layer1.params() + self.layer2.params()

    def n_params(self):
        return sum(p.size for p in self.params())

    def _as_batch(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return x, False
        if self.d == 1:
            return x.reshape(-1, 1), x.ndim == 0
        return x.reshape(1, -1), True

    def forward(self, x):
        """``(f, h1)``; batch in, batch out."""
        X, single = self._as_batch(x)
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"model expects {self.d} inputs, got {X.shape[1]}")
        h = self.layer1.forward(X)
        f = self.layer2.forward(h)
        return (f[0], h[0]) if single else (f, h)

    def predict(self, x):
        return self.forward(x)[0]

    def loss_and_grads(self, X, Y):
        X, _ = self._as_batch(X)
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        h, mats1 = self.layer1.forward(X, cache=True)
        f, mats2 = self.layer2.forward(h, cache=True)
        r = f - Y
        g = 2.0 * r / r.size
        gC2, gh = self.layer2.backward(mats2, g)
        gC1, _ = self.layer1.backward(mats1, gh)
        return float(np.mean(r ** 2)), [gC1, gC2]

    def normalize(self):
        pass

    def regrid(self):
        h, _ = sorted_knot_columns(self.layer1.forward(self.knot_inputs))
        self.layer2.set_grids(h.T)


def darek_train(X, Y, knot_inputs, knot_targets=None, cfg: TrainConfig | None = None, hidden=5, order=3, stride=2):
    cfg = TrainConfig() if cfg is None else cfg
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    knot_inputs = np.asarray(knot_inputs, dtype=float)
    model = DarekModel.build(knot_inputs, knot_targets, hidden, Y.shape[1], order, stride, seed=cfg.seed)
    return train(model, X, Y, cfg)


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class EnsembleModel:
    members: list
    seeds: list

    kind = "ensemble"

    def n_params(self):
        return sum(m.n_params() for m in self.members)


def _train_member(args):
    X, Y, knot_inputs, cfg, hidden, order, stride = args
    return darek_train(X, Y, knot_inputs, None, cfg, hidden, order, stride)[0]


def ensemble_train(X, Y, knot_inputs, cfg: TrainConfig | None = None, n_members=10, hidden=5, order=3, stride=2,
                   seed_offset=1000, jobs=1, seeds=None) -> EnsembleModel:
    """Independently trained two-layer spline networks; member ``i`` uses seed ``cfg.seed + seed_offset * i``."""
    cfg = TrainConfig() if cfg is None else cfg
    if n_members < 2 and seeds is None:
        raise ValueError("an ensemble needs at least two members")
    if seeds is None:
        seeds = [cfg.seed + seed_offset * i for i in range(n_members)]
    jobs_args = [(X, Y, knot_inputs, TrainConfig(**{**cfg.__dict__, "seed": s}), hidden, order, stride) for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            members = list(ex.map(_train_member, jobs_args))
    else:
        members = [_train_member(a) for a in jobs_args]
    return EnsembleModel(members, list(seeds))


def ensemble_predict(model: EnsembleModel, x):
    """Mean, std over members and the 3-sigma interval, each of shape ``(n, m)``."""
    preds = np.stack([m.predict(x) for m in model.members])
    mean = preds.mean(axis=0)
    std = preds.std(axis=0)
    return mean, std, (mean - 3 * std, mean + 3 * std)
