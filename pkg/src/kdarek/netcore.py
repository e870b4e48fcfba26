"""Per-dimension spectrally normalised MLPs feeding a summed spline output block.

The network maps ``x in R^d`` to features ``xi = sum_p mlp_p(x_p) in R^q`` and
then to outputs ``f_r = sum_i s_{r,i}(xi_i)``. Everything is plain numpy with
hand-written backward passes so gradients can be checked against finite
differences.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateColumn, DimensionMismatch, NoConvergence, NonFiniteLoss
from .interp import KNOT_SEPARATION_EPS
from .splines import clamped_knots, coarse_breaks, design_matrix, design_tensor, n_basis

OPTIMIZERS = ("gd", "adam")


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.1
    optimizer: str = "adam"
    seed: int = 0
    knot_regrid_period: int = 1
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.knot_regrid_period < 0:
            raise ValueError("knot_regrid_period must be >= 0")


# ---------------------------------------------------------------------------
# spectral normalisation


def power_iteration(W, v=None, tol=1e-6, max_iter=100):
    """Largest singular value of ``W`` by power iteration on ``W^T W``.

    Returns ``(sigma, v, converged)`` where ``v`` is the right singular vector
    estimate, suitable for warm-starting the next call.
    """
    W = np.asarray(W, dtype=float)
    if v is None:
        v = np.ones(W.shape[1])
    v = v / (np.linalg.norm(v) or 1.0)
    sigma = 0.0
    for _ in range(max_iter):
        wv = W @ v
        s_new = np.linalg.norm(wv)
        if s_new == 0.0:
            return 0.0, v, True
        u = W.T @ (wv / s_new)
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return float(s_new), v, True
        v = u / norm_u
        # norm_u = ||W^T u|| is a tighter estimate than ||W v||
        s_new = norm_u
        if abs(s_new - sigma) <= tol * s_new:
            return float(s_new), v, True
        sigma = s_new
    return float(sigma), v, False


def sigma_max(W, v=None, tol=1e-6, max_iter=100) -> float:
    sigma, _, ok = power_iteration(W, v, tol, max_iter)
    if not ok:
        warnings.warn(f"power iteration did not converge in {max_iter} steps", NoConvergence)
    return sigma


def spectral_normalize(W, cap: float, sigma: float | None = None):
    """Rescale ``W`` to spectral norm ``cap`` when it exceeds it; otherwise return it unchanged."""
    if not cap > 0:
        raise ValueError("cap must be > 0")
    W = np.asarray(W, dtype=float)
    if sigma is None:
        sigma = sigma_max(W)
    if cap < sigma:
        return cap * W / sigma
    return W


# ---------------------------------------------------------------------------
# blocks


class SnrMlp:
    """ReLU MLP ``1 -> ... -> q`` whose layers are spectrally capped.

    ``widths`` includes the input width (always 1), e.g. ``[1, 5]`` is a single
    linear layer and ``[1, 5, 5]`` has one ReLU hidden layer.
    """

    def __init__(self, widths, caps, rng=None, weights=None, biases=None):
        widths = list(widths)
        if widths[0] != 1 or len(widths) < 2:
            raise ValueError(f"SNR-MLP widths must start at 1 and have >= 1 layer, got {widths}")
        self.widths = widths
        n_layers = len(widths) - 1
        self.caps = [float(c) for c in (caps if np.ndim(caps) else [caps] * n_layers)]
        if len(self.caps) != n_layers:
            raise ValueError("one cap per layer")
        rng = np.random.default_rng(0) if rng is None else rng
        if weights is None:
            weights, biases = [], []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
                biases.append(rng.uniform(-bound, bound, fan_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self._pvec = [rng.normal(size=w.shape[1]) for w in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def out_dim(self):
        return self.widths[-1]

    @property
    def lipschitz_bound(self):
        return float(np.prod(self.caps))

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def normalize(self):
        for l, W in enumerate(self.weights):
            sigma, self._pvec[l], ok = power_iteration(W, self._pvec[l])
            if not ok:
                warnings.warn(f"layer {l}: power iteration hit its cap", NoConvergence)
            if self.caps[l] < sigma:
                W *= self.caps[l] / sigma  # in place: optimisers hold references

    def forward(self, x, cache=False):
        a = np.asarray(x, dtype=float).reshape(-1, 1)
        acts = [a]
        pre = []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            pre.append(z)
            a = np.maximum(z, 0.0) if l < self.n_layers - 1 else z
            acts.append(a)
        return (a, (acts, pre)) if cache else a

    def backward(self, cache, grad_out):
        acts, pre = cache
        g = grad_out
        gW = [None] * self.n_layers
        gb = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            if l < self.n_layers - 1:
                g = g * (pre[l] > 0)
            gW[l] = g.T @ acts[l]
            gb[l] = g.sum(axis=0)
            g = g @ self.weights[l]
        return gW, gb, g[:, 0]


class SplineBlock:
    """``n_out`` groups of ``n_in`` univariate splines, summed within each group.

    Spline ``(r, i)`` reads input ``i``. All splines on input ``i`` share the
    knot grid ``grids[i]``; their breakpoints are every ``stride``-th grid point
    (ends always included), so each spline is one polynomial of degree
    ``order`` on every grid interval.
    """

    def __init__(self, n_in, n_out, order, grids, stride=2, coeffs=None, rng=None, init_scale=0.1):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.order = int(order)
        self.stride = int(stride)
        grids = np.array(grids, dtype=float)
        if grids.ndim != 2 or grids.shape[0] != self.n_in:
            raise DimensionMismatch(f"expected {self.n_in} knot grids, got shape {grids.shape}")
        self.grids = grids
        self._rebuild_knots()
        shape = (self.n_out, self.n_in, self.n_coef)
        if coeffs is None:
            rng = np.random.default_rng(0) if rng is None else rng
            coeffs = init_scale * rng.standard_normal(shape)
        self.coeffs = np.array(coeffs, dtype=float)
        if self.coeffs.shape != shape:
            raise DimensionMismatch(f"coeffs shape {self.coeffs.shape} != {shape}")

    def _rebuild_knots(self):
        self.knot_vectors = [clamped_knots(coarse_breaks(g, self.stride), self.order) for g in self.grids]
        self._knot_stack = np.stack(self.knot_vectors)

    @property
    def n_coef(self):
        return n_basis(coarse_breaks(self.grids[0], self.stride).size, self.order)

    def params(self):
        return [self.coeffs]

    def n_params(self):
        return self.coeffs.size

    def forward(self, xi, cache=False):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] != self.n_in:
            raise DimensionMismatch(f"spline block expects {self.n_in} inputs, got {xi.shape[1]}")
        flat = self.coeffs.reshape(self.n_out, -1)
        if cache:
            B, dB = design_tensor(self._knot_stack, self.order, xi, deriv=True)
            return B.reshape(B.shape[0], -1) @ flat.T, (B, dB)
        B = design_tensor(self._knot_stack, self.order, xi)
        return B.reshape(B.shape[0], -1) @ flat.T

    def backward(self, mats, grad_out):
        B, dB = mats
        n = B.shape[0]
        gC = (grad_out.T @ B.reshape(n, -1)).reshape(self.coeffs.shape)
        W = (grad_out @ self.coeffs.reshape(self.n_out, -1)).reshape(dB.shape)
        return gC, np.sum(dB * W, axis=2)

    def spline_values(self, i, x):
        """Outputs of splines ``(:, i)`` at ``x``, shape ``(len(x), n_out)``."""
        return design_matrix(self.knot_vectors[i], self.order, x) @ self.coeffs[:, i, :].T

    def set_grids(self, new_grids, refit=True):
        """Move the knot grids; with ``refit`` keep the functions by least squares."""
        new_grids = np.array(new_grids, dtype=float)
        if not refit:
            self.grids = new_grids
            self._rebuild_knots()
            return
        new_coeffs = np.empty_like(self.coeffs)
        for i, g in enumerate(new_grids):
            z = np.linspace(g[0], g[-1], 4 * g.size)
            # hold the old spline constant past its own grid so a widened grid is not fit to wild extrapolation
            old = self.spline_values(i, np.clip(z, self.grids[i][0], self.grids[i][-1]))
            t_new = clamped_knots(coarse_breaks(g, self.stride), self.order)
            B = design_matrix(t_new, self.order, z)
            new_coeffs[:, i, :] = np.linalg.lstsq(B, old, rcond=None)[0].T
        self.grids = new_grids
        self._rebuild_knots()
        self.coeffs[...] = new_coeffs

    def fit_least_squares(self, xi, Y):
        """Replace the coefficients by the minimum-norm least-squares fit of ``Y`` from ``xi``.

        The block is linear in its coefficients, so for fixed inputs this is
        the exact optimum of the squared loss.
        """
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(xi.shape[0], self.n_out)
        B = design_tensor(self._knot_stack, self.order, xi).reshape(xi.shape[0], -1)
        sol = np.linalg.lstsq(B, Y, rcond=None)[0]  # (n_in * n_coef, n_out)
        self.coeffs[...] = sol.T.reshape(self.n_out, self.n_in, self.n_coef)

    def max_slope(self, n_points=200):
        """Largest |s'| over each grid's range (audit only, never enforced)."""
        worst = 0.0
        for i, (t, g) in enumerate(zip(self.knot_vectors, self.grids)):
            z = np.linspace(g[0], g[-1], n_points)
            _, dB = design_matrix(t, self.order, z, deriv=True)
            worst = max(worst, float(np.abs(dB @ self.coeffs[:, i, :].T).max()))
        return worst


def sorted_knot_columns(features):
    """Sort each feature column; jitter columns whose knots nearly coincide.

    Returns ``(K, perms)`` with ``K[:, c] = features[perms[:, c], c]`` (plus jitter).
    """
    features = np.asarray(features, dtype=float)
    perms = np.argsort(features, axis=0, kind="stable")
    K = np.take_along_axis(features, perms, axis=0)
    for c in range(K.shape[1]):
        col = K[:, c]
        span = col[-1] - col[0]
        if col.size > 1 and (np.any(np.diff(col) <= 0) or np.any(np.diff(col) < KNOT_SEPARATION_EPS * span)):
            scale = max(span, abs(col).max(), 1.0)
            K[:, c] = col + 1e-9 * scale * np.arange(col.size)
            warnings.warn(f"feature column {c} has near-duplicate knots; jittered", DegenerateColumn)
    return K, perms


class KdarekModel:
    """``d`` SNR-MLPs (one per input coordinate) summed into ``q`` features, then a spline block.

    The model keeps the selected knot samples (``knot_inputs``/``knot_targets``)
    because the spline grids are the sorted features of those samples.
    """

    kind = "kdarek"

    def __init__(self, mlps, spline, knot_inputs, knot_targets=None):
        self.mlps = list(mlps)
        self.spline = spline
        self.knot_inputs = np.array(knot_inputs, dtype=float).reshape(-1, len(self.mlps))
        self.knot_targets = None if knot_targets is None else np.array(knot_targets, dtype=float).reshape(
            self.knot_inputs.shape[0], -1
        )
        q = {m.out_dim for m in self.mlps}
        if len(q) != 1 or q.pop() != spline.n_in:
            raise DimensionMismatch("every SNR-MLP must output the spline block's input width")

    @classmethod
    def build(cls, knot_inputs, knot_targets, mlp_widths, n_out, order=3, stride=2, lipschitz_f=1.0, seed=0):
        """Fresh model whose grids come from the features of ``knot_inputs``."""
        knot_inputs = np.atleast_2d(np.asarray(knot_inputs, dtype=float))
        if knot_inputs.shape[0] == 1 and knot_inputs.shape[1] != 1:
            knot_inputs = knot_inputs.T
        d = knot_inputs.shape[1]
        n_layers = len(mlp_widths) - 1
        cap = (lipschitz_f / d) ** (1.0 / (n_layers + 1))
        rng = np.random.default_rng(seed)
        mlps = [SnrMlp(mlp_widths, cap, rng) for _ in range(d)]
        for m in mlps:
            m.normalize()
        q = mlp_widths[-1]
        feats = sum(m.forward(knot_inputs[:, p]) for p, m in enumerate(mlps))
        K, _ = sorted_knot_columns(feats)
        spline = SplineBlock(q, n_out, order, K.T, stride=stride, rng=rng)
        return cls(mlps, spline, knot_inputs, knot_targets)

    @property
    def d(self):
        return len(self.mlps)

    @property
    def q(self):
        return self.spline.n_in

    @property
    def m(self):
        return self.spline.n_out

    @property
    def order(self):
        return self.spline.order

    def params(self):
        out = []
        for mlp in self.mlps:
            out += mlp.params()
        return out + self.spline.params()

    def n_params(self):
        return sum(p.size for p in self.params())

    def _as_batch(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 0 or (x.ndim == 1 and self.d > 1)
        if x.ndim == 0:
            X = x.reshape(1, 1)
        elif x.ndim == 1:
            X = x.reshape(1, -1) if self.d > 1 else x.reshape(-1, 1)
        else:
            X = x
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"model expects {self.d} inputs, got {X.shape[1]}")
        return X, single

    def features(self, X):
        X, single = self._as_batch(X)
        xi = sum(m.forward(X[:, p]) for p, m in enumerate(self.mlps))
        return xi[0] if single else xi

    def forward(self, x):
        """Outputs and features: ``(f, xi)``; batch in, batch out."""
        X, single = self._as_batch(x)
        xi = sum(m.forward(X[:, p]) for p, m in enumerate(self.mlps))
        f = self.spline.forward(xi)
        return (f[0], xi[0]) if single else (f, xi)

    def predict(self, x):
        return self.forward(x)[0]

    def loss_and_grads(self, X, Y):
        X, _ = self._as_batch(X)
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        caches = []
        xi = 0.0
        for p, mlp in enumerate(self.mlps):
            psi, c = mlp.forward(X[:, p], cache=True)
            caches.append(c)
            xi = xi + psi
        f, mats = self.spline.forward(xi, cache=True)
        r = f - Y
        loss = float(np.mean(r ** 2))
        g = 2.0 * r / r.size
        gC, gxi = self.spline.backward(mats, g)
        grads = []
        for mlp, c in zip(self.mlps, caches):
            gW, gb, _ = mlp.backward(c, gxi)
            for a, b in zip(gW, gb):
                grads += [a, b]
        return loss, grads + [gC]

    def normalize(self):
        for mlp in self.mlps:
            mlp.normalize()

    def regrid(self):
        K, _ = sorted_knot_columns(self.features(self.knot_inputs))
        self.spline.set_grids(K.T)


# ---------------------------------------------------------------------------
# training


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            p -= self.lr * mh / (np.sqrt(vh) + self.eps)


class _GD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


def train(model, X, Y, cfg: TrainConfig):
    """Full-batch training on MSE; returns ``(model, loss_history)``.

    Works for any model exposing ``params``, ``loss_and_grads``, ``normalize``
    and ``regrid``. The history holds the loss before every update plus the
    loss after the closing regrid.
    """
    params = model.params()
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else _GD(params, cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        if cfg.knot_regrid_period and epoch and epoch % cfg.knot_regrid_period == 0:
            model.regrid()
        loss, grads = model.loss_and_grads(X, Y)
        if not np.isfinite(loss):
            raise NonFiniteLoss(epoch, loss)
        history.append(loss)
        if cfg.clip_norm:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
        opt.step(params, grads)
        model.normalize()
    model.regrid()
    loss, _ = model.loss_and_grads(X, Y)
    if not np.isfinite(loss):
        raise NonFiniteLoss(cfg.epochs, loss)
    history.append(loss)
    return model, history
