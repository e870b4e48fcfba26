"""Multi-agent navigation with a robust discrete-time CBF filter.

An ego double integrator tracks a goal with an obstacle-blind finite-horizon
LQR (Riccati) reference. A per-step QP keeps a braking-distance barrier to
every other agent, tightened by a disturbance box whose half-widths come from
a learned error model's worst-case bound. Other agents follow scripted
waypoint controllers that the ego does not know.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import Infeasible, MaxIterations
from .qp import qp_solve

OUTCOMES = ("success", "collision", "stuck")


# ---------------------------------------------------------------------------
# data types


@dataclass
class WorldConfig:
    dt: float = 0.1
    n_other_agents: int = 4
    start: tuple = (0.0, 0.0)
    goal: tuple = (10.0, 0.0)
    agent_radius: float = 0.25
    safety_margin: float = 0.1
    arena: tuple = (-2.0, 12.0, -6.0, 6.0)  # xmin, xmax, ymin, ymax
    d_p: float = 0.0
    d_v: float = 0.0
    noise_scale_p: float = 0.02  # metres of position noise per unit of d_p, per step
    noise_scale_v: float = 0.05  # m/s of velocity noise per unit of d_v, per step
    max_steps: int = 300
    stuck_window: int = 50
    stuck_threshold: float = 0.05
    goal_tolerance: float = 0.3
    u_max: float = 2.0
    a_brake: float = 1.0
    horizon: int = 8
    gamma: float = 0.4
    q_pos: float = 1.0
    q_vel: float = 1.0
    r_u: float = 1.0
    other_speed: tuple = (0.4, 0.9)
    waypoint_jitter: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.agent_radius > 0:
            raise ValueError("agent radius must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")

    @property
    def lipschitz_f(self):
        """System Lipschitz constant fed to the error-model budget."""
        return self.d_p + self.d_v * self.dt

    @property
    def noise_half_widths(self):
        p, v = self.d_p * self.noise_scale_p, self.d_v * self.noise_scale_v
        return np.array([p, p, v, v])


@dataclass
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("agent state must be finite")

    def as_vector(self):
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, x):
        return cls(x[:2], x[2:])


@dataclass
class DisturbancePolytope:
    """Componentwise box ``|d_i| <= half_widths[i]`` on the ego's next state."""

    half_widths: np.ndarray

    def __post_init__(self):
        self.half_widths = np.asarray(self.half_widths, dtype=float)
        if np.any(self.half_widths < 0) or not np.all(np.isfinite(self.half_widths)):
            raise ValueError("polytope half-widths must be finite and nonnegative")


@dataclass
class TrialOutcome:
    tag: str
    steps: int
    min_distance: float
    fallbacks: int = 0
    trajectory_hash: str = ""
    trajectory: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.tag not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.tag!r}")


# ---------------------------------------------------------------------------
# dynamics and reference controller


def control_matrix(dt):
    return np.vstack([0.5 * dt * dt * np.eye(2), dt * np.eye(2)])


def transition_matrix(dt):
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    return A


def drift(x, dt):
    return transition_matrix(dt) @ np.asarray(x, dtype=float)


def step_dynamics(x, u, d=None, dt=0.1):
    """Double-integrator update ``x' = A x + G u + d``."""
    out = drift(x, dt) + control_matrix(dt) @ np.asarray(u, dtype=float)
    if d is not None:
        out = out + np.asarray(d, dtype=float)
    return out


def riccati_gains(dt, horizon, Q, R, Qf=None):
    """Finite-horizon LQR gains ``K_0 .. K_{N-1}`` (first entry is applied now)."""
    A, B = transition_matrix(dt), control_matrix(dt)
    P = Q if Qf is None else Qf
    gains = []
    for _ in range(horizon):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    return gains[::-1]


def mpc_reference(x, goal, horizon=8, dt=0.1, q_pos=1.0, q_vel=1.0, r_u=1.0, u_max=None, gain=None):
    """First input of the obstacle-free quadratic tracking problem toward ``goal`` at rest."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if gain is None:
        Q = np.diag([q_pos, q_pos, q_vel, q_vel])
        gain = riccati_gains(dt, horizon, Q, r_u * np.eye(2))[0]
    err = np.asarray(x, dtype=float) - np.concatenate([np.asarray(goal, dtype=float), np.zeros(2)])
    u = -gain @ err
    if u_max is not None:
        u = np.clip(u, -u_max, u_max)
    return u


# ---------------------------------------------------------------------------
# barrier and safety filter


def barrier(dp, dv, a_brake, radius, eps=1e-9):
    """Stopping-distance barrier and its gradients with respect to relative position and velocity.

    ``h = (|dp| - radius) - max(-rate, 0)^2 / (2 a_brake)`` where ``rate`` is the
    range rate; ``h >= 0`` means braking at ``a_brake`` stops the approach
    before the separation reaches ``radius``. It is C1 everywhere.
    """
    dist = max(float(np.linalg.norm(dp)), eps)
    n = dp / dist
    rate = float(n @ dv)
    s = max(-rate, 0.0)
    h = dist - radius - s * s / (2.0 * a_brake)
    dh_drate = s / a_brake
    dh_dp = n + dh_drate * (dv - rate * n) / dist
    dh_dv = dh_drate * n
    return h, dh_dp, dh_dv


@dataclass
class FilterParams:
    dt: float = 0.1
    gamma: float = 0.4
    u_max: float = 2.0
    a_brake: float = 1.0
    radius: float = 0.6
    relinearize: int = 3


def cbf_constraints(u_lin, x, others, polytope: DisturbancePolytope, params: FilterParams):
    """Linear constraints ``A u <= b`` (one per other agent) robust to the disturbance box.

    Each barrier at the next step is linearised in ``u`` about ``u_lin``; the
    worst box vertex lowers it by ``sum_i |dh/dx_i| w_i``.
    """
    G = control_matrix(params.dt)
    u_lin = np.asarray(u_lin, dtype=float)
    x_next_ref = step_dynamics(x, u_lin, dt=params.dt)
    rows, rhs = [], []
    w = polytope.half_widths
    for xo in others:
        h_now, _, _ = barrier(x[:2] - xo[:2], x[2:] - xo[2:], params.a_brake, params.radius)
        xo_next = drift(xo, params.dt)  # the ego assumes others keep their velocity
        h_next, gp, gv = barrier(x_next_ref[:2] - xo_next[:2], x_next_ref[2:] - xo_next[2:], params.a_brake,
                                 params.radius)
        grad_x = np.concatenate([gp, gv])
        grad_u = grad_x @ G
        margin = float(np.abs(grad_x) @ w)
        rows.append(-grad_u)
        rhs.append(h_next - grad_u @ u_lin - margin - (1.0 - params.gamma) * h_now)
    return np.array(rows).reshape(-1, 2), np.array(rhs)


def _box(u_max):
    return np.vstack([np.eye(2), -np.eye(2)]), np.full(4, u_max)


def _max_feasibility(A, b, u_max):
    """Input in the actuator box minimising the largest (row-normalised) constraint violation."""
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 0
    if not np.any(keep):
        return np.zeros(2)
    A, b = A[keep] / norms[keep, None], b[keep] / norms[keep]
    A_ub = np.hstack([A, -np.ones((A.shape[0], 1))])
    res = linprog([0.0, 0.0, 1.0], A_ub=A_ub, b_ub=b, bounds=[(-u_max, u_max)] * 2 + [(None, None)], method="highs")
    if res.x is None:
        return np.zeros(2)
    return res.x[:2]


def cbf_filter(u_ref, x, others, polytope: DisturbancePolytope, params: FilterParams):
    """Closest input to ``u_ref`` satisfying every robust barrier constraint and the actuator box.

    The barriers are re-linearised at the previous solution ``params.relinearize``
    times. Returns ``(u_safe, fallback)``; ``fallback`` is True when the QP was
    infeasible (or the active set cycled) and the violation-minimising input
    was used instead.
    """
    u_ref = np.asarray(u_ref, dtype=float)
    x = np.asarray(x, dtype=float)
    A_box, b_box = _box(params.u_max)
    u_lin = np.clip(u_ref, -params.u_max, params.u_max)
    for _ in range(1 + params.relinearize):
        A_c, b_c = cbf_constraints(u_lin, x, others, polytope, params)
        if A_c.shape[0] == 0:
            return u_lin, False
        try:
            u_new = qp_solve(2.0 * np.eye(2), -2.0 * u_ref, np.vstack([A_c, A_box]), np.concatenate([b_c, b_box])).x
        except (Infeasible, MaxIterations):
            return _max_feasibility(A_c, b_c, params.u_max), True
        if np.max(np.abs(u_new - u_lin)) < 1e-9:
            return u_new, False
        u_lin = u_new
    return u_lin, False


# ---------------------------------------------------------------------------
# error models feeding the polytope


class ErrorModelBound:
    """Wraps a trained model so the filter can ask for a disturbance box at ``(x, u)``.

    ``kind`` is ``"kdarek"``, ``"darek"``, ``"fixed"`` (constant ``half_widths``)
    or ``"none"``. The Lipschitz budget is rebuilt from the world's noise
    levels via :meth:`with_lipschitz`.
    """

    def __init__(self, kind, model=None, triple=None, half_widths=None, lipschitz_f=1e-6, floor=1e-6):
        self.kind = kind
        self.model = model
        self.triple = triple
        self.half_widths = None if half_widths is None else np.asarray(half_widths, dtype=float)
        self.floor = floor
        self.lipschitz_f = max(float(lipschitz_f), floor)
        self._budget = self._make_budget()

    def _make_budget(self):
        from .bounds import budget_for, darek_budget

        if self.kind == "kdarek":
            return budget_for(self.model, self.lipschitz_f, self.lipschitz_f)
        if self.kind == "darek":
            return darek_budget(self.lipschitz_f, self.lipschitz_f, self.model.order)
        return None

    def with_lipschitz(self, lipschitz_f):
        return ErrorModelBound(self.kind, self.model, self.triple, self.half_widths, lipschitz_f, self.floor)

    def __call__(self, x, u):
        from .bounds import darek_two_layer_bound, total_bound_batch

        if self.kind == "none":
            return np.zeros(4)
        if self.kind == "fixed":
            return self.half_widths.copy()
        U = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)]).reshape(1, -1)
        if self.kind == "kdarek":
            _, total, _, _ = total_bound_batch(self.model, U, self.triple, self._budget)
        else:
            _, total, _, _ = darek_two_layer_bound(self.model, U, self.triple, self._budget)
        return total[0]


# ---------------------------------------------------------------------------
# scenario and trials


def spawn_others(cfg: WorldConfig, rng):
    """Crossing traffic: each agent starts beside the corridor and heads across it through jittered waypoints."""
    agents = []
    xs = np.linspace(2.0, cfg.goal[0] - 1.0, max(cfg.n_other_agents, 1))
    for i in range(cfg.n_other_agents):
        side = 1.0 if i % 2 == 0 else -1.0
        px = xs[i] + rng.uniform(-0.5, 0.5)
        start = np.array([px, side * rng.uniform(2.5, 4.0)])
        mid = np.array([px + rng.uniform(-1.5, 1.5), 0.0]) + rng.uniform(-1, 1, 2) * cfg.waypoint_jitter
        end = np.array([mid[0] + rng.uniform(-1.0, 1.0), -side * 5.0])
        speed = rng.uniform(*cfg.other_speed)
        direction = (mid - start) / np.linalg.norm(mid - start)
        agents.append({"x": np.concatenate([start, speed * direction]), "waypoints": [mid, end], "speed": speed})
    return agents


def _advance_other(agent, dt, tol=0.3):
    x = agent["x"]
    wps = agent["waypoints"]
    while wps and np.linalg.norm(wps[0] - x[:2]) < tol:
        wps.pop(0)
    if wps:
        heading = wps[0] - x[:2]
        v = agent["speed"] * heading / np.linalg.norm(heading)
    else:
        v = x[2:]
    agent["x"] = np.concatenate([x[:2] + v * dt, v])


def _trial_rngs(seed, trial):
    scen, noise = np.random.SeedSequence([int(seed), int(trial)]).spawn(2)
    return np.random.default_rng(scen), np.random.default_rng(noise)


def run_trial(cfg: WorldConfig, error_model, seed, trial=0, record=False, others=None, x0=None):
    """Simulate one episode; the same ``(seed, trial)`` gives the same scenario and noise draws.

    ``error_model`` maps an input to disturbance half-widths (see
    :class:`ErrorModelBound`). ``others``/``x0`` override the spawned scenario.
    """
    scen_rng, noise_rng = _trial_rngs(seed, trial)
    agents = spawn_others(cfg, scen_rng) if others is None else [
        {"x": np.asarray(o, float), "waypoints": [], "speed": float(np.linalg.norm(np.asarray(o, float)[2:]))}
        for o in others
    ]
    x = np.concatenate([np.asarray(cfg.start, float), np.zeros(2)]) if x0 is None else np.asarray(x0, float)
    goal = np.asarray(cfg.goal, dtype=float)
    gain = riccati_gains(cfg.dt, cfg.horizon, np.diag([cfg.q_pos] * 2 + [cfg.q_vel] * 2), cfg.r_u * np.eye(2))[0]
    params = FilterParams(cfg.dt, cfg.gamma, cfg.u_max, cfg.a_brake, 2 * cfg.agent_radius + cfg.safety_margin)
    contact = 2 * cfg.agent_radius
    noise_w = cfg.noise_half_widths
    history = [x[:2].copy()]
    traj = [] if record else None
    digest = hashlib.sha256()
    min_dist = math.inf
    fallbacks = 0

    def distances():
        if not agents:
            return math.inf
        return float(min(np.linalg.norm(a["x"][:2] - x[:2]) for a in agents))

    d0 = distances()
    min_dist = min(min_dist, d0)
    if d0 < contact:
        return TrialOutcome("collision", 0, min_dist, 0, digest.hexdigest(), traj)

    for t in range(1, cfg.max_steps + 1):
        u_ref = mpc_reference(x, goal, cfg.horizon, cfg.dt, u_max=cfg.u_max, gain=gain)
        w = np.asarray(error_model(x, u_ref), dtype=float)
        u, fb = cbf_filter(u_ref, x, [a["x"] for a in agents], DisturbancePolytope(w), params)
        fallbacks += int(fb)
        d = noise_rng.uniform(-1.0, 1.0, 4) * noise_w
        if record:
            traj.append([t - 1, 0, *x, *u, *w])
            for j, a in enumerate(agents, start=1):
                traj.append([t - 1, j, *a["x"], 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        x = step_dynamics(x, u, d, cfg.dt)
        for a in agents:
            _advance_other(a, cfg.dt)
        digest.update(x.tobytes())
        dist = distances()
        min_dist = min(min_dist, dist)
        if dist < contact:
            return TrialOutcome("collision", t, min_dist, fallbacks, digest.hexdigest(), traj)
        if np.linalg.norm(x[:2] - goal) < cfg.goal_tolerance:
            return TrialOutcome("success", t, min_dist, fallbacks, digest.hexdigest(), traj)
        history.append(x[:2].copy())
        if t >= cfg.stuck_window and np.linalg.norm(history[-1] - history[-1 - cfg.stuck_window]) < cfg.stuck_threshold:
            return TrialOutcome("stuck", t, min_dist, fallbacks, digest.hexdigest(), traj)
    return TrialOutcome("stuck", cfg.max_steps, min_dist, fallbacks, digest.hexdigest(), traj)


# ---------------------------------------------------------------------------
# offline data and error models


def nominal_next(XU, dt):
    """Double-integrator prediction of ``x'`` for rows ``(x, u)``."""
    XU = np.atleast_2d(np.asarray(XU, dtype=float))
    return XU[:, :4] @ transition_matrix(dt).T + XU[:, 4:] @ control_matrix(dt).T


def collect_dynamics_data(cfg: WorldConfig, n_steps=5000, seed=12345):
    """Noise-free closed-loop transitions.

    Returns rows ``(x, u)`` and the residual targets ``x' - nominal(x, u)``;
    an error model predicts ``x'`` as the nominal step plus its output.
    """
    clean = WorldConfig(**{**asdict(cfg), "d_p": 0.0, "d_v": 0.0})
    XU, Xn = [], []
    trial = 0
    zero = ErrorModelBound("none")
    while len(XU) < n_steps:
        out = run_trial(clean, zero, seed, trial, record=True)
        ego = [row for row in out.trajectory if row[1] == 0]
        for a, b in zip(ego[:-1], ego[1:]):
            XU.append(a[2:8])
            Xn.append(b[2:6])
        trial += 1
    XU, Xn = np.array(XU[:n_steps]), np.array(Xn[:n_steps])
    return XU, Xn - nominal_next(XU, cfg.dt)


def train_error_models(cfg: WorldConfig, XU, Xn, epochs=300, m_k=25, train_lipschitz=1.0, seed=0, which=None,
                       learning_rate=0.01):
    """Fit the three error models used in the campaign.

    ``D2`` is the two-spline-layer network with 5 hidden units, ``K-D2`` an
    SNR-MLP ``[1,5]`` per input with a ``5 -> 4`` spline block and ``K-D3`` the
    same with one ReLU hidden layer ``[1,5,5]``. After gradient training the
    output spline layer is refit by least squares on the full data set.
    """
    from .baselines import darek_train
    from .bounds import compute_feature_knots, select_knots
    from .netcore import KdarekModel, TrainConfig, train

    tr = select_knots(XU, Xn, m_k, strategy="extremes")
    tcfg = TrainConfig(epochs=epochs, learning_rate=learning_rate, seed=seed)
    which = which or ("D2", "K-D2", "K-D3")
    out = {}
    for name in which:
        if name == "D2":
            model, _ = darek_train(XU, Xn, tr.T, tr.Y, tcfg)
            model.layer2.fit_least_squares(model.forward(XU)[1], Xn)
            out[name] = ErrorModelBound("darek", model, compute_feature_knots(model, tr))
        else:
            widths = [1, 5] if name == "K-D2" else [1, 5, 5]
            model = KdarekModel.build(tr.T, tr.Y, widths, Xn.shape[1], lipschitz_f=train_lipschitz, seed=seed)
            train(model, XU, Xn, tcfg)
            model.spline.fit_least_squares(model.forward(XU)[1], Xn)
            out[name] = ErrorModelBound("kdarek", model, compute_feature_knots(model, tr))
    return out


# ---------------------------------------------------------------------------
# campaign


def _run_cell(args):
    cfg, model, seed0, n_trials = args
    counts = dict.fromkeys(OUTCOMES, 0)
    steps = []
    for i in range(n_trials):
        out = run_trial(cfg, model, seed0, i)
        counts[out.tag] += 1
        steps.append(out.steps)
    return counts, float(np.mean(steps)) if steps else 0.0


def run_campaign(cfg: WorldConfig, models: dict, d_p_grid=(0.0, 1.0), d_v_grid=(0.0, 1.0, 2.0, 3.0), n_trials=100,
                 seed0=0, jobs=1):
    """Outcome counts for every (model, d_p, d_v) cell.

    Trial ``i`` of every cell shares the scenario and the unit noise draws of
    seed ``(seed0, i)``, so cells and models are compared on paired episodes.
    """
    tasks, keys = [], []
    for d_p in d_p_grid:
        for d_v in d_v_grid:
            cell = WorldConfig(**{**asdict(cfg), "d_p": float(d_p), "d_v": float(d_v)})
            for name, em in models.items():
                tasks.append((cell, em.with_lipschitz(cell.lipschitz_f), seed0, n_trials))
                keys.append((name, float(d_p), float(d_v)))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    rows = []
    for (name, d_p, d_v), (counts, mean_steps) in zip(keys, results):
        rows.append({"model": name, "d_p": d_p, "d_v": d_v, **counts, "mean_steps": mean_steps, "seed0": seed0})
    return rows
