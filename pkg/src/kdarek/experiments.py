"""Experiment pipelines shared by the CLI and the acceptance tests: cosine comparison, timing benchmark, safe-control campaign."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import darek_train, ensemble_predict, ensemble_train, gp_fit_grid, gp_predict
from .bounds import budget_for, compute_feature_knots, darek_budget, darek_two_layer_bound, select_knots, \
    total_bound_batch
from .netcore import KdarekModel, TrainConfig, train
from .safectrl import WorldConfig, collect_dynamics_data, run_campaign, run_trial, train_error_models

TWO_PI = 2 * math.pi


@dataclass
class CosineConfig:
    amplitude: float = 10.0
    n_train: int = 50
    x_lo: float = -TWO_PI
    x_hi: float = TWO_PI
    noise_std: float = 0.0
    m_k: int = 9
    mlp_widths: list = field(default_factory=lambda: [1, 5])
    hidden: int = 5
    order: int = 3
    stride: int = 2
    lipschitz_f: float = 10.0
    lipschitz_kp1: float = 10.0
    n_test: int = 500
    curve_lo: float = -3 * math.pi
    curve_hi: float = 3 * math.pi
    n_curve: int = 601
    ensemble_members: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)

    def target(self, x):
        return self.amplitude * np.cos(x)


def cosine_data(cfg: CosineConfig, seed=0):
    x = np.linspace(cfg.x_lo, cfg.x_hi, cfg.n_train)
    y = cfg.target(x)
    if cfg.noise_std > 0:
        y = y + np.random.default_rng(seed).normal(0.0, cfg.noise_std, x.size)
    return x, y


def _with_seed(tc: TrainConfig, seed):
    return TrainConfig(**{**tc.__dict__, "seed": int(seed)})


def fit_kdarek(cfg: CosineConfig, x, y, triple, seed=0):
    model = KdarekModel.build(triple.T, triple.Y, cfg.mlp_widths, 1, cfg.order, cfg.stride, cfg.lipschitz_f, seed)
    train(model, x, y, _with_seed(cfg.train, seed))
    return model, compute_feature_knots(model, triple)


def run_cosine(cfg: CosineConfig, seed=0, jobs=1, timings=None):
    """Train every model on the same data and knots.

    Returns ``(summary, curves)``. ``summary`` rows hold MSE on the in-range
    test grid, the violation rate (percent of test points whose error exceeds
    the model's bound or 3-sigma band) and the parameter count. ``curves``
    rows are ``(model, x, f, f_hat, u)`` on a grid extending past the data.
    """
    timings = {} if timings is None else timings
    x, y = cosine_data(cfg, seed)
    triple = select_knots(x, y, cfg.m_k)
    xt = np.linspace(cfg.x_lo, cfg.x_hi, cfg.n_test)
    yt = cfg.target(xt)
    xc = np.linspace(cfg.curve_lo, cfg.curve_hi, cfg.n_curve)
    results = {}

    t0 = time.perf_counter()
    km, ktr = fit_kdarek(cfg, x, y, triple, seed)
    kb = budget_for(km, cfg.lipschitz_f, cfg.lipschitz_kp1)

    def kd(xs):
        f, u, _, _ = total_bound_batch(km, xs, ktr, kb)
        return f[:, 0], u[:, 0]

    results["K-DAREK"] = (kd, km.n_params())
    timings["kdarek"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dm, _ = darek_train(x, y, triple.T, triple.Y, _with_seed(cfg.train, seed), cfg.hidden, cfg.order, cfg.stride)
    dtr = compute_feature_knots(dm, triple)
    db = darek_budget(cfg.lipschitz_f, cfg.lipschitz_kp1, cfg.order)

    def dk(xs):
        f, u, _, _ = darek_two_layer_bound(dm, xs, dtr, db)
        return f[:, 0], u[:, 0]

    results["DAREK"] = (dk, dm.n_params())
    timings["darek"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gm = gp_fit_grid(x, y)

    def gp(xs):
        mean, std, _ = gp_predict(gm, xs)
        return mean, 3 * std

    results["GP"] = (gp, None)
    timings["gp"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    em = ensemble_train(x, y, triple.T, _with_seed(cfg.train, seed), cfg.ensemble_members, cfg.hidden, cfg.order,
                        cfg.stride, jobs=jobs)

    def ens(xs):
        mean, std, _ = ensemble_predict(em, xs)
        return mean[:, 0], 3 * std[:, 0]

    results["Ensemble"] = (ens, em.n_params())
    timings["ensemble"] = time.perf_counter() - t0

    summary, curves = [], []
    for name, (fn, n_params) in results.items():
        f, u = fn(xt)
        err = np.abs(f - yt)
        summary.append({"model": name, "mse": float(np.mean(err ** 2)), "violation_pct": 100.0 * float(np.mean(err > u)),
                        "n_params": n_params})
        fc, uc = fn(xc)
        fx = cfg.target(xc)
        for xi, fi, fhi, ui in zip(xc, fx, fc, uc):
            curves.append({"model": name, "x": float(xi), "f": float(fi), "f_hat": float(fhi), "u": float(ui)})
    return summary, curves


@dataclass
class BenchConfig:
    sizes: list = field(default_factory=lambda: [50, 100, 500, 1000, 5000])
    repetitions: int = 5
    n_test: int = 500
    models: list = field(default_factory=lambda: ["K-DAREK", "GP", "Ensemble"])
    cosine: CosineConfig = field(default_factory=CosineConfig)


def _time_model(name, cfg: CosineConfig, x, y, xt, seed, jobs):
    triple = select_knots(x, y, cfg.m_k)
    t0 = time.perf_counter()
    if name == "K-DAREK":
        model, tr = fit_kdarek(cfg, x, y, triple, seed)
        t1 = time.perf_counter()
        total_bound_batch(model, xt, tr, budget_for(model, cfg.lipschitz_f, cfg.lipschitz_kp1))
    elif name == "DAREK":
        model, _ = darek_train(x, y, triple.T, triple.Y, _with_seed(cfg.train, seed), cfg.hidden, cfg.order,
                               cfg.stride)
        tr = compute_feature_knots(model, triple)
        t1 = time.perf_counter()
        darek_two_layer_bound(model, xt, tr, darek_budget(cfg.lipschitz_f, cfg.lipschitz_kp1, cfg.order))
    elif name == "GP":
        model = gp_fit_grid(x, y)  # hyperparameter selection is part of fitting a GP
        t1 = time.perf_counter()
        gp_predict(model, xt)
    elif name == "Ensemble":
        model = ensemble_train(x, y, triple.T, _with_seed(cfg.train, seed), cfg.ensemble_members, cfg.hidden,
                               cfg.order, cfg.stride, jobs=jobs)
        t1 = time.perf_counter()
        ensemble_predict(model, xt)
    else:
        raise ValueError(f"unknown benchmark model {name!r}")
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1


def run_bench(cfg: BenchConfig, seed=0, jobs=1):
    """Median train and inference wall-clock per (size, model) over ``repetitions`` runs."""
    rows = []
    c = cfg.cosine
    for n in cfg.sizes:
        x = np.linspace(c.x_lo, c.x_hi, n)
        y = c.target(x)
        xt = np.linspace(c.x_lo, c.x_hi, cfg.n_test)
        for name in cfg.models:
            tr, inf = [], []
            for r in range(cfg.repetitions):
                a, b = _time_model(name, c, x, y, xt, seed + r, jobs)
                tr.append(a)
                inf.append(b)
            rows.append({"n": int(n), "model": name, "train_s": float(np.median(tr)), "infer_s": float(np.median(inf)),
                         "total_s": float(np.median(np.add(tr, inf)))})
    return rows


@dataclass
class SafeCtrlConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    models: list = field(default_factory=lambda: ["D2", "K-D2", "K-D3"])
    d_p_grid: list = field(default_factory=lambda: [0.0, 1.0])
    d_v_grid: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    n_trials: int = 100
    n_data: int = 5000
    data_seed: int = 12345
    epochs: int = 300
    learning_rate: float = 0.01
    m_k: int = 25
    train_lipschitz: float = 1.0
    trajectory_trials: int = 0


def run_safectrl(cfg: SafeCtrlConfig, seed=0, jobs=1, timings=None):
    """Train the error models, then run the outcome grid.

    Returns ``(rows, trajectories)``; trajectories hold the first
    ``trajectory_trials`` episodes of every cell, one row per agent and step.
    """
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    XU, R = collect_dynamics_data(cfg.world, cfg.n_data, cfg.data_seed)
    timings["data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    models = train_error_models(cfg.world, XU, R, cfg.epochs, cfg.m_k, cfg.train_lipschitz, seed, cfg.models,
                                cfg.learning_rate)
    timings["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rows = run_campaign(cfg.world, models, cfg.d_p_grid, cfg.d_v_grid, cfg.n_trials, seed, jobs)
    timings["campaign"] = time.perf_counter() - t0
    traj = []
    if cfg.trajectory_trials > 0:
        t0 = time.perf_counter()
        for d_p in cfg.d_p_grid:
            for d_v in cfg.d_v_grid:
                cell = WorldConfig(**{**asdict(cfg.world), "d_p": float(d_p), "d_v": float(d_v)})
                for name in cfg.models:
                    em = models[name].with_lipschitz(cell.lipschitz_f)
                    for i in range(min(cfg.trajectory_trials, cfg.n_trials)):
                        out = run_trial(cell, em, seed, i, record=True)
                        traj.extend([name, float(d_p), float(d_v), i, *r] for r in out.trajectory)
        timings["trajectories"] = time.perf_counter() - t0
    return rows, traj


TRAJECTORY_HEADER = ["model", "d_p", "d_v", "trial", "t", "agent", "px", "py", "vx", "vy", "u1", "u2", "w1", "w2",
                     "w3", "w4"]
