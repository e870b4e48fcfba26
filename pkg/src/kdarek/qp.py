"""Small dense strictly convex QPs by the dual active-set method of Goldfarb and Idnani.

Solves ``min 0.5 x'Hx + f'x  s.t.  A x <= b``. Starting from the unconstrained
minimum, the most violated constraint is added each round and the step is cut
short (dropping a constraint) whenever a multiplier would turn negative. The
projected matrices are rebuilt from scratch every iteration, which is cheap at
the sizes used here (a handful of variables, a few dozen constraints).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, MaxIterations


@dataclass
class QpResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per constraint, zero when inactive
    active: list
    iterations: int
    objective: float


def kkt_residual(H, f, A, b, x, lam) -> float:
    """Largest violation among stationarity, primal/dual feasibility and complementarity."""
    H, f = np.asarray(H, float), np.asarray(f, float)
    res = np.abs(H @ x + f + (A.T @ lam if A.size else 0.0)).max()
    if A.size:
        slack = A @ x - b
        res = max(res, max(0.0, slack.max()), max(0.0, -lam.min()), np.abs(lam * slack).max())
    return float(res)


def qp_solve(H, f, A=None, b=None, tol=1e-10, max_iter=200) -> QpResult:
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    n = f.size
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    Hinv = np.linalg.inv(H)
    x = -Hinv @ f
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    scale = np.maximum(1.0, np.abs(b))
    while True:
        slack = (A @ x - b) / scale if A.size else np.zeros(0)
        viol = np.where(np.isin(np.arange(len(b)), active), -np.inf, slack)
        if viol.size == 0 or viol.max() <= tol:
            break
        p = int(np.argmax(viol))
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                raise MaxIterations(f"QP did not converge in {max_iter} iterations")
            a_p = A[p]
            if active:
                N = A[active].T
                HiN = Hinv @ N
                r = np.linalg.solve(N.T @ HiN, HiN.T @ a_p)
                z = Hinv @ a_p - HiN @ r
            else:
                r = np.zeros(0)
                z = Hinv @ a_p
            # dual step length: largest step keeping active multipliers nonnegative
            pos = r > tol
            if np.any(pos):
                ratios = np.where(pos, u_plus[:-1] / np.where(pos, r, 1.0), np.inf)
                k = int(np.argmin(ratios))
                t1 = float(ratios[k])
            else:
                k, t1 = -1, np.inf
            za = float(z @ a_p)
            viol_p = float(a_p @ x - b[p])
            t2 = viol_p / za if abs(za) > 1e-14 * max(1.0, np.linalg.norm(a_p)) ** 2 else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise Infeasible(f"constraint {p} cannot be satisfied together with {active}")
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x - t * z
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t2 <= t1:
                active.append(p)
                u = u_plus
                break
            # partial step: drop the blocking constraint and retry
            del active[k]
            u_plus = np.delete(u_plus, k)
    lam = np.zeros(len(b))
    if active:
        lam[active] = u
    obj = float(0.5 * x @ H @ x + f @ x)
    return QpResult(x, lam, active, it, obj)
