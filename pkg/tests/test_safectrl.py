import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdarek.errors import Infeasible
from kdarek.qp import kkt_residual, qp_solve
from kdarek.safectrl import (
    OUTCOMES,
    AgentState,
    DisturbancePolytope,
    ErrorModelBound,
    FilterParams,
    TrialOutcome,
    WorldConfig,
    barrier,
    cbf_constraints,
    cbf_filter,
    collect_dynamics_data,
    control_matrix,
    mpc_reference,
    nominal_next,
    riccati_gains,
    run_campaign,
    run_trial,
    step_dynamics,
    train_error_models,
    transition_matrix,
)


class TestDynamics:
    def test_equilibrium(self):
        x = np.array([1.0, -2.0, 0.0, 0.0])
        np.testing.assert_array_equal(step_dynamics(x, np.zeros(2), np.zeros(4)), x)

    def test_hand_integration(self):
        x = step_dynamics(np.zeros(4), np.array([1.0, 0.0]), dt=0.1)
        assert x[0] == pytest.approx(0.005, abs=1e-15) and x[2] == pytest.approx(0.1, abs=1e-15)
        assert x[1] == 0 and x[3] == 0

    def test_disturbance_within_bound(self):
        rng = np.random.default_rng(0)
        cfg = WorldConfig(d_p=1.0, d_v=2.0)
        w = cfg.noise_half_widths
        for _ in range(100):
            x, u = rng.normal(size=4), rng.uniform(-2, 2, 2)
            d = rng.uniform(-1, 1, 4) * w
            gap = np.abs(step_dynamics(x, u, d) - step_dynamics(x, u))
            assert np.all(gap <= w + 1e-15)

    def test_nominal_matches_step(self):
        rng = np.random.default_rng(1)
        XU = rng.normal(size=(10, 6))
        want = np.array([step_dynamics(r[:4], r[4:]) for r in XU])
        np.testing.assert_allclose(nominal_next(XU, 0.1), want, atol=1e-15)


class TestMpc:
    def test_at_goal(self):
        assert np.linalg.norm(mpc_reference(np.array([3.0, 4.0, 0.0, 0.0]), (3.0, 4.0))) <= 1e-8

    def test_points_toward_goal(self):
        u = mpc_reference(np.zeros(4), (10.0, 0.0), u_max=2.0)
        assert u[0] > 0 and abs(u[1]) <= 1e-12

    def test_horizon_one_grid_oracle(self):
        x = np.array([0.3, -0.2, 0.1, 0.05])
        goal = np.zeros(2)
        u = mpc_reference(x, goal, horizon=1)
        A, B = transition_matrix(0.1), control_matrix(0.1)
        grid = np.linspace(-5, 5, 101)
        U = np.stack(np.meshgrid(grid, grid, indexing="ij"), -1).reshape(-1, 2)
        X1 = x @ A.T + U @ B.T
        cost = np.sum(X1 ** 2, 1) + np.sum(U ** 2, 1)
        best = U[np.argmin(cost)]
        assert np.all(np.abs(u - best) <= grid[1] - grid[0])
        assert np.all(np.abs(u) < 5)

    def test_first_gain_is_last_step_of_backward_pass(self):
        gains = riccati_gains(0.1, 3, np.eye(4), np.eye(2))
        assert len(gains) == 3
        # the stage closest to the end only sees the terminal cost
        np.testing.assert_allclose(gains[-1], riccati_gains(0.1, 1, np.eye(4), np.eye(2))[0])

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            mpc_reference(np.zeros(4), (1.0, 0.0), horizon=0)


class TestBarrier:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        dp = rng.uniform(0.7, 3.0) * np.array([np.cos(a := rng.uniform(0, 6.28)), np.sin(a)])
        dv = rng.normal(size=2)
        h, gp, gv = barrier(dp, dv, 1.0, 0.6)
        eps = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = eps
            num_p = (barrier(dp + e, dv, 1.0, 0.6)[0] - barrier(dp - e, dv, 1.0, 0.6)[0]) / (2 * eps)
            num_v = (barrier(dp, dv + e, 1.0, 0.6)[0] - barrier(dp, dv - e, 1.0, 0.6)[0]) / (2 * eps)
            assert gp[i] == pytest.approx(num_p, abs=1e-5)
            assert gv[i] == pytest.approx(num_v, abs=1e-5)

    def test_separating_agents_only_see_distance(self):
        h, _, gv = barrier(np.array([2.0, 0.0]), np.array([1.0, 0.0]), 1.0, 0.6)
        assert h == pytest.approx(1.4) and np.all(gv == 0)

    def test_closing_speed_reduces_barrier(self):
        h0 = barrier(np.array([2.0, 0.0]), np.zeros(2), 1.0, 0.6)[0]
        h1 = barrier(np.array([2.0, 0.0]), np.array([-1.0, 0.0]), 1.0, 0.6)[0]
        assert h1 == pytest.approx(h0 - 0.5)


def _random_scene(rng, n_others=3):
    x = np.concatenate([rng.uniform(-1, 1, 2), rng.normal(size=2)])
    others = [np.concatenate([x[:2] + rng.uniform(0.8, 3.0) * np.array([np.cos(a), np.sin(a)]), rng.normal(size=2)])
              for a in rng.uniform(0, 2 * np.pi, n_others)]
    return x, others


class TestFilter:
    def test_no_agents(self):
        u_ref = np.array([0.7, -1.1])
        u, fb = cbf_filter(u_ref, np.zeros(4), [], DisturbancePolytope(np.zeros(4)), FilterParams())
        np.testing.assert_array_equal(u, u_ref)
        assert not fb

    def test_distant_agent_inactive(self):
        u_ref = np.array([0.7, -1.1])
        other = np.array([50.0, 50.0, 0.0, 0.0])
        u, fb = cbf_filter(u_ref, np.zeros(4), [other], DisturbancePolytope(np.zeros(4)), FilterParams())
        assert np.linalg.norm(u - u_ref) <= 1e-8 and not fb

    def test_single_active_constraint_is_projection(self):
        params = FilterParams(relinearize=0)
        x = np.array([0.0, 0.0, 1.0, 0.0])
        other = np.array([1.2, 0.05, -0.2, 0.0])
        u_ref = np.array([1.0, 0.0])
        pol = DisturbancePolytope(np.zeros(4))
        A, b = cbf_constraints(u_ref, x, [other], pol, params)
        assert A @ u_ref > b  # the reference is unsafe
        u, fb = cbf_filter(u_ref, x, [other], pol, params)
        a = A[0]
        want = u_ref - (a @ u_ref - b[0]) / (a @ a) * a
        assert np.all(np.abs(want) <= params.u_max)
        np.testing.assert_allclose(u, want, atol=1e-10)
        assert not fb

    def test_robust_monotonicity(self):
        """A larger disturbance box never admits an input the smaller box rejects."""
        rng = np.random.default_rng(4)
        params = FilterParams()
        for _ in range(50):
            x, others = _random_scene(rng)
            u_ref = rng.uniform(-2, 2, 2)
            w1 = rng.uniform(0, 0.05, 4)
            w2 = w1 + rng.uniform(0, 0.05, 4)
            A1, b1 = cbf_constraints(u_ref, x, others, DisturbancePolytope(w1), params)
            A2, b2 = cbf_constraints(u_ref, x, others, DisturbancePolytope(w2), params)
            np.testing.assert_array_equal(A1, A2)
            U = rng.uniform(-2, 2, (200, 2))
            feas2 = np.all(U @ A2.T <= b2, axis=1)
            feas1 = np.all(U @ A1.T <= b1, axis=1)
            assert np.all(feas1[feas2])

    def test_kkt_on_filter_qps(self):
        rng = np.random.default_rng(5)
        params = FilterParams()
        A_box = np.vstack([np.eye(2), -np.eye(2)])
        solved = 0
        for _ in range(100):
            x, others = _random_scene(rng, 4)
            u_ref = rng.uniform(-3, 3, 2)
            A, b = cbf_constraints(u_ref, x, others, DisturbancePolytope(rng.uniform(0, 0.02, 4)), params)
            A, b = np.vstack([A, A_box]), np.concatenate([b, np.full(4, params.u_max)])
            try:
                res = qp_solve(2 * np.eye(2), -2 * u_ref, A, b)
            except Infeasible:
                continue
            solved += 1
            assert kkt_residual(2 * np.eye(2), -2 * u_ref, A, b, res.x, res.multipliers) <= 1e-8
        assert solved > 50

    def test_infeasible_falls_back(self):
        params = FilterParams()
        x = np.array([0.0, 0.0, 0.0, 0.0])
        # squeezed between two agents closing fast from both sides
        others = [np.array([0.62, 0.0, -3.0, 0.0]), np.array([-0.62, 0.0, 3.0, 0.0])]
        u, fb = cbf_filter(np.zeros(2), x, others, DisturbancePolytope(np.full(4, 0.1)), params)
        assert fb and np.all(np.abs(u) <= params.u_max + 1e-9)


class TestTypes:
    def test_polytope_rejects_negative(self):
        with pytest.raises(ValueError):
            DisturbancePolytope(np.array([0.1, -0.1, 0.0, 0.0]))

    def test_agent_state_finite(self):
        with pytest.raises(ValueError):
            AgentState([0.0, np.nan], [0.0, 0.0])
        s = AgentState([1.0, 2.0], [3.0, 4.0])
        np.testing.assert_array_equal(AgentState.from_vector(s.as_vector()).as_vector(), [1, 2, 3, 4])

    @pytest.mark.parametrize("kw", [{"dt": 0.0}, {"agent_radius": -1.0}, {"horizon": 0}, {"gamma": 0.0}])
    def test_world_config_invariants(self, kw):
        with pytest.raises(ValueError):
            WorldConfig(**kw)

    def test_outcome_tag(self):
        with pytest.raises(ValueError):
            TrialOutcome("crashed", 1, 0.0)

    def test_lipschitz_f(self):
        assert WorldConfig(d_p=1.0, d_v=3.0).lipschitz_f == pytest.approx(1.3)


class TestTrials:
    def test_empty_world_succeeds(self):
        out = run_trial(WorldConfig(n_other_agents=0), ErrorModelBound("none"), seed=0)
        assert out.tag == "success"

    def test_spawn_in_contact(self):
        cfg = WorldConfig()
        out = run_trial(cfg, ErrorModelBound("none"), 0, others=[np.array([0.3, 0.0, 0.0, 0.0])])
        assert out.tag == "collision" and out.steps == 0

    def test_deterministic(self):
        cfg = WorldConfig(d_p=1.0, d_v=2.0)
        a = run_trial(cfg, ErrorModelBound("fixed", half_widths=np.full(4, 0.01)), 3, 7)
        b = run_trial(cfg, ErrorModelBound("fixed", half_widths=np.full(4, 0.01)), 3, 7)
        assert a.tag == b.tag and a.steps == b.steps and a.trajectory_hash == b.trajectory_hash

    def test_trajectory_rows(self):
        cfg = WorldConfig(n_other_agents=2)
        out = run_trial(cfg, ErrorModelBound("none"), 0, record=True)
        rows = np.array(out.trajectory)
        assert rows.shape[1] == 12 and set(rows[:, 1].astype(int)) == {0, 1, 2}

    def test_stuck_when_boxed_in(self):
        # a resting agent sits on the goal; the ego can never reach it
        cfg = WorldConfig(goal=(3.0, 0.0), max_steps=300)
        out = run_trial(cfg, ErrorModelBound("none"), 0, others=[np.array([3.0, 0.0, 0.0, 0.0])])
        assert out.tag == "stuck"


class TestErrorModels:
    @pytest.fixture(scope="class")
    @staticmethod
    def models():
        cfg = WorldConfig()
        XU, R = collect_dynamics_data(cfg, n_steps=400, seed=99)
        return XU, R, train_error_models(cfg, XU, R, epochs=20, m_k=16)

    def test_noise_free_residuals_vanish(self, models):
        _, R, _ = models
        assert np.abs(R).max() <= 1e-12

    def test_bounds_nonnegative_and_grow_with_lipschitz(self, models):
        XU, _, ms = models
        for em in ms.values():
            lo, hi = em.with_lipschitz(0.1), em.with_lipschitz(1.0)
            for r in XU[::40]:
                a, b = lo(r[:4], r[4:]), hi(r[:4], r[4:])
                assert a.shape == (4,) and np.all(a >= 0) and np.all(b >= a - 1e-12)

    def test_fixed_and_none(self):
        np.testing.assert_array_equal(ErrorModelBound("none")(np.zeros(4), np.zeros(2)), 0.0)
        w = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(ErrorModelBound("fixed", half_widths=w)(np.zeros(4), np.zeros(2)), w)


class TestCampaign:
    def test_counts_partition_and_jobs_invariance(self):
        cfg = WorldConfig(n_other_agents=2)
        models = {"fixed": ErrorModelBound("fixed", half_widths=np.full(4, 0.005)), "none": ErrorModelBound("none")}
        a = run_campaign(cfg, models, (0.0, 1.0), (0.0, 3.0), n_trials=3, seed0=11, jobs=1)
        b = run_campaign(cfg, models, (0.0, 1.0), (0.0, 3.0), n_trials=3, seed0=11, jobs=2)
        assert a == b and len(a) == 8
        for row in a:
            assert sum(row[k] for k in OUTCOMES) == 3
            assert row["seed0"] == 11
