import numpy as np
import pytest

from kdarek.baselines import (
    DarekModel,
    EnsembleModel,
    darek_train,
    ensemble_predict,
    ensemble_train,
    gp_fit,
    gp_fit_grid,
    gp_predict,
    se_kernel,
)
from kdarek.bounds import select_knots
from kdarek.errors import NotPD
from kdarek.netcore import KdarekModel, TrainConfig
from oracles import gp_direct


def cosine():
    x = np.linspace(-2 * np.pi, 2 * np.pi, 50)
    return x, 10 * np.cos(x)


class TestGp:
    def test_single_point(self):
        m = gp_fit(np.array([0.3]), np.array([2.0]), 1.0, 1.0, 1e-8)
        mean, std, _ = gp_predict(m, np.array([0.3]))
        assert mean[0] == pytest.approx(2.0, abs=1e-6)
        assert std[0] < 1e-3

    def test_kernel_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 20, 3))
        np.testing.assert_allclose(se_kernel(a, b, 1.3, 2.0), se_kernel(b, a, 1.3, 2.0).T)

    @pytest.mark.parametrize("n", [1, 2, 5, 10])
    def test_matches_inverse_oracle(self, n):
        rng = np.random.default_rng(n)
        X = np.sort(rng.uniform(-3, 3, n))
        y = rng.normal(size=n)
        Xs = np.linspace(-4, 4, 17)
        m = gp_fit(X, y, 1.1, 2.0, 0.1)
        mean, std, (lo, hi) = gp_predict(m, Xs)
        want_mean, want_var = gp_direct(X, y, Xs, 1.1, 2.0, 0.1)
        np.testing.assert_allclose(mean, want_mean, atol=1e-8)
        np.testing.assert_allclose(std ** 2, want_var, atol=1e-8)
        np.testing.assert_allclose(hi - lo, 6 * std)

    def test_far_field_reverts_to_prior(self):
        m = gp_fit(np.array([0.0, 1.0]), np.array([3.0, -1.0]), 0.5, 4.0, 1e-2)
        mean, std, _ = gp_predict(m, np.array([100.0]))
        assert abs(mean[0]) < 1e-12 and std[0] == pytest.approx(4.0)

    def test_variance_small_at_training_inputs(self):
        X = np.linspace(0, 5, 8)
        m = gp_fit(X, np.sin(X), 1.0, 1.0, 1e-2)
        _, std, _ = gp_predict(m, X)
        assert np.all(std >= 0) and np.all(std <= 1e-2 + 1e-12)

    def test_jitter_escalation(self):
        X = np.zeros(4)  # identical inputs: singular without noise
        m = gp_fit(X, np.ones(4), 1.0, 1.0, 0.0)
        assert m.jitter > 0

    def test_not_pd(self, monkeypatch):
        import kdarek.baselines as bl

        monkeypatch.setattr(bl, "se_kernel", lambda A, B, ell, sf: -np.eye(len(A)))
        with pytest.raises(NotPD):
            bl.gp_fit(np.zeros(3), np.ones(3), 1.0, 1.0, 0.0)

    def test_grid_search_picks_best(self):
        x, y = cosine()
        best = gp_fit_grid(x, y)
        other = gp_fit(x, y, 0.5, 1.0, 1e-2)
        assert best.log_marginal >= other.log_marginal


class TestDarek:
    def test_param_count(self):
        x, y = cosine()
        tr = select_knots(x, y, 9)
        assert DarekModel.build(tr.T, tr.Y).n_params() == 70

    def test_kdarek_count(self):
        x, y = cosine()
        tr = select_knots(x, y, 9)
        assert KdarekModel.build(tr.T, tr.Y, [1, 5], 1).n_params() == 45

    def test_constant_target(self):
        x = np.linspace(-1, 1, 30)
        tr = select_knots(x, np.full(30, 2.0), 9)
        _, hist = darek_train(x, np.full(30, 2.0), tr.T, tr.Y, TrainConfig(epochs=300))
        assert hist[-1] <= 1e-3

    def test_gradients_fd(self):
        x, y = cosine()
        tr = select_knots(x, y, 9)
        m, _ = darek_train(x, y, tr.T, tr.Y, TrainConfig(epochs=20))
        _, grads = m.loss_and_grads(x, y)
        h = 1e-5
        for p, g in zip(m.params(), grads):
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + h
                lp, _ = m.loss_and_grads(x, y)
                p[i] = old - h
                lm, _ = m.loss_and_grads(x, y)
                p[i] = old
                num[i] = (lp - lm) / (2 * h)
            assert np.linalg.norm(g - num) <= 1e-4 * np.linalg.norm(num)

    def test_layer2_grids_follow_layer1(self):
        x, y = cosine()
        tr = select_knots(x, y, 9)
        m, _ = darek_train(x, y, tr.T, tr.Y, TrainConfig(epochs=20))
        h = np.sort(m.layer1.forward(tr.T), axis=0)
        np.testing.assert_allclose(m.layer2.grids, h.T)


class TestEnsemble:
    @pytest.fixture(scope="class")
    @staticmethod
    def small():
        x, y = cosine()
        tr = select_knots(x, y, 9)
        return ensemble_train(x, y, tr.T, TrainConfig(epochs=30), n_members=3), x

    def test_mean_is_member_average(self, small):
        ens, x = small
        mean, std, _ = ensemble_predict(ens, x)
        np.testing.assert_allclose(mean, np.mean([m.predict(x) for m in ens.members], axis=0), rtol=0, atol=0)

    def test_permutation_invariant(self, small):
        ens, x = small
        _, s1, _ = ensemble_predict(ens, x)
        _, s2, _ = ensemble_predict(EnsembleModel(ens.members[::-1], ens.seeds[::-1]), x)
        np.testing.assert_allclose(s1, s2, rtol=1e-12, atol=1e-12)

    def test_identical_members_zero_std(self):
        x, y = cosine()
        tr = select_knots(x, y, 9)
        ens = ensemble_train(x, y, tr.T, TrainConfig(epochs=10), seeds=[5, 5, 5])
        _, std, _ = ensemble_predict(ens, x)
        np.testing.assert_allclose(std, 0.0, atol=1e-12)

    def test_full_size(self):
        x, y = cosine()
        tr = select_knots(x, y, 9)
        ens = ensemble_train(x, y, tr.T, TrainConfig(epochs=1))
        assert len(ens.members) == 10 and ens.n_params() == 700
        assert len(set(ens.seeds)) == 10

    def test_needs_two(self):
        with pytest.raises(ValueError):
            ensemble_train(np.zeros(5), np.zeros(5), np.zeros(3), n_members=1)
