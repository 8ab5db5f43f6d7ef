"""Emulator conditioning and prediction against independent dense oracles.

The joint-prior family is checked entry by entry against a Gram matrix
assembled with the pointwise operator/kernel helper (itself validated by
finite differences elsewhere), and all gradients are checked against central
differences of the predictions.
"""

import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from gpinvert.design import TrainingSet, build_training
from gpinvert.emulator import EmulatorModel, condition
from gpinvert.errors import NumericalError
from gpinvert.kernels import MATERN52, SQUARED_EXPONENTIAL, kernel
from gpinvert.pde import (
    LocalAverageObservation,
    PointwiseObservation,
    apply_operator_to_kernel,
    forward_map,
    make_data,
)

from .test_pde import const_problem, quarters_problem


def obs5():
    return PointwiseObservation(np.linspace(0.0, 1.0, 5)[:, None])


def obs6():
    return PointwiseObservation(np.linspace(0.0, 1.0, 6)[:, None])


def kp(dim, l=0.7):
    return kernel(SQUARED_EXPONENTIAL, 1.0, l, input_dim=dim)


def fd_grad(f, theta, h=1e-6):
    """Central differences of f along every coordinate, stacked last."""
    cols = []
    for d in range(theta.size):
        e = np.zeros_like(theta)
        e[d] = h
        cols.append((np.asarray(f(theta + e)) - np.asarray(f(theta - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def assert_rel(a, b, rtol, floor=1e-12):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.max(np.abs(b)), floor)
    assert np.max(np.abs(a - b)) <= rtol * denom, (
        f"max abs diff {np.max(np.abs(a - b)):.3e} vs scale {denom:.3e}"
    )


def empty_training(d_theta, d_y):
    return TrainingSet(theta=np.zeros((0, d_theta)), gx=np.zeros((0, d_y)))


# ---------------------------------------------------------------------------


class TestBaseline:
    def test_single_point_closed_form(self):
        # N = 1: mean k(t,t0)/k(t0,t0) * g0, variance k(t,t) - k(t,t0)^2/k(t0,t0)
        k = kp(1)
        tr = TrainingSet(theta=np.array([[0.2]]), gx=np.array([[1.5, -0.3]]))
        gp = condition(EmulatorModel("baseline", k), tr)
        t = np.array([0.75])
        w = k.value(t, [0.2]) / k.value([0.2], [0.2])
        assert np.max(np.abs(gp.predict_mean(t) - w * tr.gx[0])) < 1e-10
        var = k.value(t, t) - k.value(t, [0.2]) ** 2 / k.value([0.2], [0.2])
        assert np.max(np.abs(gp.predict_cov(t) - var * np.eye(2))) < 1e-10
        # exact interpolation at the training input
        assert np.max(np.abs(gp.predict_mean(np.array([0.2])) - tr.gx[0])) < 1e-10
        assert np.max(np.abs(gp.predict_cov(np.array([0.2])))) < 1e-8

    def test_far_field_reverts_to_prior(self):
        p = const_problem()
        tr = build_training(p, obs5(), n_train=4, mesh_n=64)
        gp = condition(EmulatorModel("baseline", kp(1)), tr)
        far = np.array([60.0])
        assert np.max(np.abs(gp.predict_mean(far))) < 1e-3
        assert np.max(np.abs(gp.predict_cov(far) - np.eye(5))) < 1e-8

    def test_prior_recovery_empty_training(self):
        k = kp(2)
        gp = condition(EmulatorModel("baseline", k), empty_training(2, 3))
        t = np.array([0.4, -0.2])
        assert np.all(gp.predict_mean(t) == 0.0)
        assert np.allclose(gp.predict_cov(t), k.value(t, t) * np.eye(3))
        assert np.all(gp.predict_mean_grad(t) == 0.0)
        assert gp.log_marginal_likelihood() == 0.0

    def test_log_evidence_standard_normal_point(self):
        tr = TrainingSet(theta=np.array([[0.0]]), gx=np.array([[0.0]]))
        gp = condition(EmulatorModel("baseline", kp(1)), tr)
        assert abs(gp.log_marginal_likelihood() + 0.5 * np.log(2.0 * np.pi)) < 1e-9

    def test_log_evidence_decreases_when_fit_corrupted(self):
        p = const_problem()
        tr = build_training(p, obs5(), n_train=4, mesh_n=64)
        gp = condition(EmulatorModel("baseline", kp(1)), tr)
        bad = TrainingSet(theta=tr.theta, gx=tr.gx.copy())
        bad.gx[2, 3] += 10.0
        gp_bad = condition(EmulatorModel("baseline", kp(1)), bad)
        assert gp_bad.log_marginal_likelihood() < gp.log_marginal_likelihood()

    def test_log_evidence_dense_oracle(self):
        p = const_problem()
        tr = build_training(p, obs5(), n_train=3, mesh_n=64)
        k = kp(1)
        gp = condition(EmulatorModel("baseline", k), tr)
        g = np.kron(k.gram(tr.theta), np.eye(5))
        g += gp.jitter_used * (np.trace(k.gram(tr.theta)) / 3) * np.eye(15)
        v = tr.gx.ravel()
        ref = -0.5 * v @ np.linalg.solve(g, v) - 0.5 * np.linalg.slogdet(g)[1] \
            - 0.5 * 15 * np.log(2 * np.pi)
        assert abs(gp.log_marginal_likelihood() - ref) < 1e-8


class TestKroneckerEquivalence:
    """Separable spatial correlation must not move the mean, and the
    conditional covariance must stay a scalar multiple of K_s."""

    def setup_method(self):
        self.p = const_problem()
        self.tr = build_training(self.p, obs5(), n_train=4, mesh_n=128)
        self.k_p = kp(1)
        self.k_s = kernel(MATERN52, 1.0, 0.4, input_dim=1)
        self.base = condition(EmulatorModel("baseline", self.k_p), self.tr)
        self.corr = condition(
            EmulatorModel("spatially_correlated", self.k_p, self.k_s), self.tr, obs=obs5()
        )
        self.s_uu = self.k_s.gram(obs5().points)

    def test_means_agree(self):
        rng = np.random.default_rng(3)
        for t in rng.uniform(-1, 1, size=(50, 1)):
            assert np.max(np.abs(self.base.predict_mean(t) - self.corr.predict_mean(t))) < 1e-8

    def test_mean_grads_agree(self):
        rng = np.random.default_rng(4)
        for t in rng.uniform(-1, 1, size=(20, 1)):
            assert np.max(np.abs(self.base.predict_mean_grad(t) - self.corr.predict_mean_grad(t))) < 1e-8

    def test_cov_factorizes(self):
        rng = np.random.default_rng(5)
        for t in rng.uniform(-1, 1, size=(50, 1)):
            c = self.corr.predict_cov(t)
            scal = self.base.predict_cov(t)[0, 0]
            assert np.max(np.abs(c - scal * self.s_uu)) < 1e-8

    def test_interpolates_training(self):
        for i in range(4):
            assert np.max(np.abs(self.corr.predict_mean(self.tr.theta[i]) - self.tr.gx[i])) < 1e-8
            assert np.max(np.abs(self.corr.predict_cov(self.tr.theta[i]))) < 1e-8


def joint_setup(n=2, n_bar=3, d_f=4, d_g=2, d_y=3, mesh_n=64, ks_l=0.35):
    p = quarters_problem()
    obs = PointwiseObservation(np.linspace(0.0, 1.0, d_y)[:, None])
    tr = build_training(p, obs, n_train=n, n_bar=n_bar, d_f=d_f, d_g=d_g, mesh_n=mesh_n)
    k_p = kp(2, l=0.8)
    k_s = kernel(SQUARED_EXPONENTIAL, 1.0, ks_l, input_dim=1)
    model = EmulatorModel("pde_constrained", k_p, k_s)
    gp = condition(model, tr, problem=p, obs=obs)
    return p, obs, tr, k_p, k_s, gp


class TestJointDenseOracle:
    """Entry-by-entry Gram assembly through the pointwise operator helper."""

    def setup_method(self):
        self.p, self.obs, self.tr, self.k_p, self.k_s, self.gp = joint_setup()

    def dense_gram_and_cross(self, t):
        p, tr, k_p, k_s = self.p, self.tr, self.k_p, self.k_s
        X = self.obs.points
        xf, xg, tb = tr.xf, tr.xg, tr.theta_bar
        ap = apply_operator_to_kernel
        blocks = []
        for i, ti in enumerate(tr.theta):
            row = []
            for x in X:
                cols = []
                for j, tj in enumerate(tr.theta):
                    cols += [k_p.value(ti, tj) * k_s.value(x, xp) for xp in X]
                for j, tj in enumerate(tb):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "B_right", x, xb) for xb in xg]
                for j, tj in enumerate(tb):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "L_right", x, xc, theta_p=tj) for xc in xf]
                row.append(cols)
            blocks.append(row)
        rows_u = [c for r in blocks for c in r]
        rows_g = []
        for i, ti in enumerate(tb):
            for xb in xg:
                cols = []
                for j, tj in enumerate(tr.theta):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "B_left", xb, xp) for xp in X]
                for j, tj in enumerate(tb):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "BB", xb, xb2) for xb2 in xg]
                for j, tj in enumerate(tb):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "BL", xb, xc, theta_p=tj) for xc in xf]
                rows_g.append(cols)
        rows_f = []
        for i, ti in enumerate(tb):
            for xa in xf:
                cols = []
                for j, tj in enumerate(tr.theta):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "L_left", xa, xp, theta=ti) for xp in X]
                for j, tj in enumerate(tb):
                    cols += [k_p.value(ti, tj) * ap(p, k_s, "LB", xa, xb, theta=ti) for xb in xg]
                for j, tj in enumerate(tb):
                    cols += [
                        k_p.value(ti, tj) * ap(p, k_s, "LL", xa, xc, theta=ti, theta_p=tj)
                        for xc in xf
                    ]
                rows_f.append(cols)
        gram = np.array(rows_u + rows_g + rows_f)
        cross = []
        for x in X:
            cols = []
            for j, tj in enumerate(self.tr.theta):
                cols += [k_p.value(t, tj) * k_s.value(x, xp) for xp in X]
            for j, tj in enumerate(tb):
                cols += [k_p.value(t, tj) * ap(p, k_s, "B_right", x, xb) for xb in xg]
            for j, tj in enumerate(tb):
                cols += [k_p.value(t, tj) * ap(p, k_s, "L_right", x, xc, theta_p=tj) for xc in xf]
            cross.append(cols)
        return gram, np.array(cross)

    def test_mean_cov_match_dense_assembly(self):
        gvec = np.concatenate([self.tr.gx.ravel(), self.tr.g_vals.ravel(), self.tr.f_vals.ravel()])
        rng = np.random.default_rng(11)
        for t in rng.uniform(-1, 1, size=(4, 2)):
            gram, cross = self.dense_gram_and_cross(t)
            gram = gram + self.gp.jitter_used * (np.trace(gram) / gram.shape[0]) * np.eye(gram.shape[0])
            sol = np.linalg.solve(gram, gvec)
            mean_ref = cross @ sol
            cov_ref = self.k_p.value(t, t) * self.k_s.gram(self.obs.points) \
                - cross @ np.linalg.solve(gram, cross.T)
            assert np.max(np.abs(self.gp.predict_mean(t) - mean_ref)) < 1e-8
            assert np.max(np.abs(self.gp.predict_cov(t) - cov_ref)) < 1e-8

    def test_log_evidence_matches_dense(self):
        gvec = np.concatenate([self.tr.gx.ravel(), self.tr.g_vals.ravel(), self.tr.f_vals.ravel()])
        gram, _ = self.dense_gram_and_cross(np.zeros(2))
        gram = gram + self.gp.jitter_used * (np.trace(gram) / gram.shape[0]) * np.eye(gram.shape[0])
        ref = -0.5 * gvec @ np.linalg.solve(gram, gvec) \
            - 0.5 * np.linalg.slogdet(gram)[1] - 0.5 * gvec.size * np.log(2 * np.pi)
        assert abs(self.gp.log_marginal_likelihood() - ref) < 1e-8


class TestJointBehaviour:
    def test_interpolates_training(self):
        _, _, tr, _, _, gp = joint_setup(n=3, d_y=4)
        for i in range(3):
            assert np.max(np.abs(gp.predict_mean(tr.theta[i]) - tr.gx[i])) < 1e-8
            c = gp.predict_cov(tr.theta[i])
            assert np.max(np.abs(c)) < 1e-8

    def test_cov_psd_at_random_points(self):
        _, _, _, _, _, gp = joint_setup()
        rng = np.random.default_rng(7)
        for t in rng.uniform(-1, 1, size=(10, 2)):
            w = np.linalg.eigvalsh(gp.predict_cov(t))
            assert w.min() > -1e-8

    def test_operator_consistency_of_mean_field(self):
        # second differences of the predictive field reproduce the forcing
        # at the source collocation sites, for conditioning parameters
        p, _, tr, _, _, gp = joint_setup(n=3, n_bar=6, d_f=10, d_y=5, ks_l=0.3)
        h = 4e-4
        for j in (0, 3):
            t = tr.theta_bar[j]
            kappa = p.diffusion.log_kappa(t, tr.xf)
            for c, x in enumerate(tr.xf[:, 0]):
                pts = np.array([[x - h], [x], [x + h]])
                u = gp.predict_field(t, pts)
                lap = (u[0] - 2.0 * u[1] + u[2]) / h**2
                lhs = -np.exp(kappa[c]) * lap
                assert abs(lhs - tr.f_vals[j, c]) < 0.05 * abs(tr.f_vals[j, c])

    def test_constrained_beats_baseline_at_same_n(self):
        # operator information substitutes for forward solves
        p = const_problem()
        obs = obs5()
        tr2 = build_training(p, obs, n_train=2, n_bar=10, d_f=5, d_g=2, mesh_n=256)
        k_p = kp(1)
        k_s = kernel(SQUARED_EXPONENTIAL, 1.0, 0.35, input_dim=1)
        gp_j = condition(EmulatorModel("pde_constrained", k_p, k_s), tr2, problem=p, obs=obs)
        gp_b = condition(EmulatorModel("baseline", k_p), tr2)
        x = np.linspace(0, 1, 5)
        thetas = np.linspace(-0.9, 0.9, 13)[:, None]
        truth = np.array([(x - x**2) / (2.0 * np.exp(t[0])) for t in thetas])
        err_j = np.mean([np.abs(gp_j.predict_mean(t) - truth[i]).max() for i, t in enumerate(thetas)])
        err_b = np.mean([np.abs(gp_b.predict_mean(t) - truth[i]).max() for i, t in enumerate(thetas)])
        assert err_j < err_b

    def test_variance_shrinks_with_n_and_df(self):
        p = quarters_problem()
        obs = obs6()
        k_p, k_s = kp(2), kernel(SQUARED_EXPONENTIAL, 1.0, 0.35, input_dim=1)
        probes = np.random.default_rng(9).uniform(-1, 1, size=(8, 2))

        def avg_var(gp):
            return float(np.mean([np.trace(gp.predict_cov(t)) for t in probes]))

        prev = np.inf
        for n in (1, 2, 4):
            tr = build_training(p, obs, n_train=n, mesh_n=64)
            v = avg_var(condition(EmulatorModel("baseline", k_p), tr))
            assert v <= prev + 1e-12
            prev = v
        v_small = avg_var(condition(
            EmulatorModel("pde_constrained", k_p, k_s),
            build_training(p, obs, n_train=2, n_bar=8, d_f=2, d_g=2, mesh_n=64),
            problem=p, obs=obs))
        v_large = avg_var(condition(
            EmulatorModel("pde_constrained", k_p, k_s),
            build_training(p, obs, n_train=2, n_bar=8, d_f=20, d_g=2, mesh_n=64),
            problem=p, obs=obs))
        assert v_large < v_small


class TestGradients:
    """Closed-form gradients against central differences of the predictions."""

    def gps(self):
        p = quarters_problem()
        obs = obs6()
        tr = build_training(p, obs, n_train=4, n_bar=6, d_f=8, d_g=2, mesh_n=64)
        k_p = kp(2)
        k_s = kernel(MATERN52, 1.0, 0.4, input_dim=1)
        data = make_data(p, obs, np.array([0.098, 0.430]), 1e-4, seed=0, mesh_n=64)
        return [
            condition(EmulatorModel("baseline", k_p), tr),
            condition(EmulatorModel("spatially_correlated", k_p, k_s), tr, obs=obs),
            condition(EmulatorModel("pde_constrained", k_p, k_s), tr, problem=p, obs=obs),
            condition(EmulatorModel("potential", k_p), tr, data=data),
        ]

    def test_mean_grad_matches_fd(self):
        rng = np.random.default_rng(21)
        thetas = rng.uniform(-0.9, 0.9, size=(5, 2))
        for gp in self.gps():
            for t in thetas:
                assert_rel(gp.predict_mean_grad(t), fd_grad(gp.predict_mean, t), 1e-5, floor=1e-8)

    def test_cov_grad_matches_fd(self):
        rng = np.random.default_rng(22)
        thetas = rng.uniform(-0.9, 0.9, size=(5, 2))
        for gp in self.gps():
            for t in thetas:
                ref = fd_grad(lambda s: gp.predict_cov(s), t, h=1e-5)
                assert_rel(gp.predict_cov_grad(t), ref, 1e-4, floor=1e-8)

    def test_inactive_coordinate_has_zero_gradient_column(self):
        # all training points share theta_2 = 0.3; at test points on that
        # slice the kernel is flat in the second coordinate
        rng = np.random.default_rng(23)
        theta = np.column_stack([rng.uniform(-1, 1, 5), np.full(5, 0.3)])
        tr = TrainingSet(theta=theta, gx=rng.standard_normal((5, 3)))
        gp = condition(EmulatorModel("baseline", kp(2)), tr)
        g = gp.predict_mean_grad(np.array([0.1, 0.3]))
        assert np.all(g[:, 1] == 0.0)
        assert np.any(g[:, 0] != 0.0)


class TestPotential:
    def test_interpolates_misfit_values(self):
        p = quarters_problem()
        obs = obs6()
        tr = build_training(p, obs, n_train=4, mesh_n=64)
        data = make_data(p, obs, np.array([0.098, 0.430]), 1e-4, seed=1, mesh_n=64)
        gp = condition(EmulatorModel("potential", kp(2)), tr, data=data)
        phi = 0.5 * np.sum((tr.gx - data.y) ** 2, axis=1) / data.noise_var
        for i in range(4):
            assert abs(gp.predict_mean(tr.theta[i]) - phi[i]) < 1e-6 * max(1.0, abs(phi[i]))
            assert abs(gp.predict_cov(tr.theta[i])) < 1e-8

    def test_scalar_shapes(self):
        p = const_problem()
        tr = build_training(p, obs5(), n_train=3, mesh_n=64)
        data = make_data(p, obs5(), np.array([0.314]), 1e-5, seed=0, mesh_n=64)
        gp = condition(EmulatorModel("potential", kp(1)), tr, data=data)
        t = np.array([0.5])
        assert np.isscalar(gp.predict_mean(t))
        assert np.isscalar(gp.predict_cov(t))
        assert gp.predict_mean_grad(t).shape == (1,)
        assert gp.predict_cov_grad(t).shape == (1,)


class TestIntervalObservations:
    def test_pair_gram_matches_quadrature(self):
        iv = np.array([[0.1, 0.3], [0.55, 0.9]])
        obs = LocalAverageObservation(iv)
        k_s = kernel(SQUARED_EXPONENTIAL, 1.3, 0.25, input_dim=1)
        from gpinvert.emulator import _ObsFunctionals

        fun = _ObsFunctionals(obs, 1)
        s = fun.pair_gram(k_s)
        for i in range(2):
            for j in range(2):
                ref, _ = dblquad(
                    lambda xp, x: k_s.value([x], [xp]),
                    iv[i, 0], iv[i, 1], iv[j, 0], iv[j, 1],
                    epsabs=1e-12, epsrel=1e-12,
                )
                assert abs(s[j, i] - ref) < 1e-10

    def test_cross_deriv_matches_quadrature_with_kink(self):
        # a Matern kernel differentiated twice has a kink at x = xf; the
        # panel split keeps the quadrature spectral anyway
        iv = np.array([[0.2, 0.6]])
        obs = LocalAverageObservation(iv)
        k_s = kernel(MATERN52, 0.8, 0.3, input_dim=1)
        xf = np.array([[0.37]])
        from gpinvert.emulator import _ObsFunctionals

        fun = _ObsFunctionals(obs, 1, split_at=xf[:, 0])
        got = fun.cross_deriv(k_s, xf, (2,))[0, 0]
        ref, _ = quad(
            lambda x: k_s.deriv_mixed([x], xf[0], (0,), (2,)),
            0.2, 0.6, points=[0.37], epsabs=1e-13, epsrel=1e-13, limit=200,
        )
        assert abs(got - ref) < 1e-9

    def test_joint_family_with_interval_data(self):
        p = const_problem()
        edges = np.linspace(0, 1, 5)
        obs = LocalAverageObservation(np.column_stack([edges[:-1], edges[1:]]))
        tr = build_training(p, obs, n_train=3, n_bar=5, d_f=6, d_g=2, mesh_n=512)
        k_s = kernel(SQUARED_EXPONENTIAL, 1.0, 0.35, input_dim=1)
        gp = condition(EmulatorModel("pde_constrained", kp(1), k_s), tr, problem=p, obs=obs)
        # averaging functionals condition the Gram worse than point values,
        # so the jitter floor shows up amplified in the residual
        for i in range(3):
            assert np.max(np.abs(gp.predict_mean(tr.theta[i]) - tr.gx[i])) < 1e-6
        # interior prediction still tracks the true observed averages
        t = np.array([0.1])
        ref = forward_map(p, obs, t, mesh_n=512)
        assert np.max(np.abs(gp.predict_mean(t) - ref)) < 5e-3


class TestNumerics:
    def test_duplicate_training_points_need_jitter(self):
        theta = np.array([[0.2], [0.2], [0.7]])
        gx = np.array([[1.0, 2.0], [1.0, 2.0], [0.5, 0.1]])
        tr = TrainingSet(theta=theta, gx=gx)
        gp = condition(EmulatorModel("baseline", kp(1)), tr)
        assert gp.jitter_used <= 1e-6
        assert np.max(np.abs(gp.predict_mean(np.array([0.2])) - [1.0, 2.0])) < 1e-4

    def test_indefinite_matrix_reports_eigenvalue(self):
        from gpinvert.emulator import _chol_jitter

        with pytest.raises(NumericalError, match="eigenvalue"):
            _chol_jitter(np.diag([1.0, -1.0]), 1e-12)

    def test_sidecar_roundtrip(self, tmp_path):
        p = const_problem()
        tr = build_training(p, obs5(), n_train=4, mesh_n=64)
        cache = tmp_path / "gp.npz"
        gp1 = condition(EmulatorModel("baseline", kp(1)), tr, cache_path=cache)
        assert cache.exists()
        gp2 = condition(EmulatorModel("baseline", kp(1)), tr, cache_path=cache)
        t = np.array([0.33])
        assert np.array_equal(gp1.predict_mean(t), gp2.predict_mean(t))
        # a different training set must not reuse the stale factor
        tr2 = build_training(p, obs5(), n_train=4, mesh_n=128)
        gp3 = condition(EmulatorModel("baseline", kp(1)), tr2, cache_path=cache)
        assert not np.array_equal(gp3.predict_mean(t), gp1.predict_mean(t))

    def test_family_validation(self):
        with pytest.raises(ValueError, match="family"):
            EmulatorModel("krige", kp(1))
        with pytest.raises(ValueError, match="spatial kernel"):
            EmulatorModel("spatially_correlated", kp(1))
        p = const_problem()
        tr = build_training(p, obs5(), n_train=2, mesh_n=64)
        with pytest.raises(ValueError, match="observation"):
            condition(EmulatorModel("spatially_correlated", kp(1), kp(1)), tr)
        with pytest.raises(ValueError, match="operator data"):
            condition(EmulatorModel("pde_constrained", kp(1), kp(1)), tr, problem=p, obs=obs5())
        with pytest.raises(ValueError, match="data"):
            condition(EmulatorModel("potential", kp(1)), tr)
