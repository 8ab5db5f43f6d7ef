"""Posterior log-densities and gradients against quadrature, Monte-Carlo and
finite-difference oracles."""

import numpy as np
import pytest

from gpinvert.design import TrainingSet, build_training
from gpinvert.emulator import EmulatorModel, condition
from gpinvert.kernels import MATERN52, SQUARED_EXPONENTIAL, kernel
from gpinvert.pde import PointwiseObservation, make_data
from gpinvert.posterior import (
    MARGINAL_FORWARD,
    MARGINAL_POTENTIAL,
    MEAN_FORWARD,
    MEAN_POTENTIAL,
    ApproxPosterior,
    SmoothedUniformPrior,
    density_grid,
    grad_log_density,
    log_density,
    true_posterior_grid,
)

from .test_pde import const_problem, quarters_problem


def u_closed(theta, x):
    return (x - x * x) / (2.0 * np.exp(theta))


def forward_closed(points):
    x = np.asarray(points, dtype=float).ravel()
    return lambda th: u_closed(th[0], x)


@pytest.fixture(scope="module")
def stack_411():
    p = const_problem()
    obs = PointwiseObservation(np.linspace(0, 1, 5)[:, None])
    data = make_data(p, obs, np.array([0.314]), 1e-5, seed=0, mesh_n=2048)
    tr = build_training(p, obs, n_train=5, mesh_n=512)
    k_p = kernel(SQUARED_EXPONENTIAL, 1.0, 0.7, input_dim=1)
    k_s = kernel(MATERN52, 1.0, 0.4, input_dim=1)
    gps = {
        "baseline": condition(EmulatorModel("baseline", k_p), tr),
        "correlated": condition(EmulatorModel("spatially_correlated", k_p, k_s), tr, obs=obs),
        "potential": condition(EmulatorModel("potential", k_p), tr, data=data),
    }
    prior = SmoothedUniformPrior(p.theta_box)
    return p, obs, data, tr, gps, prior


class TestSmoothedUniformPrior:
    def setup_method(self):
        self.pr = SmoothedUniformPrior(np.array([[-1.0, 0.0], [1.0, 2.0]]), lam=1e-3)

    def test_zero_inside(self):
        assert self.pr.log_density(np.array([0.3, 1.7])) == 0.0
        assert np.all(self.pr.grad_log_density(np.array([0.3, 1.7])) == 0.0)

    def test_quadratic_outside(self):
        t = np.array([1.5, -0.2])
        # distance components 0.5 and 0.2
        assert np.isclose(self.pr.log_density(t), -(0.25 + 0.04) / 2e-3)
        assert np.allclose(self.pr.grad_log_density(t), [-0.5 / 1e-3, 0.2 / 1e-3])

    def test_gradient_continuous_at_boundary(self):
        eps = 1e-9
        inside = self.pr.grad_log_density(np.array([1.0 - eps, 1.0]))
        outside = self.pr.grad_log_density(np.array([1.0 + eps, 1.0]))
        assert np.max(np.abs(inside - outside)) < 1e-5

    def test_grad_matches_fd(self):
        t = np.array([1.4, -0.6])
        h = 1e-7
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            fd = (self.pr.log_density(t + e) - self.pr.log_density(t - e)) / (2 * h)
            assert abs(self.pr.grad_log_density(t)[d] - fd) < 1e-3

    def test_validation(self):
        with pytest.raises(ValueError):
            SmoothedUniformPrior(np.array([[1.0], [0.0]]))
        with pytest.raises(ValueError):
            SmoothedUniformPrior(np.array([[0.0], [1.0]]), lam=0.0)


class TestLogDensity:
    def test_mean_forward_zero_misfit_gives_prior(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        # at a training input the emulator mean interpolates G exactly, so
        # aligning y with that value zeroes the misfit
        t = tr.theta[2]
        data0 = type(data)(y=tr.gx[2].copy(), theta_dagger=data.theta_dagger,
                           noise_var=data.noise_var, rng_seed=0)
        ap = ApproxPosterior(MEAN_FORWARD, data0, prior, gp=gps["baseline"])
        assert abs(log_density(ap, t) - prior.log_density(t)) < 1e-10

    def test_marginal_collapses_to_mean_at_zero_variance(self, stack_411):
        # at a training input K_N sits at the jitter floor; with a small
        # residual the two forms differ only by the determinant constant
        p, obs, data, tr, gps, prior = stack_411
        t = tr.theta[1]
        data0 = type(data)(y=tr.gx[1].copy(), theta_dagger=data.theta_dagger,
                           noise_var=data.noise_var, rng_seed=0)
        mean_ap = ApproxPosterior(MEAN_FORWARD, data0, prior, gp=gps["baseline"])
        marg_ap = ApproxPosterior(MARGINAL_FORWARD, data0, prior, gp=gps["baseline"])
        const = -0.5 * 5 * np.log(data.noise_var)
        assert abs(marg_ap.log_density(t) - mean_ap.log_density(t) - const) < 1e-4

    def test_marginal_forward_matches_monte_carlo(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        rng = np.random.default_rng(42)
        sig2 = data.noise_var
        for name in ("baseline", "correlated"):
            gp = gps[name]
            ap = ApproxPosterior(MARGINAL_FORWARD, data, prior, gp=gp)
            for t in (np.array([0.25]), np.array([0.314]), np.array([0.4])):
                m = gp.predict_mean(t)
                c = gp.predict_cov(t)
                chol = np.linalg.cholesky(c + 1e-14 * np.eye(5))
                draws = m + rng.standard_normal((100000, 5)) @ chol.T
                mc = np.mean(np.exp(-0.5 * np.sum((draws - data.y) ** 2, axis=1) / sig2))
                # closed form carries the sqrt(det Gamma / det S) prefactor
                log_closed = ap.log_density(t) - prior.log_density(t) + 2.5 * np.log(sig2)
                assert abs(mc - np.exp(log_closed)) < 0.02 * mc

    def test_potential_variance_inflation(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        mean_ap = ApproxPosterior(MEAN_POTENTIAL, data, prior, gp=gps["potential"])
        marg_ap = ApproxPosterior(MARGINAL_POTENTIAL, data, prior, gp=gps["potential"])
        rng = np.random.default_rng(0)
        for t in rng.uniform(-1, 1, size=(20, 1)):
            gap = marg_ap.log_density(t) - mean_ap.log_density(t)
            assert gap >= -1e-12
            assert abs(gap - 0.5 * gps["potential"].predict_cov(t)) < 1e-12

    def test_permutation_invariance(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        perm = np.array([3, 0, 4, 1, 2])
        obs_p = PointwiseObservation(obs.points[perm])
        tr_p = TrainingSet(theta=tr.theta.copy(), gx=tr.gx[:, perm].copy())
        data_p = type(data)(y=data.y[perm], theta_dagger=data.theta_dagger,
                            noise_var=data.noise_var, rng_seed=data.rng_seed)
        k_p = kernel(SQUARED_EXPONENTIAL, 1.0, 0.7, input_dim=1)
        k_s = kernel(MATERN52, 1.0, 0.4, input_dim=1)
        gp_p = condition(EmulatorModel("spatially_correlated", k_p, k_s), tr_p, obs=obs_p)
        ap = ApproxPosterior(MARGINAL_FORWARD, data, prior, gp=gps["correlated"])
        ap_p = ApproxPosterior(MARGINAL_FORWARD, data_p, prior, gp=gp_p)
        for t in np.random.default_rng(1).uniform(-1, 1, size=(10, 1)):
            a, b = ap.log_density(t), ap_p.log_density(t)
            assert abs(a - b) < 1e-9 * max(1.0, abs(a))

    def test_kind_validation(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        with pytest.raises(ValueError, match="kind"):
            ApproxPosterior("map", data, prior, gp=gps["baseline"])
        with pytest.raises(ValueError, match="conditioned GP"):
            ApproxPosterior(MEAN_FORWARD, data, prior)
        with pytest.raises(ValueError, match="family"):
            ApproxPosterior(MEAN_POTENTIAL, data, prior, gp=gps["baseline"])
        with pytest.raises(ValueError, match="family"):
            ApproxPosterior(MEAN_FORWARD, data, prior, gp=gps["potential"])
        with pytest.raises(ValueError, match="forward"):
            ApproxPosterior("true_closed_form", data, prior)


class TestGradients:
    def approximations(self):
        p = quarters_problem()
        obs = PointwiseObservation(np.linspace(0, 1, 6)[:, None])
        data = make_data(p, obs, np.array([0.098, 0.430]), 1e-4, seed=0, mesh_n=256)
        tr = build_training(p, obs, n_train=4, n_bar=6, d_f=8, d_g=2, mesh_n=256)
        k_p = kernel(SQUARED_EXPONENTIAL, 1.0, 0.8, input_dim=2)
        k_s = kernel(MATERN52, 1.0, 0.4, input_dim=1)
        prior = SmoothedUniformPrior(p.theta_box)
        gps = [
            condition(EmulatorModel("baseline", k_p), tr),
            condition(EmulatorModel("spatially_correlated", k_p, k_s), tr, obs=obs),
            condition(EmulatorModel("pde_constrained", k_p, k_s), tr, problem=p, obs=obs),
        ]
        aps = []
        for gp in gps:
            aps.append(ApproxPosterior(MEAN_FORWARD, data, prior, gp=gp))
            aps.append(ApproxPosterior(MARGINAL_FORWARD, data, prior, gp=gp))
        gp_pot = condition(EmulatorModel("potential", k_p), tr, data=data)
        aps.append(ApproxPosterior(MEAN_POTENTIAL, data, prior, gp=gp_pot))
        aps.append(ApproxPosterior(MARGINAL_POTENTIAL, data, prior, gp=gp_pot))
        return aps

    def test_all_kinds_match_fd(self):
        rng = np.random.default_rng(17)
        thetas = rng.uniform(-0.9, 0.9, size=(5, 2))
        h = 1e-5
        for ap in self.approximations():
            for t in thetas:
                g = grad_log_density(ap, t)
                fd = np.empty(2)
                for d in range(2):
                    e = np.zeros(2)
                    e[d] = h
                    fd[d] = (ap.log_density(t + e) - ap.log_density(t - e)) / (2 * h)
                scale = max(np.max(np.abs(fd)), 1e-6)
                assert np.max(np.abs(g - fd)) < 1e-5 * scale, (ap.kind, ap.gp.model.family, t)

    def test_value_and_grad_consistent(self):
        ap = self.approximations()[3]
        t = np.array([0.2, -0.1])
        v, g = ap.value_and_grad(t)
        assert v == ap.log_density(t)
        assert np.array_equal(g, ap.grad_log_density(t))

    def test_gradient_vanishes_at_grid_argmax(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        ap = ApproxPosterior(MEAN_FORWARD, data, prior, gp=gps["baseline"])
        h = 1e-4
        grid = np.arange(0.0, 0.6, h)
        vals = np.array([ap.log_density(np.array([t])) for t in grid])
        i = int(np.argmax(vals))
        assert 0 < i < grid.size - 1
        curv = abs(vals[i + 1] - 2 * vals[i] + vals[i - 1]) / h**2
        g = ap.grad_log_density(np.array([grid[i]]))
        assert np.abs(g[0]) <= curv * h

    def test_far_field_gradient_is_prior_gradient(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        ap = ApproxPosterior(MEAN_FORWARD, data, prior, gp=gps["baseline"])
        t = np.array([14.0])
        g = ap.grad_log_density(t)
        ref = prior.grad_log_density(t)
        assert np.max(np.abs(g - ref)) < 1e-6 * np.max(np.abs(ref))


class TestTruePosterior:
    def test_grid_normalized_and_centered(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        axes = np.linspace(-1, 1, 2001)
        gd = true_posterior_grid(p, obs, data, prior, axes, forward=forward_closed(obs.points))
        assert abs(gd.integral() - 1.0) < 1e-8
        mode = axes[np.argmax(gd.values)]
        assert abs(mode - 0.314) < 0.05

    def test_concentrates_as_observations_grow(self):
        p = const_problem()
        prior = SmoothedUniformPrior(p.theta_box)
        axes = np.linspace(-1, 1, 4001)
        stds = []
        for d_y in (5, 20, 80):
            obs = PointwiseObservation(np.linspace(0, 1, d_y)[:, None])
            data = make_data(p, obs, np.array([0.314]), 1e-5, seed=3, mesh_n=2048)
            gd = true_posterior_grid(p, obs, data, prior, axes, forward=forward_closed(obs.points))
            mean = np.trapezoid(axes * gd.values, axes)
            var = np.trapezoid((axes - mean) ** 2 * gd.values, axes)
            stds.append(np.sqrt(var))
        assert stds[0] > stds[1] > stds[2]

    def test_solver_route_matches_closed_form(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        axes = np.linspace(0.0, 0.6, 101)
        gd_solver = true_posterior_grid(p, obs, data, prior, axes, mesh_n=512)
        gd_closed = true_posterior_grid(p, obs, data, prior, axes, forward=forward_closed(obs.points))
        assert np.max(np.abs(gd_solver.values - gd_closed.values)) < 1e-2 * gd_closed.values.max()

    def test_dimension_cap(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        ap = ApproxPosterior(MEAN_FORWARD, data, prior, gp=gps["baseline"])
        with pytest.raises(NotImplementedError):
            density_grid(ap, [np.linspace(0, 1, 3)] * 3)

    def test_density_grid_matches_log_density(self, stack_411):
        p, obs, data, tr, gps, prior = stack_411
        ap = ApproxPosterior(MARGINAL_FORWARD, data, prior, gp=gps["baseline"])
        axes = np.linspace(-0.2, 0.8, 501)
        gd = density_grid(ap, axes)
        assert abs(gd.integral() - 1.0) < 1e-8
        # ratios of the table reproduce ratios of exp(log_density)
        i, j = 120, 380
        lr = ap.log_density(np.array([axes[i]])) - ap.log_density(np.array([axes[j]]))
        assert abs(np.log(gd.values[i] / gd.values[j]) - lr) < 1e-9
