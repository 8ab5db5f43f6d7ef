"""Gaussian-process surrogates for the parameter-to-observation map.

Four constructions share one interface:

* ``baseline`` -- independent outputs, prior covariance k_p(theta, theta') I.
* ``spatially_correlated`` -- separable prior k_p(theta, theta') K_s(X, X),
  conditioned with Kronecker algebra (one N x N solve plus one d_y x d_y
  solve instead of an (N d_y)^3 factorization).
* ``pde_constrained`` -- joint prior over observed field values, boundary
  values and source values; the differential operator enters through the
  spatial kernel's closed-form derivatives.
* ``potential`` -- a scalar surrogate for the misfit potential
  0.5 ||G(theta) - y||^2 / noise_var built from the same forward solves.

All predictions carry closed-form gradients in theta, which is what makes
Langevin sampling over the surrogate cheap.  Observation functionals may be
point evaluations or interval averages; the latter are applied to the
spatial kernel by fixed Gauss-Legendre panels, split at source collocation
points so limited kernel smoothness never crosses a panel interior.
"""

from __future__ import annotations

import hashlib
import os
import threading
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .design import TrainingSet
from .errors import NumericalError
from .kernels import Kernel
from .pde import PdeProblem, boundary_terms, operator_terms

__all__ = ["EmulatorModel", "ConditionedGP", "condition", "FAMILIES", "Bundle"]

FAMILIES = ("baseline", "spatially_correlated", "pde_constrained", "potential")

# Jitter ladder: multiples of the mean Gram diagonal, swept upward until the
# Cholesky succeeds.  The ceiling matches what predictions can absorb without
# visibly perturbing interpolation.
_JITTER_MAX_REL = 1e-6

_GL_NODES = 16

Dims = namedtuple("Dims", "d_y n_train n_bar d_f d_g")
Bundle = namedtuple("Bundle", "mean cov mean_grad cov_grad")


@dataclass(frozen=True)
class EmulatorModel:
    """Emulator family plus its parameter kernel k_p and spatial kernel k_s."""

    family: str
    k_p: Kernel
    k_s: Kernel | None = None
    jitter: float = 1e-12

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown emulator family {self.family!r}, expected one of {FAMILIES}")
        if self.family in ("spatially_correlated", "pde_constrained") and self.k_s is None:
            raise ValueError(f"family {self.family!r} needs a spatial kernel k_s")
        if not (0 < self.jitter <= _JITTER_MAX_REL):
            raise ValueError(f"jitter must lie in (0, {_JITTER_MAX_REL}]")


def condition(
    model: EmulatorModel,
    training: TrainingSet,
    problem: PdeProblem | None = None,
    obs=None,
    data=None,
    cache_path=None,
) -> "ConditionedGP":
    """Condition the chosen prior on a training set.

    ``obs`` supplies the observation functionals (needed whenever the prior
    has spatial structure), ``problem`` the differential operator for the
    constrained family, and ``data`` the (y, noise_var) pair defining the
    potential.  ``cache_path`` points to an optional ``.npz`` sidecar holding
    the Gram factor and weights; it is validated against a fingerprint of
    model and training set and rebuilt on mismatch.
    """
    if model.family == "baseline":
        return _BaselineGP(model, training, cache_path)
    if model.family == "spatially_correlated":
        if obs is None:
            raise ValueError("spatially_correlated emulation needs the observation operator")
        return _CorrelatedGP(model, training, obs, cache_path)
    if model.family == "pde_constrained":
        if obs is None or problem is None:
            raise ValueError("pde_constrained emulation needs the problem and the observation operator")
        if not training.has_operator_data:
            raise ValueError("pde_constrained emulation needs operator data (theta_bar, xf, f_vals)")
        return _JointGP(model, training, problem, obs, cache_path)
    if data is None:
        raise ValueError("potential emulation needs data=(y, noise_var)")
    return _PotentialGP(model, training, data, cache_path)


# ---------------------------------------------------------------------------
# linear algebra helpers


def _chol_jitter(G: np.ndarray, start: float):
    """Cholesky of G + jitter * mean(diag) * I, sweeping the jitter upward.

    Returns the factor (scipy cho_factor tuple) and the relative jitter that
    succeeded.  Raises NumericalError with the smallest eigenvalue if even
    the largest permitted jitter fails.
    """
    m = G.shape[0]
    scale = float(np.trace(G)) / m
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    eye = np.eye(m)
    rel = start
    while rel <= _JITTER_MAX_REL * (1.0 + 1e-12):
        try:
            return cho_factor(G + rel * scale * eye, lower=True), rel
        except np.linalg.LinAlgError:
            rel *= 10.0
    w = np.linalg.eigvalsh(G)
    raise NumericalError(
        f"Gram matrix of size {m} is not positive definite even with jitter "
        f"{_JITTER_MAX_REL:.0e} * tr/n; smallest eigenvalue {w[0]:.6e}"
    )


def _logdet(chol) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol[0]))))


def _fingerprint(model: EmulatorModel, training: TrainingSet, extra: str = "") -> str:
    blob = repr(model) + training.to_json() + extra
    return hashlib.sha256(blob.encode()).hexdigest()


def _load_sidecar(path, fingerprint, names):
    if path is None or not os.path.exists(path):
        return None
    with np.load(path, allow_pickle=False) as z:
        if str(z.get("fingerprint")) != fingerprint:
            return None
        try:
            return {n: z[n] for n in names}
        except KeyError:
            return None


def _save_sidecar(path, fingerprint, arrays):
    if path is None:
        return
    # unique tmp name so concurrent writers cannot interleave; savez would
    # append .npz to a suffix-less name
    tmp = f"{path}.tmp-{os.getpid()}-{threading.get_ident()}.npz"
    np.savez(tmp, fingerprint=np.asarray(fingerprint), **arrays)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# observation functionals applied to the spatial kernel


class _ObsFunctionals:
    """Observation functionals as weighted point sets.

    Point observations are single nodes with unit weight; interval averages
    become Gauss-Legendre nodes per panel.  Panels are split at the supplied
    interior points (source collocation sites) because the Matern kernel has
    only finitely many derivatives across its diagonal.
    """

    def __init__(self, obs, spatial_dim: int, split_at=()):
        if obs.kind == "pointwise":
            pts = np.asarray(obs.points, dtype=float)
            self.nodes = pts[:, None, :]
            self.weights = np.ones((pts.shape[0], 1))
        elif obs.kind == "local_average":
            if spatial_dim != 1:
                raise ValueError("interval-average observations are one-dimensional")
            gx, gw = np.polynomial.legendre.leggauss(_GL_NODES)
            rows_n, rows_w = [], []
            for a, b in obs.intervals:
                cuts = [a] + sorted(s for s in split_at if a < s < b) + [b]
                ns, ws = [], []
                for lo, hi in zip(cuts[:-1], cuts[1:]):
                    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
                    ns.extend(mid + half * gx)
                    ws.extend(half * gw)
                rows_n.append(ns)
                rows_w.append(ws)
            q = max(len(r) for r in rows_n)
            nodes = np.zeros((len(rows_n), q, 1))
            weights = np.zeros((len(rows_n), q))
            for i, (ns, ws) in enumerate(zip(rows_n, rows_w)):
                nodes[i, : len(ns), 0] = ns
                nodes[i, len(ns):, 0] = 0.5 * (obs.intervals[i][0] + obs.intervals[i][1])
                weights[i, : len(ws)] = ws
            self.nodes, self.weights = nodes, weights
        else:
            raise ValueError(f"unsupported observation kind {obs.kind!r}")
        self.d_y = self.nodes.shape[0]
        self._flat = self.nodes.reshape(-1, self.nodes.shape[-1])
        self._zero = (0,) * spatial_dim

    def pair_gram(self, ks: Kernel) -> np.ndarray:
        """Functionals applied to both kernel arguments, shape (d_y, d_y)."""
        g = ks.gram(self._flat, self._flat)
        q = self.nodes.shape[1]
        g4 = g.reshape(self.d_y, q, self.d_y, q)
        return np.einsum("iq,iqjr,jr->ij", self.weights, g4, self.weights)

    def cross_deriv(self, ks: Kernel, X: np.ndarray, order_b) -> np.ndarray:
        """Functional on the left, D^order_b at rows of X on the right."""
        m = ks.deriv_mixed_gram(self._flat, X, self._zero, order_b)
        q = self.nodes.shape[1]
        return np.einsum("iq,iqm->im", self.weights, m.reshape(self.d_y, q, -1))

    def from_points(self, ks: Kernel, X: np.ndarray) -> np.ndarray:
        """Plain evaluations at rows of X on the left, functionals on the right."""
        g = ks.gram(X, self._flat)
        q = self.nodes.shape[1]
        return np.einsum("jq,mjq->mj", self.weights, g.reshape(X.shape[0], self.d_y, q))


def _boundary_ops(problem: PdeProblem, xg: np.ndarray):
    """Per-point boundary functional: (multi_index, sign) for each row of xg."""
    ops = []
    for j in range(xg.shape[0]):
        terms = boundary_terms(problem, xg[j : j + 1])
        (mi, coef), = terms
        ops.append((mi, float(coef[0])))
    return ops


# ---------------------------------------------------------------------------
# conditioned processes


class ConditionedGP:
    """A GP prior conditioned on training data; all predictions are O(small).

    Subclasses fill in the family-specific algebra.  ``dims`` records
    (d_y, n_train, n_bar, d_f, d_g).  The scalar ``potential`` family returns
    floats for mean/cov and (d_theta,) vectors for their gradients; the
    vector families return (d_y,), (d_y, d_y), (d_y, d_theta) and
    (d_y, d_y, d_theta) arrays.
    """

    model: EmulatorModel
    training: TrainingSet
    dims: Dims
    jitter_used: float

    def predict_mean(self, theta):
        return self.predict_bundle(np.asarray(theta, dtype=float), want_grads=False).mean

    def predict_cov(self, theta, theta_p=None):
        theta = np.asarray(theta, dtype=float)
        if theta_p is None:
            c = self._cov(theta, theta)
            return 0.5 * (c + c.T) if np.ndim(c) == 2 else c
        return self._cov(theta, np.asarray(theta_p, dtype=float))

    def predict_mean_grad(self, theta):
        return self.predict_bundle(np.asarray(theta, dtype=float)).mean_grad

    def predict_cov_grad(self, theta):
        return self.predict_bundle(np.asarray(theta, dtype=float)).cov_grad

    def predict_bundle(self, theta, want_grads: bool = True) -> Bundle:
        raise NotImplementedError

    def _cov(self, theta, theta_p):
        raise NotImplementedError

    def log_marginal_likelihood(self) -> float:
        raise NotImplementedError


class _BaselineGP(ConditionedGP):
    def __init__(self, model, training, cache_path=None):
        self.model = model
        self.training = training
        theta, gx = training.theta, training.gx
        n, d_y = gx.shape
        self.dims = Dims(d_y, n, 0, 0, 0)
        self._theta = theta
        self._chol = None
        self._alpha = np.zeros((n, d_y))
        self.jitter_used = 0.0
        if n == 0:
            return
        fp = _fingerprint(model, training)
        cached = _load_sidecar(cache_path, fp, ["chol", "alpha", "jitter"])
        if cached is not None:
            self._chol = (cached["chol"], True)
            self._alpha = cached["alpha"]
            self.jitter_used = float(cached["jitter"])
            return
        gram = model.k_p.gram(theta)
        self._chol, self.jitter_used = _chol_jitter(gram, model.jitter)
        self._alpha = cho_solve(self._chol, gx)
        _save_sidecar(cache_path, fp, {"chol": self._chol[0], "alpha": self._alpha,
                                       "jitter": np.asarray(self.jitter_used)})

    def _kvec(self, theta):
        if self.dims.n_train == 0:
            return np.zeros(0)
        return self.model.k_p.gram(theta[None, :], self._theta)[0]

    def predict_bundle(self, theta, want_grads=True):
        theta = np.asarray(theta, dtype=float)
        kp = self.model.k_p
        d_y = self.dims.d_y
        kv = self._kvec(theta)
        mean = self._alpha.T @ kv
        if self.dims.n_train:
            w = cho_solve(self._chol, kv)
            k_cond = kp.value(theta, theta) - float(kv @ w)
        else:
            w = kv
            k_cond = kp.value(theta, theta)
        cov = k_cond * np.eye(d_y)
        if not want_grads:
            return Bundle(mean, cov, None, None)
        dk = kp.grad_a_gram(theta[None, :], self._theta)[0] if self.dims.n_train else np.zeros((0, theta.size))
        mean_grad = self._alpha.T @ dk
        # stationary prior: grad of k_p(theta, theta) vanishes identically
        scal = -2.0 * (dk.T @ w)
        cov_grad = np.eye(d_y)[:, :, None] * scal[None, None, :]
        return Bundle(mean, cov, mean_grad, cov_grad)

    def _cov(self, theta, theta_p):
        kv_a, kv_b = self._kvec(theta), self._kvec(theta_p)
        val = self.model.k_p.value(theta, theta_p)
        if self.dims.n_train:
            val -= float(kv_a @ cho_solve(self._chol, kv_b))
        return val * np.eye(self.dims.d_y)

    def log_marginal_likelihood(self) -> float:
        n, d_y = self.dims.n_train, self.dims.d_y
        if n == 0:
            return 0.0
        quad = float(np.sum(self.training.gx * self._alpha))
        return -0.5 * quad - 0.5 * d_y * _logdet(self._chol) - 0.5 * n * d_y * np.log(2.0 * np.pi)


class _CorrelatedGP(ConditionedGP):
    """Separable prior conditioned through its Kronecker factors.

    The conditional covariance is evaluated as
    k_p(theta,theta') S - q(theta,theta') S K_s^{-1} S rather than with the
    sandwich collapsed analytically, so the factored structure of the result
    is a property the tests can falsify, not an assumption baked in.
    """

    def __init__(self, model, training, obs, cache_path=None):
        self.model = model
        self.training = training
        theta, gx = training.theta, training.gx
        n, d_y = gx.shape
        if obs.d_y != d_y:
            raise ValueError(f"observation operator has {obs.d_y} outputs, training rows have {d_y}")
        self.dims = Dims(d_y, n, 0, 0, 0)
        self._theta = theta
        spatial_dim = model.k_s.input_dim
        self._fun = _ObsFunctionals(obs, spatial_dim)
        self._s_uu = self._fun.pair_gram(model.k_s)
        self._chol_s, jit_s = _chol_jitter(self._s_uu, model.jitter)
        self._sandwich = self._s_uu @ cho_solve(self._chol_s, self._s_uu)
        if n == 0:
            self._chol_p = None
            self._alpha = np.zeros((0, d_y))
            self.jitter_used = jit_s
            return
        fp = _fingerprint(model, training)
        cached = _load_sidecar(cache_path, fp, ["chol_p", "alpha", "jitter"])
        if cached is not None:
            self._chol_p = (cached["chol_p"], True)
            self._alpha = cached["alpha"]
            self.jitter_used = float(cached["jitter"])
            return
        self._chol_p, jit_p = _chol_jitter(model.k_p.gram(theta), model.jitter)
        self.jitter_used = max(jit_p, jit_s)
        self._alpha = cho_solve(self._chol_s, cho_solve(self._chol_p, gx).T).T
        _save_sidecar(cache_path, fp, {"chol_p": self._chol_p[0], "alpha": self._alpha,
                                       "jitter": np.asarray(self.jitter_used)})

    def _kvec(self, theta):
        if self.dims.n_train == 0:
            return np.zeros(0)
        return self.model.k_p.gram(theta[None, :], self._theta)[0]

    def predict_bundle(self, theta, want_grads=True):
        theta = np.asarray(theta, dtype=float)
        kp = self.model.k_p
        kv = self._kvec(theta)
        mean = self._s_uu @ (self._alpha.T @ kv)
        if self.dims.n_train:
            w = cho_solve(self._chol_p, kv)
            q = float(kv @ w)
        else:
            w = kv
            q = 0.0
        cov = kp.value(theta, theta) * self._s_uu - q * self._sandwich
        if not want_grads:
            return Bundle(mean, cov, None, None)
        dk = kp.grad_a_gram(theta[None, :], self._theta)[0] if self.dims.n_train else np.zeros((0, theta.size))
        mean_grad = self._s_uu @ (self._alpha.T @ dk)
        dq = -2.0 * (dk.T @ w)
        cov_grad = self._sandwich[:, :, None] * dq[None, None, :]
        return Bundle(mean, cov, mean_grad, cov_grad)

    def _cov(self, theta, theta_p):
        kv_a, kv_b = self._kvec(theta), self._kvec(theta_p)
        q = float(kv_a @ cho_solve(self._chol_p, kv_b)) if self.dims.n_train else 0.0
        return self.model.k_p.value(theta, theta_p) * self._s_uu - q * self._sandwich

    def log_marginal_likelihood(self) -> float:
        n, d_y = self.dims.n_train, self.dims.d_y
        if n == 0:
            return 0.0
        quad = float(np.sum(self.training.gx * self._alpha))
        logdet = d_y * _logdet(self._chol_p) + n * _logdet(self._chol_s)
        return -0.5 * quad - 0.5 * logdet - 0.5 * n * d_y * np.log(2.0 * np.pi)


class _JointGP(ConditionedGP):
    """Joint prior over observed field, boundary values and source values.

    Training blocks are ordered [G_X(Theta); g(theta_bar, X_g); f(theta_bar,
    X_f)].  Spatial base matrices are theta-independent; the differential
    operator contributes per-theta_bar coefficient vectors, so each test
    point enters only through k_p and the prediction gradients reduce to
    gradients of k_p.
    """

    def __init__(self, model, training, problem, obs, cache_path=None):
        self.model = model
        self.training = training
        self.problem = problem
        ks, kp = model.k_s, model.k_p
        if ks.input_dim != problem.spatial_dim:
            raise ValueError("spatial kernel dimension does not match the problem")
        theta, gx = training.theta, training.gx
        tbar, xf = training.theta_bar, training.xf
        n, d_y = gx.shape
        n_bar, d_f = training.f_vals.shape
        xg = training.xg
        d_g = 0 if xg is None else xg.shape[0]
        self.dims = Dims(d_y, n, n_bar, d_f, d_g)
        self._theta, self._tbar, self._xf, self._xg = theta, tbar, xf, xg

        split = xf[:, 0] if problem.spatial_dim == 1 else ()
        self._fun = _ObsFunctionals(obs, problem.spatial_dim, split_at=split)
        if self._fun.d_y != d_y:
            raise ValueError(f"observation operator has {self._fun.d_y} outputs, training rows have {d_y}")

        # operator structure: multi-indices are theta-independent, the
        # coefficients c[t, j, :] are evaluated at (theta_bar_j, xf)
        terms0 = operator_terms(problem, tbar[0], xf)
        self._op_mi = [mi for mi, _ in terms0]
        n_terms = len(self._op_mi)
        self._c = np.empty((n_terms, n_bar, d_f))
        self._c[:, 0, :] = [coef for _, coef in terms0]
        for j in range(1, n_bar):
            for t, (_, coef) in enumerate(operator_terms(problem, tbar[j], xf)):
                self._c[t, j] = coef

        self._s_uu = self._fun.pair_gram(ks)
        obs_d = np.stack([self._fun.cross_deriv(ks, xf, mi) for mi in self._op_mi])
        self._uf = np.einsum("tac,tjc->jac", obs_d, self._c)  # (n_bar, d_y, d_f)

        if d_g:
            self._b_ops = _boundary_ops(problem, xg)
            s_ub = np.empty((d_y, d_g))
            for j, (mi, sign) in enumerate(self._b_ops):
                s_ub[:, j] = sign * self._fun.cross_deriv(ks, xg[j : j + 1], mi)[:, 0]
            s_bb = np.empty((d_g, d_g))
            for i, (mi_i, sg_i) in enumerate(self._b_ops):
                for j, (mi_j, sg_j) in enumerate(self._b_ops):
                    s_bb[i, j] = sg_i * sg_j * ks.deriv_mixed(xg[i], xg[j], mi_i, mi_j)
            bd = np.empty((n_terms, d_g, d_f))
            for i, (mi_i, sg_i) in enumerate(self._b_ops):
                for t, mi_t in enumerate(self._op_mi):
                    bd[t, i] = sg_i * ks.deriv_mixed_gram(xg[i : i + 1], xf, mi_i, mi_t)[0]
            self._s_ub = s_ub
            self._gf = np.einsum("tac,tjc->jac", bd, self._c)  # (n_bar, d_g, d_f)
        else:
            self._s_ub = np.zeros((d_y, 0))
            s_bb = np.zeros((0, 0))
            self._gf = np.zeros((n_bar, 0, d_f))

        d2 = np.empty((n_terms, n_terms, d_f, d_f))
        for s, mi_s in enumerate(self._op_mi):
            for t, mi_t in enumerate(self._op_mi):
                d2[s, t] = ks.deriv_mixed_gram(xf, xf, mi_s, mi_t)
        self._gvec = np.concatenate([
            gx.ravel(),
            training.g_vals.ravel() if d_g else np.zeros(0),
            training.f_vals.ravel(),
        ])
        total = n * d_y + n_bar * (d_g + d_f)

        fp = _fingerprint(model, training)
        cached = _load_sidecar(cache_path, fp, ["chol", "alpha", "jitter"])
        if cached is not None and cached["chol"].shape == (total, total):
            self._chol = (cached["chol"], True)
            self._alpha = cached["alpha"]
            self.jitter_used = float(cached["jitter"])
            return

        kp_uu = kp.gram(theta)
        kp_ub = kp.gram(theta, tbar)
        kp_bb = kp.gram(tbar)
        k_uu = np.kron(kp_uu, self._s_uu)
        k_ug = np.kron(kp_ub, self._s_ub)
        k_uf = np.einsum("ij,jac->iajc", kp_ub, self._uf).reshape(n * d_y, n_bar * d_f)
        k_gg = np.kron(kp_bb, s_bb)
        k_gf = np.einsum("ij,jac->iajc", kp_bb, self._gf).reshape(n_bar * d_g, n_bar * d_f)
        ee = np.einsum("sia,stab,tjb->iajb", self._c, d2, self._c)
        k_ff = (kp_bb[:, None, :, None] * ee).reshape(n_bar * d_f, n_bar * d_f)
        gram = np.block([
            [k_uu, k_ug, k_uf],
            [k_ug.T, k_gg, k_gf],
            [k_uf.T, k_gf.T, k_ff],
        ])
        gram = 0.5 * (gram + gram.T)
        self._chol, self.jitter_used = _chol_jitter(gram, model.jitter)
        self._alpha = cho_solve(self._chol, self._gvec)
        _save_sidecar(cache_path, fp, {"chol": self._chol[0], "alpha": self._alpha,
                                       "jitter": np.asarray(self.jitter_used)})

    def _cross(self, kv_u, kv_b):
        """Cross-covariance rows between G_X(theta) and the training blocks."""
        d_y = self.dims.d_y
        r_u = np.einsum("i,ac->aic", kv_u, self._s_uu).reshape(d_y, -1)
        r_g = np.einsum("j,ab->ajb", kv_b, self._s_ub).reshape(d_y, -1)
        r_f = np.einsum("j,jac->ajc", kv_b, self._uf).reshape(d_y, -1)
        return np.hstack([r_u, r_g, r_f])

    def _cross_grad(self, dk_u, dk_b):
        d_y, d_t = self.dims.d_y, dk_u.shape[1]
        g_u = np.einsum("id,ac->daic", dk_u, self._s_uu).reshape(d_t, d_y, -1)
        g_g = np.einsum("jd,ab->dajb", dk_b, self._s_ub).reshape(d_t, d_y, -1)
        g_f = np.einsum("jd,jac->dajc", dk_b, self._uf).reshape(d_t, d_y, -1)
        return np.concatenate([g_u, g_g, g_f], axis=2)

    def predict_bundle(self, theta, want_grads=True):
        theta = np.asarray(theta, dtype=float)
        kp = self.model.k_p
        kv_u = kp.gram(theta[None, :], self._theta)[0]
        kv_b = kp.gram(theta[None, :], self._tbar)[0]
        r = self._cross(kv_u, kv_b)
        mean = r @ self._alpha
        w = cho_solve(self._chol, r.T)
        cov = kp.value(theta, theta) * self._s_uu - r @ w
        if not want_grads:
            return Bundle(mean, cov, None, None)
        dk_u = kp.grad_a_gram(theta[None, :], self._theta)[0]
        dk_b = kp.grad_a_gram(theta[None, :], self._tbar)[0]
        dr = self._cross_grad(dk_u, dk_b)
        mean_grad = np.einsum("dat,t->ad", dr, self._alpha)
        # stationary prior: grad of k_p(theta, theta) vanishes identically
        a = np.einsum("dat,tb->dab", dr, w)
        cov_grad = -(a + a.transpose(0, 2, 1)).transpose(1, 2, 0)
        return Bundle(mean, cov, mean_grad, cov_grad)

    def _cov(self, theta, theta_p):
        kp = self.model.k_p
        r_a = self._cross(kp.gram(theta[None, :], self._theta)[0],
                          kp.gram(theta[None, :], self._tbar)[0])
        r_b = self._cross(kp.gram(theta_p[None, :], self._theta)[0],
                          kp.gram(theta_p[None, :], self._tbar)[0])
        return kp.value(theta, theta_p) * self._s_uu - r_a @ cho_solve(self._chol, r_b.T)

    def predict_field(self, theta, points) -> np.ndarray:
        """Posterior-mean field u(theta, x) at arbitrary spatial points."""
        theta = np.asarray(theta, dtype=float)
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        ks, kp = self.model.k_s, self.model.k_p
        zero = (0,) * self.problem.spatial_dim
        p_u = self._fun.from_points(ks, pts)
        if self.dims.d_g:
            p_g = np.column_stack([
                sign * ks.deriv_mixed_gram(pts, self._xg[j : j + 1], zero, mi)[:, 0]
                for j, (mi, sign) in enumerate(self._b_ops)
            ])
        else:
            p_g = np.zeros((pts.shape[0], 0))
        pd = np.stack([ks.deriv_mixed_gram(pts, self._xf, zero, mi) for mi in self._op_mi])
        p_f = np.einsum("tmc,tjc->jmc", pd, self._c)
        kv_u = kp.gram(theta[None, :], self._theta)[0]
        kv_b = kp.gram(theta[None, :], self._tbar)[0]
        row = np.hstack([
            np.einsum("i,mc->mic", kv_u, p_u).reshape(pts.shape[0], -1),
            np.einsum("j,mb->mjb", kv_b, p_g).reshape(pts.shape[0], -1),
            np.einsum("j,jmc->mjc", kv_b, p_f).reshape(pts.shape[0], -1),
        ])
        return row @ self._alpha

    def log_marginal_likelihood(self) -> float:
        m = self._gvec.size
        quad = float(self._gvec @ self._alpha)
        return -0.5 * quad - 0.5 * _logdet(self._chol) - 0.5 * m * np.log(2.0 * np.pi)


class _PotentialGP(ConditionedGP):
    """Scalar surrogate for the data-misfit potential."""

    def __init__(self, model, training, data, cache_path=None):
        self.model = model
        self.training = training
        y, noise_var = (data.y, data.noise_var) if hasattr(data, "y") else data
        y = np.asarray(y, dtype=float)
        theta, gx = training.theta, training.gx
        n = theta.shape[0]
        if n and gx.shape[1] != y.size:
            raise ValueError(f"data has {y.size} entries, training rows have {gx.shape[1]}")
        self.dims = Dims(gx.shape[1] if n else y.size, n, 0, 0, 0)
        self._theta = theta
        self._phi = 0.5 * np.sum((gx - y) ** 2, axis=1) / noise_var if n else np.zeros(0)
        self._chol = None
        self._alpha = np.zeros(0)
        self.jitter_used = 0.0
        if n == 0:
            return
        fp = _fingerprint(model, training, extra=f"{y.tolist()}|{noise_var}")
        cached = _load_sidecar(cache_path, fp, ["chol", "alpha", "jitter"])
        if cached is not None:
            self._chol = (cached["chol"], True)
            self._alpha = cached["alpha"]
            self.jitter_used = float(cached["jitter"])
            return
        self._chol, self.jitter_used = _chol_jitter(model.k_p.gram(theta), model.jitter)
        self._alpha = cho_solve(self._chol, self._phi)
        _save_sidecar(cache_path, fp, {"chol": self._chol[0], "alpha": self._alpha,
                                       "jitter": np.asarray(self.jitter_used)})

    def _kvec(self, theta):
        if self.dims.n_train == 0:
            return np.zeros(0)
        return self.model.k_p.gram(theta[None, :], self._theta)[0]

    def predict_bundle(self, theta, want_grads=True):
        theta = np.asarray(theta, dtype=float)
        kp = self.model.k_p
        kv = self._kvec(theta)
        mean = float(kv @ self._alpha)
        if self.dims.n_train:
            w = cho_solve(self._chol, kv)
            cov = kp.value(theta, theta) - float(kv @ w)
        else:
            w = kv
            cov = kp.value(theta, theta)
        if not want_grads:
            return Bundle(mean, cov, None, None)
        dk = kp.grad_a_gram(theta[None, :], self._theta)[0] if self.dims.n_train else np.zeros((0, theta.size))
        mean_grad = dk.T @ self._alpha
        cov_grad = -2.0 * (dk.T @ w)
        return Bundle(mean, cov, mean_grad, cov_grad)

    def _cov(self, theta, theta_p):
        kv_a, kv_b = self._kvec(theta), self._kvec(theta_p)
        val = self.model.k_p.value(theta, theta_p)
        if self.dims.n_train:
            val -= float(kv_a @ cho_solve(self._chol, kv_b))
        return val

    def log_marginal_likelihood(self) -> float:
        n = self.dims.n_train
        if n == 0:
            return 0.0
        quad = float(self._phi @ self._alpha)
        return -0.5 * quad - 0.5 * _logdet(self._chol) - 0.5 * n * np.log(2.0 * np.pi)
