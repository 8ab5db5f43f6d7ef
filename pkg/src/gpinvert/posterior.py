"""Unnormalized log-posteriors over PDE parameters, with analytic gradients.

Four surrogate constructions are supported next to the exact posterior:

* ``mean_forward``      -0.5 ||m_N(theta) - y||^2 / noise_var
* ``marginal_forward``  -0.5 r^T S^-1 r - 0.5 log det S,  S = K_N + noise_var I
  (the forward-map uncertainty is marginalized; the determinant varies with
  theta and is kept)
* ``mean_potential``    -m_N^Phi(theta)
* ``marginal_potential``-m_N^Phi(theta) + 0.5 k_N(theta, theta)

plus ``true_closed_form`` / ``true_via_solver`` which evaluate the exact
misfit through a user closed form or the reference solver.  All kinds add
the smoothed-uniform prior.  Densities are unnormalized throughout: the
sampler only ever uses ratios, and grids are normalized by quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .emulator import ConditionedGP
from .errors import NumericalError
from .metrics import GridDensity
from .pde import PdeProblem, SyntheticData, forward_map

__all__ = [
    "SmoothedUniformPrior",
    "ApproxPosterior",
    "log_density",
    "grad_log_density",
    "density_grid",
    "true_posterior_grid",
    "KINDS",
    "MEAN_FORWARD",
    "MARGINAL_FORWARD",
    "MEAN_POTENTIAL",
    "MARGINAL_POTENTIAL",
    "TRUE_CLOSED_FORM",
    "TRUE_VIA_SOLVER",
]

MEAN_FORWARD = "mean_forward"
MARGINAL_FORWARD = "marginal_forward"
MEAN_POTENTIAL = "mean_potential"
MARGINAL_POTENTIAL = "marginal_potential"
TRUE_CLOSED_FORM = "true_closed_form"
TRUE_VIA_SOLVER = "true_via_solver"

KINDS = (MEAN_FORWARD, MARGINAL_FORWARD, MEAN_POTENTIAL, MARGINAL_POTENTIAL,
         TRUE_CLOSED_FORM, TRUE_VIA_SOLVER)
_GP_KINDS = KINDS[:4]
_POTENTIAL_KINDS = (MEAN_POTENTIAL, MARGINAL_POTENTIAL)

_FD_H = 1e-6  # exact-posterior gradients fall back to central differences


@dataclass(frozen=True)
class SmoothedUniformPrior:
    """Uniform on the box, Gaussian decay of the squared distance outside.

    The log-density is -dist(theta, box)^2 / (2 lam): zero inside, smooth
    across the boundary, so gradients exist everywhere and the sampler can
    recover from excursions instead of hitting a hard wall.
    """

    box: np.ndarray
    lam: float = 1e-3

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float)
        if box.ndim != 2 or box.shape[0] != 2 or np.any(box[0] >= box[1]):
            raise ValueError("box must be [[lo...], [hi...]] with lo < hi")
        if not self.lam > 0:
            raise ValueError("the envelope parameter lam must be positive")
        object.__setattr__(self, "box", box)

    def _excess(self, theta):
        return theta - np.clip(theta, self.box[0], self.box[1])

    def log_density(self, theta) -> float:
        e = self._excess(np.asarray(theta, dtype=float))
        return float(-(e @ e) / (2.0 * self.lam))

    def grad_log_density(self, theta) -> np.ndarray:
        return -self._excess(np.asarray(theta, dtype=float)) / self.lam


@dataclass(frozen=True)
class ApproxPosterior:
    """One posterior construction bound to data, prior and (usually) a GP.

    The exact kinds take either ``forward`` (a callable theta -> G(theta),
    used when a closed form exists) or ``problem`` + ``obs`` so each
    evaluation runs the reference solver.  Immutable; evaluations are pure.
    """

    kind: str
    data: SyntheticData
    prior: SmoothedUniformPrior
    gp: ConditionedGP | None = None
    problem: PdeProblem | None = None
    obs: object = None
    mesh_n: int | None = None
    forward: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown posterior kind {self.kind!r}, expected one of {KINDS}")
        if self.kind in _GP_KINDS:
            if self.gp is None:
                raise ValueError(f"posterior kind {self.kind!r} needs a conditioned GP")
            is_pot = self.gp.model.family == "potential"
            if is_pot != (self.kind in _POTENTIAL_KINDS):
                raise ValueError(
                    f"posterior kind {self.kind!r} does not match emulator family "
                    f"{self.gp.model.family!r}"
                )
        elif self.kind == TRUE_CLOSED_FORM:
            if self.forward is None:
                raise ValueError("true_closed_form needs a forward callable")
        elif self.problem is None or self.obs is None:
            raise ValueError("true_via_solver needs problem and obs")

    # -- evaluation -----------------------------------------------------

    def log_density(self, theta) -> float:
        return self._value_only(np.asarray(theta, dtype=float))

    def grad_log_density(self, theta) -> np.ndarray:
        return self.value_and_grad(np.asarray(theta, dtype=float))[1]

    def value_and_grad(self, theta):
        """(log_density, gradient) sharing one emulator evaluation."""
        theta = np.asarray(theta, dtype=float)
        lp = self.prior.log_density(theta)
        gp0 = self.prior.grad_log_density(theta)
        if self.kind in (TRUE_CLOSED_FORM, TRUE_VIA_SOLVER):
            val = self._misfit(theta) + lp
            grad = np.empty_like(theta)
            for d in range(theta.size):
                e = np.zeros_like(theta)
                e[d] = _FD_H
                grad[d] = (self._value_only(theta + e) - self._value_only(theta - e)) / (2 * _FD_H)
            return val, grad

        b = self.gp.predict_bundle(theta)
        if self.kind == MEAN_POTENTIAL:
            return -b.mean + lp, -b.mean_grad + gp0
        if self.kind == MARGINAL_POTENTIAL:
            return -b.mean + 0.5 * b.cov + lp, -b.mean_grad + 0.5 * b.cov_grad + gp0

        r = b.mean - self.data.y
        if self.kind == MEAN_FORWARD:
            sig2 = self.data.noise_var
            return -0.5 * float(r @ r) / sig2 + lp, -(b.mean_grad.T @ r) / sig2 + gp0

        s = b.cov + self.data.noise_var * np.eye(r.size)
        try:
            cho = cho_factor(s, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"marginal covariance K_N + noise is not positive definite at theta={theta}"
            ) from exc
        a = cho_solve(cho, r)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        val = -0.5 * float(r @ a) - 0.5 * logdet + lp
        s_inv = cho_solve(cho, np.eye(r.size))
        grad = (
            -(b.mean_grad.T @ a)
            + 0.5 * np.einsum("i,ijd,j->d", a, b.cov_grad, a)
            - 0.5 * np.einsum("ij,jid->d", s_inv, b.cov_grad)
            + gp0
        )
        return val, grad

    # -- internals ------------------------------------------------------

    def _value_only(self, theta) -> float:
        lp = self.prior.log_density(theta)
        if self.kind in (TRUE_CLOSED_FORM, TRUE_VIA_SOLVER):
            return self._misfit(theta) + lp
        b = self.gp.predict_bundle(theta, want_grads=False)
        if self.kind == MEAN_POTENTIAL:
            return -b.mean + lp
        if self.kind == MARGINAL_POTENTIAL:
            return -b.mean + 0.5 * b.cov + lp
        r = b.mean - self.data.y
        if self.kind == MEAN_FORWARD:
            return -0.5 * float(r @ r) / self.data.noise_var + lp
        s = b.cov + self.data.noise_var * np.eye(r.size)
        try:
            cho = cho_factor(s, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"marginal covariance K_N + noise is not positive definite at theta={theta}"
            ) from exc
        logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        return -0.5 * float(r @ cho_solve(cho, r)) - 0.5 * logdet + lp

    def _misfit(self, theta) -> float:
        g = self.forward(theta) if self.forward is not None else forward_map(
            self.problem, self.obs, theta, self.mesh_n
        )
        r = np.asarray(g, dtype=float) - self.data.y
        return -0.5 * float(r @ r) / self.data.noise_var


def log_density(ap: ApproxPosterior, theta) -> float:
    return ap.log_density(theta)


def grad_log_density(ap: ApproxPosterior, theta) -> np.ndarray:
    return ap.grad_log_density(theta)


# ---------------------------------------------------------------------------
# grids


def density_grid(ap, axes) -> GridDensity:
    """Normalized density of any posterior over a rectangular grid.

    ``axes`` is one strictly increasing array per parameter coordinate
    (at most two).  Log-densities are shifted by their maximum before
    exponentiation, then trapezoid-normalized.
    """
    axes = [np.asarray(a, dtype=float) for a in (axes if isinstance(axes, (list, tuple)) else [axes])]
    if len(axes) > 2:
        raise NotImplementedError("density grids support at most two parameter dimensions")
    if len(axes) == 1:
        logv = np.array([ap.log_density(np.array([t])) for t in axes[0]])
    else:
        logv = np.array([
            [ap.log_density(np.array([t1, t2])) for t2 in axes[1]] for t1 in axes[0]
        ])
    logv -= logv.max()
    return GridDensity(tuple(axes), np.exp(logv)).normalize()


def true_posterior_grid(p, obs, data, prior, axes, mesh_n=None, forward=None) -> GridDensity:
    """Exact-posterior density table; closed form when available, reference
    solves otherwise."""
    kind = TRUE_CLOSED_FORM if forward is not None else TRUE_VIA_SOLVER
    ap = ApproxPosterior(kind, data, prior, problem=p, obs=obs, mesh_n=mesh_n, forward=forward)
    return density_grid(ap, axes)
