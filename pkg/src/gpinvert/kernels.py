"""Stationary covariance kernels with closed-form derivatives.

Both families are radial: k(a, b) = psi(s) with s = ||a - b||^2 / 2.
Mixed partials up to second order in each argument are assembled from
the profile derivatives psi^(n)(s) and the displacement tau = a - b.
Those are the orders needed when second-order differential operators
are applied to a kernel in both arguments, and for sampler gradients.

Derivatives are closed-form throughout; there is no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

__all__ = ["KernelHyper", "Kernel", "kernel", "SQUARED_EXPONENTIAL", "MATERN52"]

SQUARED_EXPONENTIAL = "squared_exponential"
MATERN52 = "matern52"
_FAMILIES = (SQUARED_EXPONENTIAL, MATERN52)

# Below this radius (relative to the lengthscale) the Matern profile
# switches to its r -> 0 limit: psi''' and psi'''' are singular there,
# but every term they enter carries enough powers of tau to vanish.
_R_TOL = 1e-10


@dataclass(frozen=True)
class KernelHyper:
    """Output scale sigma^2 and input lengthscale l."""

    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ValueError(f"variance must be a positive real, got {self.variance}")
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ValueError(f"lengthscale must be a positive real, got {self.lengthscale}")


@dataclass(frozen=True)
class Kernel:
    """Isotropic kernel over R^input_dim with a single shared lengthscale."""

    family: str
    hyper: KernelHyper = field(default_factory=KernelHyper)
    input_dim: int = 1

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}, expected one of {_FAMILIES}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be a positive integer")

    @property
    def variance(self) -> float:
        return self.hyper.variance

    @property
    def lengthscale(self) -> float:
        return self.hyper.lengthscale

    # -- evaluation ----------------------------------------------------

    def value(self, a, b) -> float:
        """k(a, b)."""
        ta = self._point(a) - self._point(b)
        r = float(np.sqrt(ta @ ta))
        return float(self._profile(np.asarray(r), 0)[0])

    __call__ = value

    def gram(self, A, B=None) -> np.ndarray:
        """Pairwise kernel matrix k(A, B); symmetric when B is omitted."""
        A = self._points(A)
        B = A if B is None else self._points(B)
        r = cdist(A, B)
        return self._profile(r, 0)[0]

    # -- derivatives ---------------------------------------------------

    def grad_a(self, a, b) -> np.ndarray:
        """Gradient of k(a, b) in the first argument, shape (input_dim,)."""
        tau = self._point(a) - self._point(b)
        r = np.asarray(np.sqrt(tau @ tau))
        psi = self._profile(r, 1)
        return np.asarray(psi[1] * tau, dtype=float)

    def grad_b(self, a, b) -> np.ndarray:
        return -self.grad_a(a, b)

    def grad_a_gram(self, A, B) -> np.ndarray:
        """grad_a stacked over all pairs, shape (n, m, input_dim)."""
        A = self._points(A)
        B = self._points(B)
        tau = A[:, None, :] - B[None, :, :]
        r = np.sqrt(np.sum(tau * tau, axis=-1))
        psi = self._profile(r, 1)
        return psi[1][..., None] * tau

    def deriv_mixed(self, a, b, order_a, order_b) -> float:
        """Mixed partial d^order_a_a d^order_b_b k(a, b).

        Multi-indices run over coordinates, at most total order 2 per
        argument.  At coincident points the Matern value is the analytic
        limit of the off-diagonal closed form.
        """
        dirs, sign = self._dirs(order_a, order_b)
        tau = self._point(a) - self._point(b)
        r = np.asarray(np.sqrt(tau @ tau))
        psi = self._profile(r, len(dirs))
        return float(sign * _tau_deriv(psi, tau, dirs))

    def deriv_mixed_gram(self, A, B, order_a, order_b) -> np.ndarray:
        """deriv_mixed over all pairs of rows of A and B, shape (n, m)."""
        dirs, sign = self._dirs(order_a, order_b)
        A = self._points(A)
        B = self._points(B)
        tau = A[:, None, :] - B[None, :, :]
        r = np.sqrt(np.sum(tau * tau, axis=-1))
        psi = self._profile(r, len(dirs))
        return sign * _tau_deriv(psi, tau, dirs)

    # -- internals -----------------------------------------------------

    def _point(self, x) -> np.ndarray:
        p = np.atleast_1d(np.asarray(x, dtype=float))
        if p.ndim != 1 or p.size != self.input_dim:
            raise ValueError(f"expected a point of dimension {self.input_dim}, got shape {p.shape}")
        return p

    def _points(self, X) -> np.ndarray:
        P = np.asarray(X, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        if P.ndim != 2 or P.shape[1] != self.input_dim:
            raise ValueError(f"expected points of dimension {self.input_dim}, got shape {P.shape}")
        return P

    def _dirs(self, order_a, order_b):
        oa = _check_multi_index(order_a, self.input_dim)
        ob = _check_multi_index(order_b, self.input_dim)
        dirs = []
        for i, n in enumerate(oa):
            dirs.extend([i] * n)
        for i, n in enumerate(ob):
            dirs.extend([i] * n)
        sign = -1.0 if sum(ob) % 2 else 1.0
        return dirs, sign

    def _profile(self, r, max_order):
        """psi^(0..max_order)(s) as functions of r = sqrt(2 s)."""
        s2, l = self.hyper.variance, self.hyper.lengthscale
        if self.family == SQUARED_EXPONENTIAL:
            e = s2 * np.exp(-(r * r) / (2.0 * l * l))
            return [e * (-1.0 / (l * l)) ** n for n in range(max_order + 1)]
        # Matern, nu = 5/2
        c = np.sqrt(5.0) / l
        cr = c * r
        e = np.exp(-cr)
        psi = [s2 * (1.0 + cr + cr * cr / 3.0) * e]
        if max_order >= 1:
            psi.append(-s2 * (c * c / 3.0) * (1.0 + cr) * e)
        if max_order >= 2:
            psi.append(s2 * (c ** 4 / 3.0) * e)
        if max_order >= 3:
            # Singular at r = 0; the guarded radius turns these terms into
            # exact zeros, which is their limit once tau factors multiply in.
            rs = np.where(r < _R_TOL * l, np.inf, r)
            psi.append(-s2 * (c ** 5 / 3.0) * e / rs)
            if max_order >= 4:
                psi.append(s2 * (c ** 5 / 3.0) * (1.0 + cr) * e / rs ** 3)
        return psi


def kernel(family: str, variance: float = 1.0, lengthscale: float = 1.0, input_dim: int = 1) -> Kernel:
    """Convenience constructor."""
    return Kernel(family, KernelHyper(variance, lengthscale), input_dim)


def _check_multi_index(order, dim):
    idx = tuple(int(n) for n in np.atleast_1d(order))
    if len(idx) != dim or any(n < 0 for n in idx):
        raise ValueError(f"multi-index {order!r} does not match dimension {dim}")
    if sum(idx) > 2:
        raise NotImplementedError("derivatives above total order 2 per argument are not supported")
    return idx


def _tau_deriv(psi, tau, dirs):
    """Partial derivative of F(tau) = psi(||tau||^2 / 2) along dirs.

    Radial chain rule: each derivative contributes either a tau factor
    (raising the psi order) or pairs with a previous direction through a
    Kronecker delta.  Hardcoded through order four.
    """
    m = len(dirs)
    if m == 0:
        return psi[0]
    t = [tau[..., i] for i in dirs]
    if m == 1:
        return psi[1] * t[0]
    d = [[1.0 if dirs[p] == dirs[q] else 0.0 for q in range(m)] for p in range(m)]
    if m == 2:
        return psi[2] * t[0] * t[1] + psi[1] * d[0][1]
    if m == 3:
        return psi[3] * t[0] * t[1] * t[2] + psi[2] * (
            d[0][1] * t[2] + d[0][2] * t[1] + d[1][2] * t[0]
        )
    if m == 4:
        pairs = (
            d[0][1] * t[2] * t[3]
            + d[0][2] * t[1] * t[3]
            + d[0][3] * t[1] * t[2]
            + d[1][2] * t[0] * t[3]
            + d[1][3] * t[0] * t[2]
            + d[2][3] * t[0] * t[1]
        )
        double = d[0][1] * d[2][3] + d[0][2] * d[1][3] + d[0][3] * d[1][2]
        return psi[4] * t[0] * t[1] * t[2] * t[3] + psi[3] * pairs + psi[2] * double
    raise NotImplementedError("tau derivatives above total order 4 are not supported")
