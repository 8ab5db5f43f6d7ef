"""Linear elliptic model problems and their reference discretizations.

The forward model is -div(exp(kappa) grad u) = f on the unit interval or
unit square, with Dirichlet or no-flux boundary pieces.  The log
diffusion kappa(x, theta) is one of three parameterizations: a single
constant, piecewise constant in the first coordinate, or a smooth
truncated eigenfunction expansion.

Besides the solvers this module owns the observation operators and the
closed-form action of the differential and boundary operators on a
spatial kernel, which is what the operator-constrained emulator needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

from .errors import NumericalError
from .kernels import Kernel

__all__ = [
    "ConstantDiffusion",
    "PiecewiseConstantDiffusion",
    "ExpansionDiffusion",
    "BoundaryCondition",
    "PdeProblem",
    "PointwiseObservation",
    "LocalAverageObservation",
    "SyntheticData",
    "Solution1D",
    "Solution2D",
    "solve_reference",
    "forward_map",
    "make_data",
    "apply_operator_to_kernel",
    "operator_terms",
    "boundary_terms",
    "constant_source",
    "linear_source",
    "default_mesh",
]

_INTERFACE_TOL = 1e-10


def _as_points(X, dim) -> np.ndarray:
    P = np.asarray(X, dtype=float)
    if P.ndim == 0:
        P = P.reshape(1, 1)
    elif P.ndim == 1:
        # a single point in R^dim, or a batch of 1-d points
        P = P.reshape(1, -1) if P.size == dim and dim > 1 else P[:, None]
    if P.ndim != 2 or P.shape[1] != dim:
        raise ValueError(f"expected points in R^{dim}, got shape {np.shape(X)}")
    return P


# ---------------------------------------------------------------------------
# log-diffusion parameterizations


class ConstantDiffusion:
    """log kappa(x, theta) = theta[0] everywhere."""

    dim_theta = 1
    interfaces: tuple = ()
    spatially_varying_log = False

    def log_kappa(self, theta, X):
        X = np.asarray(X, dtype=float)
        n = X.shape[0] if X.ndim else 1
        return np.full(n, float(np.atleast_1d(theta)[0]))

    def grad_log_kappa_x(self, theta, X):
        X = np.asarray(X, dtype=float)
        X = X if X.ndim == 2 else X.reshape(-1, 1)
        return np.zeros_like(X)


class PiecewiseConstantDiffusion:
    """log kappa constant on cells of the first coordinate.

    ``breakpoints`` are the interior cell edges in (0, 1); ``values`` has
    one entry per cell and each entry is either a fixed float or a string
    ``"theta<i>"`` naming a parameter component.
    """

    spatially_varying_log = False

    def __init__(self, breakpoints: Sequence[float], values: Sequence):
        bp = tuple(float(b) for b in breakpoints)
        if any(not 0.0 < b < 1.0 for b in bp) or list(bp) != sorted(set(bp)):
            raise ValueError("breakpoints must be strictly increasing interior points of (0, 1)")
        if len(values) != len(bp) + 1:
            raise ValueError(f"need {len(bp) + 1} cell values for {len(bp)} breakpoints, got {len(values)}")
        cells = []
        max_idx = -1
        for v in values:
            if isinstance(v, str):
                if not v.startswith("theta"):
                    raise ValueError(f"cell value {v!r} is neither a number nor 'theta<i>'")
                idx = int(v[len("theta"):])
                cells.append(("theta", idx))
                max_idx = max(max_idx, idx)
            else:
                cells.append(("const", float(v)))
        if max_idx < 0:
            raise ValueError("at least one cell must reference a parameter component")
        self.breakpoints = bp
        self.cells = tuple(cells)
        self.dim_theta = max_idx + 1
        self.interfaces = bp

    def cell_values(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return np.array([theta[payload] if kind == "theta" else payload for kind, payload in self.cells])

    def log_kappa(self, theta, X):
        x0 = np.asarray(X, dtype=float)
        x0 = x0[:, 0] if x0.ndim == 2 else x0
        idx = np.searchsorted(self.breakpoints, x0, side="right")
        return self.cell_values(theta)[idx]

    def grad_log_kappa_x(self, theta, X):
        X = np.asarray(X, dtype=float)
        X = X if X.ndim == 2 else X.reshape(-1, 1)
        return np.zeros_like(X)


class ExpansionDiffusion:
    """log kappa(x, theta) = sum_n sqrt(a_n) theta_n b_n(x) on [0, 1].

    (omega_n, a_n, b_n) are the eigenpairs of the exponential covariance
    exp(-4|s-t|): omega_n solves tan(w) = 8w / (w^2 - 16), a_n =
    8 / (omega_n^2 + 16), and b_n(x) = A_n (sin(w x) + (w/4) cos(w x))
    with A_n the unit-L2-norm constant.
    """

    interfaces: tuple = ()
    spatially_varying_log = True

    def __init__(self, n_terms: int):
        if n_terms < 1:
            raise ValueError("n_terms must be a positive integer")
        self.n_terms = int(n_terms)
        self.dim_theta = self.n_terms
        self.omega = _expansion_roots(self.n_terms)
        self.a = 8.0 / (self.omega**2 + 16.0)
        self.norm = _expansion_norms(self.omega)

    def basis(self, X) -> np.ndarray:
        """b_n(x), shape (n_points, n_terms)."""
        x = np.asarray(X, dtype=float)
        x = x[:, 0] if x.ndim == 2 else np.atleast_1d(x)
        w = self.omega[None, :]
        return self.norm[None, :] * (np.sin(w * x[:, None]) + (w / 4.0) * np.cos(w * x[:, None]))

    def basis_deriv(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float)
        x = x[:, 0] if x.ndim == 2 else np.atleast_1d(x)
        w = self.omega[None, :]
        return self.norm[None, :] * (w * np.cos(w * x[:, None]) - (w**2 / 4.0) * np.sin(w * x[:, None]))

    def log_kappa(self, theta, X):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return self.basis(X) @ (np.sqrt(self.a) * theta)

    def grad_log_kappa_x(self, theta, X):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        g = self.basis_deriv(X) @ (np.sqrt(self.a) * theta)
        return g[:, None]


def _expansion_roots(n_terms: int) -> np.ndarray:
    # positive roots of sin(w)(w^2 - 16) - 8 w cos(w) = 0, the continuous
    # restatement of tan(w) = 8w / (w^2 - 16)
    def g(w):
        return np.sin(w) * (w * w - 16.0) - 8.0 * w * np.cos(w)

    roots = []
    w_grid = np.arange(0.05, (n_terms + 3) * np.pi, 0.005)
    vals = g(w_grid)
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        r = brentq(g, w_grid[i], w_grid[i + 1], xtol=1e-14, rtol=1e-15)
        if r > 1e-8 and (not roots or r - roots[-1] > 1e-8):
            roots.append(r)
        if len(roots) == n_terms:
            break
    if len(roots) < n_terms:
        raise NumericalError(f"found only {len(roots)} expansion roots, needed {n_terms}")
    return np.array(roots)


def _expansion_norms(omega: np.ndarray) -> np.ndarray:
    # 1 / ||sin(w x) + (w/4) cos(w x)||_{L2(0,1)}, closed form
    w = omega
    int_sin2 = 0.5 - np.sin(2 * w) / (4 * w)
    int_cos2 = 0.5 + np.sin(2 * w) / (4 * w)
    int_cross = np.sin(w) ** 2 / (2 * w)
    sq = int_sin2 + (w**2 / 16.0) * int_cos2 + (w / 2.0) * int_cross
    return 1.0 / np.sqrt(sq)


# ---------------------------------------------------------------------------
# problem definition


@dataclass(frozen=True)
class BoundaryCondition:
    segment: str  # 1D: left/right; 2D: left/right/bottom/top
    kind: str  # dirichlet or neumann
    value: object = 0.0  # float or callable (theta, x) -> float

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")


_SEGMENTS = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}


class PdeProblem:
    """Immutable description of one inverse problem's forward model."""

    def __init__(self, spatial_dim, diffusion, source, boundary, theta_box):
        if spatial_dim not in (1, 2):
            raise ValueError("spatial_dim must be 1 or 2")
        if spatial_dim == 2 and isinstance(diffusion, ExpansionDiffusion):
            raise NotImplementedError("the expansion diffusion field is one-dimensional")
        self.spatial_dim = int(spatial_dim)
        self.diffusion = diffusion
        self.source = source
        self.boundary = {bc.segment: bc for bc in boundary}
        if set(self.boundary) != set(_SEGMENTS[self.spatial_dim]) or len(boundary) != len(self.boundary):
            raise ValueError(
                f"boundary must cover each of {_SEGMENTS[self.spatial_dim]} exactly once"
            )
        box = np.asarray(theta_box, dtype=float)
        if box.shape != (2, diffusion.dim_theta) or not np.all(box[0] < box[1]):
            raise ValueError(
                f"theta_box must be a (2, {diffusion.dim_theta}) array of strict lower/upper bounds"
            )
        self.theta_lo = box[0].copy()
        self.theta_hi = box[1].copy()

    @property
    def dim_theta(self) -> int:
        return self.diffusion.dim_theta

    @property
    def theta_box(self) -> np.ndarray:
        return np.vstack([self.theta_lo, self.theta_hi])

    def contains(self, theta, tol=1e-9) -> bool:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return bool(
            theta.size == self.dim_theta
            and np.all(theta >= self.theta_lo - tol)
            and np.all(theta <= self.theta_hi + tol)
        )

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if not self.contains(theta):
            raise ValueError(f"theta {theta} lies outside the parameter box")
        return theta

    def source_at(self, theta, X) -> np.ndarray:
        X = _as_points(X, self.spatial_dim)
        if callable(self.source):
            out = self.source(theta, X)
            return np.broadcast_to(np.asarray(out, dtype=float), (X.shape[0],)).copy()
        return np.full(X.shape[0], float(self.source))

    def boundary_value(self, segment, theta, X) -> np.ndarray:
        bc = self.boundary[segment]
        X = _as_points(X, self.spatial_dim)
        if callable(bc.value):
            out = bc.value(theta, X)
            return np.broadcast_to(np.asarray(out, dtype=float), (X.shape[0],)).copy()
        return np.full(X.shape[0], float(bc.value))


def constant_source(c: float) -> Callable:
    return lambda theta, X: np.full(np.asarray(X).shape[0], float(c))


def linear_source(slope: float) -> Callable:
    """f(x) = slope * x (first coordinate)."""
    return lambda theta, X: float(slope) * np.asarray(X, dtype=float)[:, 0]


def default_mesh(p: PdeProblem) -> int:
    return 512 if p.spatial_dim == 1 else 64


# ---------------------------------------------------------------------------
# observation operators


class PointwiseObservation:
    """Point evaluations of the solution; points may lie on the boundary."""

    kind = "pointwise"

    def __init__(self, points, spatial_dim=1):
        self.points = _as_points(points, spatial_dim)
        self.spatial_dim = spatial_dim
        if np.any(self.points < -1e-12) or np.any(self.points > 1 + 1e-12):
            raise ValueError("observation points must lie in the closed unit domain")

    @property
    def d_y(self) -> int:
        return self.points.shape[0]

    def observe(self, sol) -> np.ndarray:
        return sol.at(self.points)


class LocalAverageObservation:
    """Integrals of the solution over disjoint subintervals of [0, 1] (1-d only)."""

    kind = "local_average"
    spatial_dim = 1

    def __init__(self, intervals):
        iv = np.asarray(intervals, dtype=float)
        if iv.ndim != 2 or iv.shape[1] != 2:
            raise ValueError("intervals must be an (m, 2) array")
        if np.any(iv[:, 0] >= iv[:, 1]) or np.any(iv < -1e-12) or np.any(iv > 1 + 1e-12):
            raise ValueError("intervals must be nondegenerate subsets of [0, 1]")
        order = np.argsort(iv[:, 0])
        s = iv[order]
        if np.any(s[1:, 0] < s[:-1, 1] - 1e-12):
            raise ValueError("intervals must be pairwise disjoint")
        self.intervals = iv

    @property
    def d_y(self) -> int:
        return self.intervals.shape[0]

    def observe(self, sol) -> np.ndarray:
        return np.array([sol.integrate(a, b) for a, b in self.intervals])


@dataclass(frozen=True)
class SyntheticData:
    y: np.ndarray
    theta_dagger: np.ndarray
    noise_var: float
    rng_seed: int


# ---------------------------------------------------------------------------
# discrete solutions


class Solution1D:
    """Continuous piecewise-linear function on a 1-d node set."""

    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._cum = np.concatenate(
            [[0.0], np.cumsum(0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.nodes))]
        )

    def at(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float)
        x = x[:, 0] if x.ndim == 2 else x
        return np.interp(x, self.nodes, self.values)

    def _cumulative(self, x: float) -> float:
        # exact integral of the piecewise-linear interpolant over [nodes[0], x]
        x = float(np.clip(x, self.nodes[0], self.nodes[-1]))
        i = int(np.searchsorted(self.nodes, x, side="right") - 1)
        i = min(max(i, 0), len(self.nodes) - 2)
        x0 = self.nodes[i]
        return float(self._cum[i] + 0.5 * (self.values[i] + self.at(x)) * (x - x0))

    def integrate(self, a: float, b: float) -> float:
        return self._cumulative(b) - self._cumulative(a)

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.nodes, self.values]), delimiter=",", header="x,u", comments="")


class Solution2D:
    """Grid function on the unit square, bilinear between nodes."""

    def __init__(self, grid, values, face_coeff):
        self.grid = np.asarray(grid, dtype=float)  # shared 1-d axis
        self.values = np.asarray(values, dtype=float)  # (n+1, n+1), [i, j] = (x1_i, x2_j)
        self.face_coeff = np.asarray(face_coeff, dtype=float)  # (n, n+1), faces normal to x1
        self.h = self.grid[1] - self.grid[0]

    def at(self, X) -> np.ndarray:
        P = _as_points(X, 2)
        n = len(self.grid) - 1
        t = np.clip(P / self.h, 0, n - 1e-12)
        i = np.minimum(t.astype(int), n - 1)
        f = t - i
        v = self.values
        out = (
            v[i[:, 0], i[:, 1]] * (1 - f[:, 0]) * (1 - f[:, 1])
            + v[i[:, 0] + 1, i[:, 1]] * f[:, 0] * (1 - f[:, 1])
            + v[i[:, 0], i[:, 1] + 1] * (1 - f[:, 0]) * f[:, 1]
            + v[i[:, 0] + 1, i[:, 1] + 1] * f[:, 0] * f[:, 1]
        )
        return out

    def flux_through(self, i: int) -> float:
        """Discrete flux in +x1 direction through the plane between columns i, i+1."""
        w = np.full(self.values.shape[1], self.h)
        w[0] = w[-1] = self.h / 2.0
        return float(np.sum(w * self.face_coeff[i, :] * (self.values[i, :] - self.values[i + 1, :]) / self.h))

    def to_csv(self, path):
        X1, X2 = np.meshgrid(self.grid, self.grid, indexing="ij")
        arr = np.column_stack([X1.ravel(), X2.ravel(), self.values.ravel()])
        np.savetxt(path, arr, delimiter=",", header="x1,x2,u", comments="")


# ---------------------------------------------------------------------------
# solvers


def solve_reference(p: PdeProblem, theta, mesh_n=None):
    """Reference discretization of the forward model at a fixed parameter.

    1-d: piecewise-linear finite elements on a uniform mesh with cell
    interfaces inserted as extra nodes.  2-d: five-point finite volumes
    with harmonic-mean face coefficients, conservative at no-flux rows.
    """
    theta = p.check_theta(theta)
    mesh_n = default_mesh(p) if mesh_n is None else int(mesh_n)
    if mesh_n < 8:
        raise ValueError("mesh_n must be at least 8")
    if p.spatial_dim == 1:
        return _solve_1d(p, theta, mesh_n)
    return _solve_2d(p, theta, mesh_n)


def _solve_1d(p: PdeProblem, theta, mesh_n) -> Solution1D:
    for seg in ("left", "right"):
        if p.boundary[seg].kind != "dirichlet":
            raise NotImplementedError("the 1-d solver supports Dirichlet conditions only")
    nodes = np.linspace(0.0, 1.0, mesh_n + 1)
    if p.diffusion.interfaces:
        nodes = np.sort(np.concatenate([nodes, np.asarray(p.diffusion.interfaces)]))
        keep = np.concatenate([[True], np.diff(nodes) > 1e-9])
        nodes = nodes[keep]
    h = np.diff(nodes)
    # two-point Gauss rule per element: exact for the piecewise-constant
    # coefficient (interfaces are nodes) and for affine sources
    off = h * (0.5 / np.sqrt(3.0))
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    g1, g2 = mid - off, mid + off
    a1 = np.exp(p.diffusion.log_kappa(theta, g1[:, None]))
    a2 = np.exp(p.diffusion.log_kappa(theta, g2[:, None]))
    a_elem = 0.5 * (a1 + a2)
    if not np.all(np.isfinite(a_elem)) or np.any(a_elem <= 0.0):
        raise NumericalError("diffusion coefficient is degenerate on this mesh")
    s = a_elem / h  # element stiffness scale
    f1 = p.source_at(theta, g1[:, None])
    f2 = p.source_at(theta, g2[:, None])
    wl, wr = 0.5 + 0.5 / np.sqrt(3.0), 0.5 - 0.5 / np.sqrt(3.0)
    load_l = 0.5 * h * (f1 * wl + f2 * wr)
    load_r = 0.5 * h * (f1 * wr + f2 * wl)

    m = len(nodes)
    diag = np.zeros(m)
    diag[:-1] += s
    diag[1:] += s
    rhs = np.zeros(m)
    rhs[:-1] += load_l
    rhs[1:] += load_r

    u0 = float(p.boundary_value("left", theta, nodes[:1, None])[0])
    u1 = float(p.boundary_value("right", theta, nodes[-1:, None])[0])
    rhs[1] += s[0] * u0
    rhs[-2] += s[-1] * u1

    ab = np.zeros((3, m - 2))
    ab[1] = diag[1:-1]
    ab[0, 1:] = -s[1:-1]
    ab[2, :-1] = -s[1:-1]
    try:
        interior = solve_banded((1, 1), ab, rhs[1:-1])
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise NumericalError("singular stiffness matrix") from exc
    values = np.concatenate([[u0], interior, [u1]])
    return Solution1D(nodes, values)


def _solve_2d(p: PdeProblem, theta, mesh_n) -> Solution2D:
    for seg in ("left", "right"):
        if p.boundary[seg].kind != "dirichlet":
            raise NotImplementedError("the 2-d solver needs Dirichlet conditions at left/right")
    for seg in ("bottom", "top"):
        bc = p.boundary[seg]
        if bc.kind != "neumann" or (not callable(bc.value) and float(bc.value) != 0.0):
            raise NotImplementedError("the 2-d solver supports zero-flux bottom/top only")
    n = mesh_n
    h = 1.0 / n
    grid = np.linspace(0.0, 1.0, n + 1)
    X1, X2 = np.meshgrid(grid, grid, indexing="ij")
    nodes = np.column_stack([X1.ravel(), X2.ravel()])
    f = p.source_at(theta, nodes).reshape(n + 1, n + 1)

    def coeff_at(pts):
        c = np.exp(p.diffusion.log_kappa(theta, pts))
        if not np.all(np.isfinite(c)) or np.any(c <= 0.0):
            raise NumericalError("diffusion coefficient is degenerate on this grid")
        return c

    def hmean(x, y):
        return 2.0 * x * y / (x + y)

    # face coefficients: harmonic mean of the two quarter-point samples
    # along the face normal, exact for cells aligned with the grid
    q1 = np.column_stack([(X1[:-1, :] + h / 4.0).ravel(), X2[:-1, :].ravel()])
    q3 = np.column_stack([(X1[:-1, :] + 3.0 * h / 4.0).ravel(), X2[:-1, :].ravel()])
    cx = hmean(coeff_at(q1), coeff_at(q3)).reshape(n, n + 1)  # faces normal to x1
    q1 = np.column_stack([X1[:, :-1].ravel(), (X2[:, :-1] + h / 4.0).ravel()])
    q3 = np.column_stack([X1[:, :-1].ravel(), (X2[:, :-1] + 3.0 * h / 4.0).ravel()])
    cy = hmean(coeff_at(q1), coeff_at(q3)).reshape(n + 1, n)  # faces normal to x2

    u_left = p.boundary_value("left", theta, np.column_stack([np.zeros(n + 1), grid]))
    u_right = p.boundary_value("right", theta, np.column_stack([np.ones(n + 1), grid]))

    # unknowns: columns 1..n-1, all rows (no-flux rows carry half volumes)
    idx = -np.ones((n + 1, n + 1), dtype=int)
    unknowns = [(i, j) for i in range(1, n) for j in range(n + 1)]
    for k, (i, j) in enumerate(unknowns):
        idx[i, j] = k
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(unknowns))
    for k, (i, j) in enumerate(unknowns):
        ly = h if 0 < j < n else h / 2.0  # x1-face length at this row
        diag = 0.0
        rhs[k] += f[i, j] * h * ly
        # west / east faces
        for di, ub in ((-1, u_left), (1, u_right)):
            ii = i + di
            af = cx[min(i, ii), j] * ly / h
            diag += af
            if ii == 0 or ii == n:
                rhs[k] += af * ub[j]
            else:
                rows.append(k)
                cols.append(idx[ii, j])
                vals.append(-af)
        # south / north faces (absent beyond the no-flux rows)
        for dj in (-1, 1):
            jj = j + dj
            if jj < 0 or jj > n:
                continue
            af = cy[i, min(j, jj)] * h / h
            diag += af
            rows.append(k)
            cols.append(idx[i, jj])
            vals.append(-af)
        rows.append(k)
        cols.append(k)
        vals.append(diag)
    A = csr_matrix((vals, (rows, cols)), shape=(len(unknowns), len(unknowns)))
    try:
        sol = spsolve(A, rhs)
    except Exception as exc:
        raise NumericalError("2-d linear system solve failed") from exc
    if not np.all(np.isfinite(sol)):
        raise NumericalError("2-d linear system produced non-finite values")
    values = np.zeros((n + 1, n + 1))
    values[0, :] = u_left
    values[n, :] = u_right
    for k, (i, j) in enumerate(unknowns):
        values[i, j] = sol[k]
    return Solution2D(grid, values, cx)


def forward_map(p: PdeProblem, obs, theta, mesh_n=None) -> np.ndarray:
    """Observed solution values G_X(theta)."""
    return obs.observe(solve_reference(p, theta, mesh_n))


def make_data(p: PdeProblem, obs, theta_dagger, noise_var, seed, mesh_n=None) -> SyntheticData:
    """Synthetic observations: forward map at the true parameter plus iid noise."""
    if noise_var < 0:
        raise ValueError("noise_var must be nonnegative")
    theta_dagger = p.check_theta(theta_dagger)
    g = forward_map(p, obs, theta_dagger, mesh_n)
    eta = np.random.default_rng(seed).standard_normal(g.shape[0])
    return SyntheticData(g + np.sqrt(noise_var) * eta, theta_dagger, float(noise_var), int(seed))


# ---------------------------------------------------------------------------
# operators applied to spatial kernels


def operator_terms(p: PdeProblem, theta, X):
    """Differential-operator coefficients at interior points.

    Returns [(multi_index, coefficients)] with the action
    (L^theta v)(x_i) = sum_t coefficients_t[i] * (D^{multi_index_t} v)(x_i),
    i.e. L v = -exp(kappa) (grad kappa . grad v + laplace v).
    """
    X = _as_points(X, p.spatial_dim)
    for b in p.diffusion.interfaces:
        if np.any(np.abs(X[:, 0] - b) < _INTERFACE_TOL):
            raise ValueError(f"evaluation point lies on the diffusion interface x={b}")
    if np.any(X <= 0.0) or np.any(X >= 1.0):
        raise ValueError("differential operator points must be strictly interior")
    a = np.exp(p.diffusion.log_kappa(theta, X))
    terms = []
    for d in range(p.spatial_dim):
        mi = tuple(2 if dd == d else 0 for dd in range(p.spatial_dim))
        terms.append((mi, -a))
    if p.diffusion.spatially_varying_log:
        grad = p.diffusion.grad_log_kappa_x(theta, X)
        for d in range(p.spatial_dim):
            mi = tuple(1 if dd == d else 0 for dd in range(p.spatial_dim))
            terms.append((mi, -a * grad[:, d]))
    return terms


def boundary_terms(p: PdeProblem, X):
    """Boundary-operator coefficients: identity at Dirichlet points, outward
    normal derivative at Neumann points.  All rows of X must lie on one
    boundary segment."""
    X = _as_points(X, p.spatial_dim)
    seg = _segment_of(p, X)
    bc = p.boundary[seg]
    ones = np.ones(X.shape[0])
    if bc.kind == "dirichlet":
        return [(tuple([0] * p.spatial_dim), ones)]
    normal_axis, sign = _SEGMENT_NORMALS[seg]
    mi = tuple(1 if dd == normal_axis else 0 for dd in range(p.spatial_dim))
    return [(mi, sign * ones)]


_SEGMENT_NORMALS = {"left": (0, -1.0), "right": (0, 1.0), "bottom": (1, -1.0), "top": (1, 1.0)}


def _segment_of(p: PdeProblem, X) -> str:
    tol = 1e-12
    candidates = []
    for seg in _SEGMENTS[p.spatial_dim]:
        axis, side = {"left": (0, 0.0), "right": (0, 1.0), "bottom": (1, 0.0), "top": (1, 1.0)}[seg]
        if np.all(np.abs(X[:, axis] - side) < tol):
            candidates.append(seg)
    if not candidates:
        raise ValueError("boundary operator points must lie on a single boundary segment")
    # corners resolve to the Dirichlet (left/right) segment first
    return candidates[0]


_WHICH = {
    "L_right": ("I", "L"),
    "L_left": ("L", "I"),
    "LL": ("L", "L"),
    "B_right": ("I", "B"),
    "B_left": ("B", "I"),
    "BB": ("B", "B"),
    "BL": ("B", "L"),
    "LB": ("L", "B"),
}


def apply_operator_to_kernel(p: PdeProblem, k_s: Kernel, which: str, x, xp, theta=None, theta_p=None) -> float:
    """Apply the problem's differential/boundary operators to a spatial kernel.

    ``which`` selects the operator on each argument: identity, L (needs
    the corresponding parameter vector), or the boundary operator B.
    """
    if which not in _WHICH:
        raise ValueError(f"unknown operator selector {which!r}")
    if k_s.input_dim != p.spatial_dim:
        raise ValueError("spatial kernel dimension does not match the problem")
    role_a, role_b = _WHICH[which]
    xa = _as_points(x, p.spatial_dim)
    xb = _as_points(xp, p.spatial_dim)
    if xa.shape[0] != 1 or xb.shape[0] != 1:
        raise ValueError("apply_operator_to_kernel is pointwise; pass single points")

    def terms_for(role, pt, th, label):
        if role == "I":
            return [(tuple([0] * p.spatial_dim), np.ones(1))]
        if role == "B":
            return boundary_terms(p, pt)
        if th is None:
            raise ValueError(f"operator {which} needs {label}")
        return operator_terms(p, th, pt)

    ta = terms_for(role_a, xa, theta, "theta")
    tb = terms_for(role_b, xb, theta_p, "theta_p")
    total = 0.0
    for mi_a, ca in ta:
        for mi_b, cb in tb:
            total += float(ca[0]) * float(cb[0]) * k_s.deriv_mixed(xa[0], xb[0], mi_a, mi_b)
    return total
