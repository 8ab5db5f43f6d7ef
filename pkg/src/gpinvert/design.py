"""Space-filling designs and training-set generation.

Training inputs are Halton points mapped into the parameter box; the
first N feed the forward-map evaluations and the following N_bar carry
the PDE-residual and boundary observations of the operator-constrained
emulator.  Everything here is deterministic, so a training set can be
cached and reloaded byte-for-byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .pde import PdeProblem, forward_map

__all__ = ["halton", "TrainingSet", "build_training"]

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)

# keep operator evaluation points at least this far from diffusion interfaces
INTERFACE_MARGIN = 1e-3


def halton(n: int, dim: int, skip: int = 1) -> np.ndarray:
    """Elements skip .. skip+n-1 of the Halton sequence in [0,1]^dim.

    The conventional start is skip=1, dropping the all-zero element.
    """
    if dim < 1 or dim > len(_PRIMES):
        raise ValueError(f"dim must be in 1..{len(_PRIMES)}")
    if n < 0 or skip < 0:
        raise ValueError("n and skip must be nonnegative")
    out = np.empty((n, dim))
    for d in range(dim):
        base = _PRIMES[d]
        for i in range(n):
            out[i, d] = _radical_inverse(base, skip + i)
    return out


def _radical_inverse(base: int, i: int) -> float:
    f, r = 1.0, 0.0
    while i > 0:
        f /= base
        r += f * (i % base)
        i //= base
    return r


@dataclass
class TrainingSet:
    """Forward-map training data plus optional operator-constraint data.

    gx row i is the forward map at theta row i; f_vals[i, j] and
    g_vals[i, j] are the source and boundary values at (theta_bar[i],
    xf[j]) and (theta_bar[i], xg[j]).
    """

    theta: np.ndarray
    gx: np.ndarray
    theta_bar: Optional[np.ndarray] = None
    xf: Optional[np.ndarray] = None
    xg: Optional[np.ndarray] = None
    f_vals: Optional[np.ndarray] = None
    g_vals: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return self.theta.shape[0]

    @property
    def has_operator_data(self) -> bool:
        return self.theta_bar is not None

    def to_json(self) -> str:
        def enc(a):
            return None if a is None else np.asarray(a).tolist()

        payload = {
            "theta": enc(self.theta),
            "gx": enc(self.gx),
            "theta_bar": enc(self.theta_bar),
            "xf": enc(self.xf),
            "xg": enc(self.xg),
            "f_vals": enc(self.f_vals),
            "g_vals": enc(self.g_vals),
            "provenance": self.provenance,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainingSet":
        raw = json.loads(text)

        def dec(key):
            return None if raw.get(key) is None else np.asarray(raw[key], dtype=float)

        return cls(
            theta=dec("theta"),
            gx=dec("gx"),
            theta_bar=dec("theta_bar"),
            xf=dec("xf"),
            xg=dec("xg"),
            f_vals=dec("f_vals"),
            g_vals=dec("g_vals"),
            provenance=raw.get("provenance", {}),
        )

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_json())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "TrainingSet":
        with open(path) as fh:
            return cls.from_json(fh.read())


def build_training(
    p: PdeProblem,
    obs,
    n_train: int,
    n_bar: int = 0,
    d_f: int = 0,
    d_g: int = 0,
    mesh_n=None,
    seed: int = 0,
    design: str = "halton",
) -> TrainingSet:
    """Generate the training set for one problem/observation pair.

    Parameters Theta are Halton elements 1..n_train mapped to the box;
    theta_bar continues with the following n_bar elements.  xf are
    near-uniform interior points kept clear of diffusion interfaces; xg
    are boundary points (the endpoints in 1-d, equally spaced points on
    each segment in 2-d).
    """
    if design != "halton":
        raise ConfigError(f"unknown design {design!r}")
    if n_train < 1:
        raise ConfigError("n_train must be at least 1")
    lo, hi = p.theta_lo, p.theta_hi
    theta = lo + halton(n_train, p.dim_theta, skip=1) * (hi - lo)
    gx = np.array([forward_map(p, obs, t, mesh_n) for t in theta])

    ts = TrainingSet(
        theta=theta,
        gx=gx,
        provenance={
            "design": design,
            "n_train": int(n_train),
            "n_bar": int(n_bar),
            "d_f": int(d_f),
            "d_g": int(d_g),
            "mesh_n": None if mesh_n is None else int(mesh_n),
            "seed": int(seed),
        },
    )
    if n_bar <= 0:
        return ts
    if d_f < 1:
        raise ConfigError("operator data requested (n_bar > 0) but d_f < 1")
    theta_bar = lo + halton(n_bar, p.dim_theta, skip=1 + n_train) * (hi - lo)
    xf = _interior_points(p, d_f)
    ts.theta_bar = theta_bar
    ts.xf = xf
    ts.f_vals = np.array([p.source_at(t, xf) for t in theta_bar])
    if d_g > 0:
        xg = _boundary_points(p, d_g)
        ts.xg = xg
        ts.g_vals = np.array([_boundary_values(p, t, xg) for t in theta_bar])
    return ts


def _snap_off_interfaces(x: np.ndarray, interfaces) -> np.ndarray:
    x = x.copy()
    for b in interfaces:
        close = np.abs(x - b) < INTERFACE_MARGIN
        x[close] = b + np.where(x[close] >= b, INTERFACE_MARGIN, -INTERFACE_MARGIN)
    return np.clip(x, INTERFACE_MARGIN, 1.0 - INTERFACE_MARGIN)


def _interior_points(p: PdeProblem, d_f: int) -> np.ndarray:
    if p.spatial_dim == 1:
        x = (np.arange(d_f) + 1.0) / (d_f + 1.0)
        return _snap_off_interfaces(x, p.diffusion.interfaces)[:, None]
    # 2-d: the most square grid factorization, interfaces run along x2
    rows = int(np.sqrt(d_f))
    while d_f % rows:
        rows -= 1
    cols = d_f // rows
    x1 = _snap_off_interfaces((np.arange(cols) + 1.0) / (cols + 1.0), p.diffusion.interfaces)
    x2 = (np.arange(rows) + 1.0) / (rows + 1.0)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    return np.column_stack([X1.ravel(), X2.ravel()])


def _boundary_points(p: PdeProblem, d_g: int) -> np.ndarray:
    if p.spatial_dim == 1:
        if d_g != 2:
            raise ConfigError("a 1-d problem has two boundary points; d_g must be 2")
        return np.array([[0.0], [1.0]])
    if d_g < 4 or d_g % 4:
        raise ConfigError("d_g must be a positive multiple of 4 (points per boundary segment)")
    m = d_g // 4
    t = (np.arange(m) + 1.0) / (m + 1.0)
    pts = []
    for seg in ("left", "right", "bottom", "top"):
        if seg == "left":
            pts.append(np.column_stack([np.zeros(m), t]))
        elif seg == "right":
            pts.append(np.column_stack([np.ones(m), t]))
        elif seg == "bottom":
            pts.append(np.column_stack([t, np.zeros(m)]))
        else:
            pts.append(np.column_stack([t, np.ones(m)]))
    return np.vstack(pts)


def _boundary_values(p: PdeProblem, theta, xg: np.ndarray) -> np.ndarray:
    vals = np.empty(xg.shape[0])
    for j, x in enumerate(xg):
        seg = _segment_name(p, x)
        bc = p.boundary[seg]
        if bc.kind == "neumann":
            # only zero-flux conditions are supported by the solvers
            vals[j] = 0.0
        else:
            vals[j] = p.boundary_value(seg, theta, x[None, :])[0]
    return vals


def _segment_name(p: PdeProblem, x) -> str:
    tol = 1e-12
    if abs(x[0]) < tol:
        return "left"
    if abs(x[0] - 1.0) < tol:
        return "right"
    if p.spatial_dim == 2 and abs(x[1]) < tol:
        return "bottom"
    if p.spatial_dim == 2 and abs(x[1] - 1.0) < tol:
        return "top"
    raise ValueError(f"point {x} is not on the boundary")
