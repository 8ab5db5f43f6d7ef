"""Quantitative comparison of posteriors and emulators.

Densities are compared on rectangular grids by quadrature (never from
samples); chains are summarized through marginal histograms and moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["GridDensity", "hellinger", "avg_emulator_variance", "marginal_hist", "emulator_rmse"]


@dataclass(frozen=True)
class GridDensity:
    """A (possibly normalized) density tabulated on a 1-d or 2-d grid."""

    axes: tuple
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not 1 <= len(axes) <= 2:
            raise ConfigError("grid densities support one or two parameter dimensions")
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ConfigError("each grid axis must be a strictly increasing 1-d array")
        if self.values.shape != tuple(a.size for a in axes):
            raise ConfigError(
                f"values shape {self.values.shape} does not match the grid "
                f"{tuple(a.size for a in axes)}"
            )
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ConfigError("density values must be finite and non-negative")

    def integral(self) -> float:
        v = self.values
        if len(self.axes) == 1:
            return float(np.trapezoid(v, self.axes[0]))
        return float(np.trapezoid(np.trapezoid(v, self.axes[1], axis=1), self.axes[0]))

    def normalize(self) -> "GridDensity":
        z = self.integral()
        if z <= 0:
            raise ConfigError("cannot normalize a density with non-positive mass")
        return GridDensity(self.axes, self.values / z, normalized=True)

    def to_csv(self, path) -> None:
        cols = [f"theta{i + 1}" for i in range(len(self.axes))] + ["density"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            if len(self.axes) == 1:
                for t, v in zip(self.axes[0], self.values):
                    fh.write(f"{float(t)!r},{float(v)!r}\n")
            else:
                for i, t1 in enumerate(self.axes[0]):
                    for j, t2 in enumerate(self.axes[1]):
                        fh.write(f"{float(t1)!r},{float(t2)!r},{float(self.values[i, j])!r}\n")


def hellinger(p: GridDensity, q: GridDensity) -> float:
    """Hellinger distance sqrt(0.5 * int (sqrt p - sqrt q)^2) by trapezoid."""
    if not (p.normalized and q.normalized):
        raise ValueError("hellinger needs normalized densities")
    if len(p.axes) != len(q.axes) or any(
        not np.array_equal(a, b) for a, b in zip(p.axes, q.axes)
    ):
        raise ValueError("hellinger needs identical grids")
    diff = GridDensity(p.axes, (np.sqrt(p.values) - np.sqrt(q.values)) ** 2)
    return float(np.sqrt(min(max(0.5 * diff.integral(), 0.0), 1.0)))


def avg_emulator_variance(gp, thetas) -> float:
    """Mean over the grid of trace(predict_cov(theta)) / d_y."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[0] == 0:
        raise ConfigError("avg_emulator_variance needs a non-empty grid")
    tot = 0.0
    for t in thetas:
        c = np.atleast_2d(gp.predict_cov(t))
        tot += float(np.trace(c)) / c.shape[0]
    return tot / thetas.shape[0]


def marginal_hist(chain, coord: int, bins: int = 50, extent=None):
    """Normalized histogram of one chain coordinate; returns (edges, density)."""
    if bins < 10:
        raise ConfigError("marginal_hist needs at least 10 bins")
    x = np.asarray(chain.samples)[:, coord]
    if extent is None:
        extent = (float(x.min()), float(x.max()))
    density, edges = np.histogram(x, bins=bins, range=extent, density=True)
    return edges, density


def emulator_rmse(gp, theta_ref, oracle_forward) -> float:
    """Root-mean-square error of the predictive mean against an oracle."""
    theta_ref = np.asarray(theta_ref, dtype=float)
    pred = np.asarray(gp.predict_mean(theta_ref), dtype=float)
    ref = np.asarray(oracle_forward(theta_ref), dtype=float)
    return float(np.sqrt(np.mean((pred - ref) ** 2)))
