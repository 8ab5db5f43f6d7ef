"""Metropolis-adjusted Langevin sampling with summary diagnostics.

The proposal is theta' = theta + step * grad_logpi(theta) + sqrt(2 step) xi
with iid standard Gaussian xi, accepted by the standard Metropolis rule in
log space.  Any target exposing ``log_density`` and ``grad_log_density``
(and optionally ``value_and_grad``) can be sampled, so analytic targets
drop in next to posterior objects.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

__all__ = ["MalaConfig", "Chain", "mala_run", "diagnostics"]

# abort when more than half of all proposals are non-finite (after a grace
# period long enough for the rate to be meaningful)
_NONFINITE_FRACTION = 0.5
_NONFINITE_GRACE = 50


@dataclass(frozen=True)
class MalaConfig:
    step: float
    n_samples: int
    init: np.ndarray
    burn_in: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init", np.atleast_1d(np.asarray(self.init, dtype=float)))
        if not self.step > 0:
            raise ValueError("step must be positive")
        burn = self.n_samples // 10 if self.burn_in is None else self.burn_in
        object.__setattr__(self, "burn_in", int(burn))
        if not self.n_samples > self.burn_in >= 0:
            raise ValueError("need n_samples > burn_in >= 0")

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"step": self.step, "n_samples": self.n_samples, "burn_in": self.burn_in,
             "seed": self.seed, "init": self.init.tolist()},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Chain:
    samples: np.ndarray
    acceptance_rate: float
    per_sample_seconds: float
    provenance: dict = field(default_factory=dict)

    def save(self, path) -> None:
        d = self.samples.shape[1]
        header = (
            f"d_theta={d} config={self.provenance.get('config', '')} "
            f"acceptance_rate={self.acceptance_rate!r}"
        )
        np.savetxt(path, self.samples, delimiter=",", header=header)

    @classmethod
    def load(cls, path) -> "Chain":
        with open(path) as fh:
            head = fh.readline().lstrip("# ").split()
        meta = dict(kv.split("=", 1) for kv in head if "=" in kv)
        samples = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(
            samples=samples,
            acceptance_rate=float(meta.get("acceptance_rate", "nan")),
            per_sample_seconds=float("nan"),
            provenance={"config": meta.get("config", "")},
        )


def _eval(target, theta):
    vag = getattr(target, "value_and_grad", None)
    if vag is not None:
        return vag(theta)
    return target.log_density(theta), np.asarray(target.grad_log_density(theta), dtype=float)


def mala_run(target, cfg: MalaConfig) -> Chain:
    """Run one MALA chain; fully determined by (target, cfg)."""
    rng = np.random.default_rng(cfg.seed)
    theta = cfg.init.copy()
    d = theta.size
    lp, grad = _eval(target, theta)
    if not (np.isfinite(lp) and np.all(np.isfinite(grad))):
        raise ValueError(f"log-density or gradient not finite at the initial point {theta}")

    step = cfg.step
    noise_scale = np.sqrt(2.0 * step)
    kept = np.empty((cfg.n_samples - cfg.burn_in, d))
    accepted = 0
    nonfinite = 0
    t0 = time.perf_counter()
    for n in range(cfg.n_samples):
        xi = rng.standard_normal(d)
        u = rng.uniform()
        prop = theta + step * grad + noise_scale * xi
        lp_p, grad_p = _eval(target, prop)
        ok = np.isfinite(lp_p) and np.all(np.isfinite(grad_p))
        if ok:
            # log q(theta | prop) - log q(prop | theta)
            fwd = prop - theta - step * grad
            rev = theta - prop - step * grad_p
            log_ratio = lp_p - lp + (fwd @ fwd - rev @ rev) / (4.0 * step)
            if np.log(u) < log_ratio:
                theta, lp, grad = prop, lp_p, grad_p
                accepted += 1
        else:
            nonfinite += 1
            if n + 1 >= _NONFINITE_GRACE and nonfinite > _NONFINITE_FRACTION * (n + 1):
                raise NumericalError(
                    f"{nonfinite} of {n + 1} proposals had non-finite density or "
                    f"gradient; the chain cannot mix (step={step}, last point {theta})"
                )
        if n >= cfg.burn_in:
            kept[n - cfg.burn_in] = theta
    elapsed = time.perf_counter() - t0
    return Chain(
        samples=kept,
        acceptance_rate=accepted / cfg.n_samples,
        per_sample_seconds=elapsed / cfg.n_samples,
        provenance={"config": cfg.fingerprint(), "nonfinite_proposals": nonfinite},
    )


def diagnostics(chain: Chain) -> dict:
    """Per-coordinate mean, stddev, autocorrelation time and effective
    sample size (Geyer initial-positive-sequence estimator)."""
    x = np.asarray(chain.samples, dtype=float)
    n, d = x.shape
    if n < 100:
        raise ValueError("diagnostics need at least 100 samples")
    out = {"n": n, "mean": [], "stddev": [], "act": [], "ess": [], "flags": []}
    for j in range(d):
        col = x[:, j]
        mu = float(col.mean())
        sd = float(col.std())
        out["mean"].append(mu)
        out["stddev"].append(sd)
        if sd == 0.0:
            out["act"].append(float(n))
            out["ess"].append(1.0)
            out["flags"].append("constant")
            continue
        act = _initial_positive_act(col - mu)
        out["act"].append(act)
        out["ess"].append(min(float(n), n / act))
        out["flags"].append("ok")
    return out


def _initial_positive_act(x: np.ndarray) -> float:
    """Integrated autocorrelation time, truncated where the sum of adjacent
    autocorrelation pairs first turns non-positive."""
    n = x.size
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    rho = acov / acov[0]
    tau = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        tau += pair
    return max(2.0 * tau - 1.0, 1.0)
