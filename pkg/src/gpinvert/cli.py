"""Config-driven experiment runner: studies, timings, and figure data.

One TOML file describes one study.  List-valued axes (emulator family,
training size, posterior form, collocation budgets) expand into a
cartesian sweep whose variants run in parallel, each writing to its own
subdirectory.  ``run`` executes the pipeline

    solve -> design -> condition -> (density grid | MALA) -> metrics,

``timings`` measures per-call averages on the same description, and
``report`` turns a finished run directory into per-figure CSV files and
optional SVG plots.  Training sets and conditioned-model sidecars are
cached under a directory keyed by a hash of the resolved configuration,
so re-running a config touches the solver only on the first pass.

Everything except wall-clock timings is a pure function of the resolved
configuration: outputs are bit-identical across re-runs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .design import TrainingSet, build_training, halton
from .emulator import EmulatorModel, condition
from .errors import ConfigError, NumericalError
from .kernels import MATERN52, SQUARED_EXPONENTIAL, kernel
from .mcmc import Chain, MalaConfig, diagnostics, mala_run
from .metrics import GridDensity, avg_emulator_variance, emulator_rmse, hellinger, marginal_hist
from .pde import (
    BoundaryCondition,
    ConstantDiffusion,
    ExpansionDiffusion,
    LocalAverageObservation,
    PdeProblem,
    PiecewiseConstantDiffusion,
    PointwiseObservation,
    constant_source,
    forward_map,
    linear_source,
    make_data,
)
from .posterior import ApproxPosterior, SmoothedUniformPrior, density_grid, true_posterior_grid

CACHE_ENV = "GPINVERT_CACHE_DIR"

_STUDY_KINDS = ("grid", "mcmc", "sweep")
_FAMILIES = ("baseline", "spatially_correlated", "pde_constrained", "potential")
_FORMS = ("mean", "marginal")
_KERNELS = (SQUARED_EXPONENTIAL, MATERN52)
_SEGMENTS = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}


# ---------------------------------------------------------------------------
# configuration


class _Resolver:
    """Reads dotted paths out of the raw tree, tracking defaults and holes."""

    def __init__(self, raw):
        self.raw = raw
        self.defaults: list[str] = []
        self.missing: list[str] = []

    def _fetch(self, path):
        node = self.raw
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                return False, None
            node = node[part]
        return True, node

    def req(self, path, types, what):
        found, val = self._fetch(path)
        if not found:
            self.missing.append(path)
            return None
        return _typed(path, val, types, what)

    def opt(self, path, default, types, what):
        found, val = self._fetch(path)
        if not found:
            self.defaults.append(path)
            return default
        return _typed(path, val, types, what)


def _typed(path, val, types, what):
    if types is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if isinstance(val, bool) and types in (int, float):
        raise ConfigError(f"{path}: expected {what}, got a boolean")
    if not isinstance(val, types):
        raise ConfigError(f"{path}: expected {what}, got {type(val).__name__}")
    return val


def _axis(path, val, item_types, what, allowed=None):
    """Normalize a sweepable field to a non-empty list and check items."""
    if val is None:  # already recorded as missing
        return None
    vals = val if isinstance(val, list) else [val]
    if not vals:
        raise ConfigError(f"{path}: sweep list must not be empty")
    out = []
    for v in vals:
        v = _typed(path, v, item_types, what)
        if allowed is not None and v not in allowed:
            raise ConfigError(f"{path}: {v!r} is not one of {sorted(allowed)}")
        out.append(v)
    return out


def _set_path(tree, path, value):
    parts = path.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{path}: cannot override inside non-table field {p!r}")
        node = nxt
    node[parts[-1]] = value


def _resolve_kernel(r, path, required):
    fam = r.req(f"{path}.family", str, "a string") if required else r.opt(
        f"{path}.family", None, str, "a string"
    )
    if fam is None:
        return None
    if fam not in _KERNELS:
        raise ConfigError(f"{path}.family: {fam!r} is not one of {sorted(_KERNELS)}")
    return {
        "family": fam,
        "variance": _positive(f"{path}.variance", r.req(f"{path}.variance", float, "a number")),
        "lengthscale": _positive(
            f"{path}.lengthscale", r.req(f"{path}.lengthscale", float, "a number")
        ),
    }


def _positive(path, val):
    if val is not None and not val > 0:
        raise ConfigError(f"{path}: must be positive")
    return val


def resolve_config(raw, overrides=None):
    """Validate the raw tree and fill every default.

    Returns (resolved config dict, list of defaulted field paths).  The
    resolved dict is plain JSON-typed data and is what gets hashed for
    caching and recorded in the provenance block.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    known = {"experiment", "problem", "observation", "data", "emulator", "posterior",
             "grid", "sampler", "ground_truth", "outputs"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    raw = copy.deepcopy(raw)
    for path, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, path, value)

    r = _Resolver(raw)
    cfg: dict = {}

    cfg["experiment"] = {
        "id": r.req("experiment.id", str, "a string"),
        "kind": r.req("experiment.kind", str, "a string"),
    }

    spatial_dim = r.req("problem.spatial_dim", int, "an integer")
    diff_kind = r.req("problem.diffusion.kind", str, "a string")
    diffusion = {"kind": diff_kind}
    if diff_kind == "piecewise":
        diffusion["breakpoints"] = r.req("problem.diffusion.breakpoints", list, "a list")
        diffusion["values"] = r.req("problem.diffusion.values", list, "a list")
    elif diff_kind == "expansion":
        diffusion["n_terms"] = r.req("problem.diffusion.n_terms", int, "an integer")
    elif diff_kind is not None and diff_kind != "constant":
        raise ConfigError(
            f"problem.diffusion.kind: {diff_kind!r} is not one of "
            "['constant', 'expansion', 'piecewise']"
        )
    source_kind = r.opt("problem.source.kind", "constant", str, "a string")
    if source_kind == "constant":
        source = {"kind": "constant",
                  "value": r.opt("problem.source.value", 1.0, float, "a number")}
    elif source_kind == "linear":
        source = {"kind": "linear",
                  "slope": r.req("problem.source.slope", float, "a number")}
    else:
        raise ConfigError(f"problem.source.kind: {source_kind!r} is not one of ['constant', 'linear']")
    boundary = {}
    for seg in _SEGMENTS.get(spatial_dim, ()):
        boundary[seg] = {
            "kind": r.opt(f"problem.boundary.{seg}.kind", "dirichlet", str, "a string"),
            "value": r.opt(f"problem.boundary.{seg}.value", 0.0, float, "a number"),
        }
        if boundary[seg]["kind"] not in ("dirichlet", "neumann"):
            raise ConfigError(
                f"problem.boundary.{seg}.kind: must be 'dirichlet' or 'neumann'"
            )
    cfg["problem"] = {
        "spatial_dim": spatial_dim,
        "theta_box": r.req("problem.theta_box", list, "a [[lo...], [hi...]] table"),
        "diffusion": diffusion,
        "source": source,
        "boundary": boundary,
    }

    obs_kind = r.req("observation.kind", str, "a string")
    if obs_kind == "pointwise":
        cfg["observation"] = {"kind": "pointwise",
                              "d_y": r.opt("observation.d_y", 5, int, "an integer")}
    elif obs_kind == "local_average":
        found, iv = r._fetch("observation.intervals")
        if found:
            cfg["observation"] = {"kind": "local_average",
                                  "intervals": _typed("observation.intervals", iv, list, "a list")}
        else:
            n = r.opt("observation.n_intervals", 16, int, "an integer")
            edges = np.linspace(0.0, 1.0, n + 1)
            cfg["observation"] = {
                "kind": "local_average",
                "intervals": [[float(a), float(b)] for a, b in zip(edges[:-1], edges[1:])],
            }
    elif obs_kind is not None:
        raise ConfigError(
            f"observation.kind: {obs_kind!r} is not one of ['local_average', 'pointwise']"
        )

    cfg["data"] = {
        "theta_dagger": r.req("data.theta_dagger", list, "a list of numbers"),
        "noise_var": _positive("data.noise_var", r.req("data.noise_var", float, "a number")),
        "seed": r.opt("data.seed", 0, int, "an integer"),
    }

    default_mesh_n = 512 if spatial_dim == 1 else 64
    mesh_n = r.opt("emulator.mesh_n", default_mesh_n, int, "an integer")
    cfg["data"]["mesh_n"] = r.opt("data.mesh_n", 4 * mesh_n, int, "an integer")
    emu_family_raw = r.req("emulator.family", (str, list), "a family name or list of them")
    emu = {
        "family": _axis("emulator.family", emu_family_raw, str, "a string", set(_FAMILIES))
        if emu_family_raw is not None else None,
        "n_train": _axis("emulator.n_train",
                         r.req("emulator.n_train", (int, list), "an integer or list"),
                         int, "an integer"),
        "n_bar": _axis("emulator.n_bar", r.opt("emulator.n_bar", 0, (int, list), "an integer or list"),
                       int, "an integer"),
        "d_f": _axis("emulator.d_f", r.opt("emulator.d_f", 0, (int, list), "an integer or list"),
                     int, "an integer"),
        "d_g": r.opt("emulator.d_g", 0, int, "an integer"),
        "mesh_n": mesh_n,
        "design_seed": r.opt("emulator.design_seed", 0, int, "an integer"),
        "jitter": _positive("emulator.jitter", r.opt("emulator.jitter", 1e-12, float, "a number")),
        "k_p": _resolve_kernel(r, "emulator.k_p", required=True),
        "k_s": _resolve_kernel(r, "emulator.k_s", required=False),
        # the misfit surrogate lives on a completely different output scale,
        # so it may carry its own kernel; k_p is the fallback
        "k_phi": _resolve_kernel(r, "emulator.k_phi", required=False),
    }
    cfg["emulator"] = emu

    cfg["posterior"] = {
        "form": _axis("posterior.form", r.req("posterior.form", (str, list), "a form or list"),
                      str, "a string", set(_FORMS)),
        "lam": _positive("posterior.lam", r.opt("posterior.lam", 1e-3, float, "a number")),
    }

    cfg["grid"] = {
        "n_points": r.opt("grid.n_points", 401 if spatial_dim == 1 else 61, int, "an integer"),
        "mesh_n": r.opt("grid.mesh_n", cfg["data"]["mesh_n"], int, "an integer"),
    }

    study = cfg["experiment"]["kind"]
    if study is not None and study not in _STUDY_KINDS:
        raise ConfigError(f"experiment.kind: {study!r} is not one of {sorted(_STUDY_KINDS)}")
    if study == "mcmc":
        step_by_form = r.opt("sampler.step_by_form", {}, dict, "a table of form -> step")
        step_keys = set(_FORMS) | {f"{fam}_{form}" for fam in _FAMILIES for form in _FORMS}
        for form, val in step_by_form.items():
            if form not in step_keys:
                raise ConfigError(f"sampler.step_by_form.{form}: not a posterior form "
                                  "or family_form pair")
            _positive(f"sampler.step_by_form.{form}",
                      _typed(f"sampler.step_by_form.{form}", val, float, "a number"))
        cfg["sampler"] = {
            "step": _positive("sampler.step", r.req("sampler.step", float, "a number")),
            "step_by_form": {k: float(v) for k, v in step_by_form.items()},
            "n_samples": r.opt("sampler.n_samples", 100_000, int, "an integer"),
            "burn_in": r.opt("sampler.burn_in", None, int, "an integer"),
            "seed": r.opt("sampler.seed", 1, int, "an integer"),
            "init": r.opt("sampler.init", "center", (str, list), "'center' or a list"),
        }
        gt_step = r.opt("ground_truth.step", None, float, "a number")
        cfg["ground_truth"] = {
            "mode": r.opt("ground_truth.mode", "emulator", str, "a string"),
            "n_train": r.opt("ground_truth.n_train", 100, int, "an integer"),
            # the reference chain targets a much tighter posterior than the
            # small-N variants, so it may need its own step
            "step": None if gt_step is None else _positive("ground_truth.step", gt_step),
        }
        if cfg["ground_truth"]["mode"] not in ("emulator", "solver", "none"):
            raise ConfigError("ground_truth.mode: must be 'emulator', 'solver' or 'none'")

    cfg["outputs"] = {
        "directory": r.opt("outputs.directory", None, str, "a string"),
        "svg": r.opt("outputs.svg", True, bool, "a boolean"),
        "cache_dir": r.opt("outputs.cache_dir", None, str, "a string"),
    }

    if r.missing:
        raise ConfigError("missing required config fields: " + ", ".join(sorted(r.missing)))

    # cross-field checks that need the whole tree
    needs_ks = {"spatially_correlated", "pde_constrained"} & set(emu["family"])
    if needs_ks and emu["k_s"] is None:
        raise ConfigError(
            f"emulator.k_s: required by the {sorted(needs_ks)} families in emulator.family"
        )
    if "pde_constrained" in emu["family"] and (max(emu["n_bar"]) < 1 or max(emu["d_f"]) < 1):
        raise ConfigError("emulator.n_bar, emulator.d_f: the pde_constrained family "
                          "needs at least one linearization point and collocation point")
    if any(n < 1 for n in emu["n_train"]):
        raise ConfigError("emulator.n_train: every value must be at least 1")
    if any(n < 0 for n in emu["n_bar"]) or any(n < 0 for n in emu["d_f"]) or emu["d_g"] < 0:
        raise ConfigError("emulator.n_bar, emulator.d_f, emulator.d_g: must be non-negative")
    if obs_kind == "local_average" and spatial_dim != 1:
        raise ConfigError("observation.kind: local averages are one-dimensional only")
    return cfg, r.defaults


def load_config(path, overrides=None):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    return resolve_config(raw, overrides)


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# assembling model objects from the resolved config


def build_problem(pc) -> PdeProblem:
    d = pc["diffusion"]
    if d["kind"] == "constant":
        diffusion = ConstantDiffusion()
    elif d["kind"] == "piecewise":
        diffusion = PiecewiseConstantDiffusion(d["breakpoints"], d["values"])
    else:
        diffusion = ExpansionDiffusion(d["n_terms"])
    s = pc["source"]
    source = constant_source(s["value"]) if s["kind"] == "constant" else linear_source(s["slope"])
    boundary = [
        BoundaryCondition(seg, b["kind"], b["value"]) for seg, b in sorted(pc["boundary"].items())
    ]
    try:
        return PdeProblem(pc["spatial_dim"], diffusion, source, boundary, pc["theta_box"])
    except ValueError as e:
        raise ConfigError(f"problem: {e}")


def build_observation(oc, spatial_dim):
    try:
        if oc["kind"] == "pointwise":
            if spatial_dim == 1:
                points = np.linspace(0.0, 1.0, oc["d_y"])[:, None]
            else:
                points = halton(oc["d_y"], 2)
            return PointwiseObservation(points, spatial_dim)
        return LocalAverageObservation(oc["intervals"])
    except ValueError as e:
        raise ConfigError(f"observation: {e}")


def _build_kernel(kc, input_dim):
    return kernel(kc["family"], kc["variance"], kc["lengthscale"], input_dim=input_dim)


def _box_probes(problem, n):
    u = halton(n, problem.dim_theta)
    return problem.theta_lo + u * (problem.theta_hi - problem.theta_lo)


def _grid_axes(problem, gc):
    # densities are compared over the prior box itself; the smoothed tail
    # outside carries negligible mass and the solver only accepts the box
    if problem.dim_theta > 2:
        raise ConfigError("grid studies need a one- or two-dimensional parameter")
    return tuple(
        np.linspace(lo, hi, gc["n_points"])
        for lo, hi in zip(problem.theta_lo, problem.theta_hi)
    )


# ---------------------------------------------------------------------------
# variants and caching


class Variant:
    def __init__(self, family, form, n_train, n_bar, d_f, swept):
        self.family, self.form = family, form
        self.n_train, self.n_bar, self.d_f = n_train, n_bar, d_f
        parts = [family, form, f"N{n_train}"]
        if "n_bar" in swept:
            parts.append(f"nbar{n_bar}")
        if "d_f" in swept:
            parts.append(f"df{d_f}")
        self.name = "_".join(parts)

    @property
    def posterior_kind(self) -> str:
        return f"{self.form}_potential" if self.family == "potential" else f"{self.form}_forward"


def expand_variants(cfg) -> list:
    emu, post = cfg["emulator"], cfg["posterior"]
    swept = {k for k in ("n_bar", "d_f") if len(emu[k]) > 1}
    return [
        Variant(family, form, n, nb, df, swept)
        for family in emu["family"]
        for form in post["form"]
        for n in emu["n_train"]
        for nb in emu["n_bar"]
        for df in emu["d_f"]
    ]


def _training_key(cfg, n_train, n_bar, d_f) -> str:
    emu = cfg["emulator"]
    blob = {
        "problem": cfg["problem"],
        "observation": cfg["observation"],
        "n_train": n_train, "n_bar": n_bar, "d_f": d_f,
        "d_g": emu["d_g"], "mesh_n": emu["mesh_n"], "seed": emu["design_seed"],
    }
    return hashlib.sha256(
        json.dumps(blob, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:20]


def cached_training(cfg, problem, obs, n_train, n_bar, d_f, cache_dir):
    """Build (or load) one training set; the cache file is named by the
    hash of everything that determines its content."""
    key = _training_key(cfg, n_train, n_bar, d_f)
    path = Path(cache_dir) / f"training-{key}.json"
    if path.exists():
        return TrainingSet.load(path), key
    emu = cfg["emulator"]
    ts = build_training(
        problem, obs, n_train=n_train, n_bar=n_bar, d_f=d_f,
        d_g=emu["d_g"] if n_bar > 0 else 0,
        mesh_n=emu["mesh_n"], seed=emu["design_seed"],
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}-{threading.get_ident()}")
    ts.save(tmp)
    os.replace(tmp, path)
    return ts, key


def condition_variant(cfg, variant, problem, obs, data, cache_dir):
    emu = cfg["emulator"]
    kc = emu["k_phi"] if variant.family == "potential" and emu["k_phi"] else emu["k_p"]
    k_p = _build_kernel(kc, problem.dim_theta)
    joint = variant.family == "pde_constrained"
    k_s = None
    if variant.family in ("spatially_correlated", "pde_constrained"):
        k_s = _build_kernel(emu["k_s"], problem.spatial_dim)
    model = EmulatorModel(variant.family, k_p, k_s, jitter=emu["jitter"])
    training, key = cached_training(
        cfg, problem, obs, variant.n_train,
        variant.n_bar if joint else 0, variant.d_f if joint else 0, cache_dir,
    )
    kwargs = {}
    if joint:
        kwargs = {"problem": problem, "obs": obs}
    elif variant.family == "spatially_correlated":
        kwargs = {"obs": obs}
    elif variant.family == "potential":
        kwargs = {"data": data}
    sidecar = str(Path(cache_dir) / f"gp-{key}-{variant.family}.npz")
    return condition(model, training, cache_path=sidecar, **kwargs), training


# ---------------------------------------------------------------------------
# studies


def _study_objects(cfg):
    problem = build_problem(cfg["problem"])
    obs = build_observation(cfg["observation"], problem.spatial_dim)
    if len(cfg["data"]["theta_dagger"]) != problem.dim_theta:
        raise ConfigError(
            f"data.theta_dagger: expected {problem.dim_theta} components, "
            f"got {len(cfg['data']['theta_dagger'])}"
        )
    data = make_data(problem, obs, cfg["data"]["theta_dagger"], cfg["data"]["noise_var"],
                     seed=cfg["data"]["seed"], mesh_n=cfg["data"]["mesh_n"])
    prior = SmoothedUniformPrior(problem.theta_box, cfg["posterior"]["lam"])
    return problem, obs, data, prior


def _parallel(fn, items):
    if len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(len(items), os.cpu_count() or 1)) as ex:
        return list(ex.map(fn, items))


def _with_context(exc, cfg, name):
    return type(exc)(f"[{cfg['experiment']['id']} / {name}] {exc}")


def run_grid_study(cfg, out_dir, cache_dir):
    """Per-variant posterior densities on a shared grid, compared to the
    exact (solver-based) posterior by Hellinger distance."""
    problem, obs, data, prior = _study_objects(cfg)
    axes = _grid_axes(problem, cfg["grid"])
    probes = _box_probes(problem, 32)
    truth = true_posterior_grid(problem, obs, data, prior, axes, mesh_n=cfg["grid"]["mesh_n"])
    truth_dir = Path(out_dir) / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    truth.to_csv(truth_dir / "density.csv")

    def one(variant):
        try:
            gp, _ = condition_variant(cfg, variant, problem, obs, data, cache_dir)
            ap = ApproxPosterior(variant.posterior_kind, data, prior, gp=gp)
            dens = density_grid(ap, axes)
            vdir = Path(out_dir) / variant.name
            vdir.mkdir(parents=True, exist_ok=True)
            dens.to_csv(vdir / "density.csv")
            return {
                "variant": variant,
                "hellinger": hellinger(dens, truth),
                "avg_variance": avg_emulator_variance(gp, probes),
            }
        except (NumericalError, ConfigError) as e:
            raise _with_context(e, cfg, variant.name) from e

    results = _parallel(one, expand_variants(cfg))
    rows = []
    table = []
    for res in results:
        v = res["variant"]
        rows.append((f"{v.name}.hellinger", res["hellinger"]))
        rows.append((f"{v.name}.avg_variance", res["avg_variance"]))
        table.append({
            "family": v.family, "form": v.form, "n_train": v.n_train,
            "n_bar": v.n_bar, "d_f": v.d_f,
            "hellinger": res["hellinger"], "avg_variance": res["avg_variance"],
        })
    _write_csv(
        Path(out_dir) / "hellinger.csv",
        ["family", "form", "n_train", "n_bar", "d_f", "hellinger", "avg_variance"],
        [[t[c] for c in ("family", "form", "n_train", "n_bar", "d_f", "hellinger", "avg_variance")]
         for t in table],
    )
    return rows


def _step_for(sam, variant):
    # the mean-based targets see the raw misfit / noise-variance landscape
    # and usually need a much smaller step than the tempered marginal ones;
    # a family_form key singles out one posterior when even that is too coarse
    table = sam["step_by_form"]
    return table.get(f"{variant.family}_{variant.form}",
                     table.get(variant.form, sam["step"]))


def run_mcmc_study(cfg, out_dir, cache_dir):
    """Per-variant MALA chains plus a ground-truth chain, with moment and
    distance-to-truth summaries."""
    problem, obs, data, prior = _study_objects(cfg)
    sam = cfg["sampler"]
    init = (0.5 * (problem.theta_lo + problem.theta_hi) if sam["init"] == "center"
            else np.asarray(sam["init"], dtype=float))
    theta_dagger = np.asarray(cfg["data"]["theta_dagger"], dtype=float)
    variants = expand_variants(cfg)

    def chain_for(variant, seed, step=None):
        gp, _ = condition_variant(cfg, variant, problem, obs, data, cache_dir)
        ap = ApproxPosterior(variant.posterior_kind, data, prior, gp=gp)
        mcfg = MalaConfig(step=step or _step_for(sam, variant), n_samples=sam["n_samples"],
                          init=init, burn_in=sam["burn_in"], seed=seed)
        return mala_run(ap, mcfg)

    def one(indexed):
        idx, variant = indexed
        try:
            chain = chain_for(variant, sam["seed"] + idx)
            vdir = Path(out_dir) / variant.name
            vdir.mkdir(parents=True, exist_ok=True)
            chain.save(vdir / "chain.csv")
            diag = diagnostics(chain)
            with open(vdir / "diagnostics.json", "w") as fh:
                json.dump(diag, fh, indent=2, sort_keys=True)
            return variant, chain, diag
        except (NumericalError, ConfigError) as e:
            raise _with_context(e, cfg, variant.name) from e

    results = _parallel(one, list(enumerate(variants)))
    rows = []
    for variant, chain, diag in results:
        mean = np.asarray(diag["mean"])
        rows.append((f"{variant.name}.acceptance_rate", chain.acceptance_rate))
        rows.append((f"{variant.name}.dist_to_theta_dagger",
                     float(np.linalg.norm(mean - theta_dagger))))
        for j, m in enumerate(mean):
            rows.append((f"{variant.name}.mean_{j}", float(m)))

    mode = cfg["ground_truth"]["mode"]
    if mode != "none":
        gt_step = (cfg["ground_truth"]["step"]
                   or sam["step_by_form"].get("mean", sam["step"]))
        if mode == "emulator":
            gt_variant = Variant("baseline", "mean", cfg["ground_truth"]["n_train"],
                                 0, 0, swept=set())
            chain = chain_for(gt_variant, sam["seed"] + len(variants), step=gt_step)
        else:
            ap = ApproxPosterior("true_via_solver", data, prior, problem=problem, obs=obs,
                                 mesh_n=cfg["emulator"]["mesh_n"])
            mcfg = MalaConfig(step=gt_step, n_samples=sam["n_samples"], init=init,
                              burn_in=sam["burn_in"], seed=sam["seed"] + len(variants))
            chain = mala_run(ap, mcfg)
        gt_dir = Path(out_dir) / "ground_truth"
        gt_dir.mkdir(parents=True, exist_ok=True)
        chain.save(gt_dir / "chain.csv")
        diag = diagnostics(chain)
        with open(gt_dir / "diagnostics.json", "w") as fh:
            json.dump(diag, fh, indent=2, sort_keys=True)
        rows.append(("ground_truth.dist_to_theta_dagger",
                     float(np.linalg.norm(np.asarray(diag["mean"]) - theta_dagger))))
    return rows


def run_sweep_study(cfg, out_dir, cache_dir):
    """Emulator accuracy against the reference solver across training
    budgets; no posterior is formed."""
    problem, obs, data, prior = _study_objects(cfg)
    probes = _box_probes(problem, 16)
    mesh_n = cfg["emulator"]["mesh_n"]

    def oracle(theta):
        return forward_map(problem, obs, theta, mesh_n=mesh_n)

    def one(variant):
        try:
            gp, _ = condition_variant(cfg, variant, problem, obs, data, cache_dir)
            # error at the data-generating parameter, which is never in the
            # Halton training design; probing the design points would only
            # measure the interpolation floor
            rmse = float(emulator_rmse(gp, data.theta_dagger, oracle))
            return variant, avg_emulator_variance(gp, probes), rmse
        except (NumericalError, ConfigError) as e:
            raise _with_context(e, cfg, variant.name) from e

    results = _parallel(one, expand_variants(cfg))
    rows = []
    table = []
    for variant, av, rmse in results:
        rows.append((f"{variant.name}.avg_variance", av))
        rows.append((f"{variant.name}.rmse", rmse))
        table.append([variant.family, variant.n_train, variant.n_bar, variant.d_f, av, rmse])
    _write_csv(Path(out_dir) / "sweep.csv",
               ["family", "n_train", "n_bar", "d_f", "avg_variance", "rmse"], table)
    return rows


_RUNNERS = {"grid": run_grid_study, "mcmc": run_mcmc_study, "sweep": run_sweep_study}


def run_study(cfg, defaults=None, overrides=None, out_dir=None, cache_dir=None):
    """Execute one resolved config end to end; returns the output directory."""
    out_dir = Path(out_dir or cfg["outputs"]["directory"]
                   or f"runs/{cfg['experiment']['id'].replace('/', '_')}")
    cache_dir = Path(cache_dir or cfg["outputs"]["cache_dir"] or out_dir / "cache")
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir.mkdir(parents=True, exist_ok=True)
    rows = _RUNNERS[cfg["experiment"]["kind"]](cfg, out_dir, cache_dir)
    _write_csv(Path(out_dir) / "metrics.csv", ["experiment", "metric", "value"],
               [[cfg["experiment"]["id"], name, value] for name, value in rows])
    provenance = {
        "experiment": cfg["experiment"]["id"],
        "config_hash": config_hash(cfg),
        "resolved_config": cfg,
        "defaults_applied": sorted(defaults or []),
        "overrides": {k: v for k, v in (overrides or {}).items() if v is not None},
        "versions": _versions(),
    }
    with open(out_dir / "provenance.json", "w") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
    return out_dir


def _versions():
    import scipy

    return {
        "gpinvert": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": sys.version.split()[0],
    }


# ---------------------------------------------------------------------------
# timings


def _avg_seconds(fn, reps):
    fn()  # warm caches before timing
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def measure_timings(cfg, out_dir=None, cache_dir=None, reps=100, chain_samples=256):
    """Per-call averages for the solver, the predictive mean, conditioning,
    and per-MALA-sample cost of every variant.  Returns the table rows."""
    out_dir = Path(out_dir or cfg["outputs"]["directory"]
                   or f"runs/{cfg['experiment']['id'].replace('/', '_')}")
    cache_dir = Path(cache_dir or cfg["outputs"]["cache_dir"] or out_dir / "cache")
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir.mkdir(parents=True, exist_ok=True)
    problem, obs, data, prior = _study_objects(cfg)
    theta_c = 0.5 * (problem.theta_lo + problem.theta_hi)
    mesh_n = cfg["emulator"]["mesh_n"]

    rows = [("solve_forward_map", "-", reps,
             _avg_seconds(lambda: forward_map(problem, obs, theta_c, mesh_n=mesh_n), reps))]
    for variant in expand_variants(cfg):
        gp, training = condition_variant(cfg, variant, problem, obs, data, cache_dir)
        kwargs = {}
        if variant.family == "pde_constrained":
            kwargs = {"problem": problem, "obs": obs}
        elif variant.family == "spatially_correlated":
            kwargs = {"obs": obs}
        elif variant.family == "potential":
            kwargs = {"data": data}
        model = gp.model
        rows.append(("condition", variant.name, reps,
                     _avg_seconds(lambda: condition(model, training, **kwargs), reps)))
        rows.append(("predict_mean", variant.name, reps,
                     _avg_seconds(lambda: gp.predict_mean(theta_c), reps)))
        ap = ApproxPosterior(variant.posterior_kind, data, prior, gp=gp)
        sam = cfg.get("sampler", {"step": 1e-3, "step_by_form": {}})
        chain = mala_run(ap, MalaConfig(step=_step_for(sam, variant),
                                        n_samples=chain_samples, init=theta_c,
                                        burn_in=0, seed=0))
        rows.append(("mala_per_sample", variant.name, chain_samples, chain.per_sample_seconds))
    _write_csv(Path(out_dir) / "timings.csv",
               ["quantity", "variant", "reps", "seconds_per_call"], rows)
    return rows


# ---------------------------------------------------------------------------
# report generation


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_csv_cell(c) for c in row])


def _csv_cell(c):
    if isinstance(c, float):
        return repr(c)
    if isinstance(c, (np.floating, np.integer)):
        return repr(c.item())
    return c


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _save_svg(fig, path):
    # strip timestamps and fix the hash salt so bytes are reproducible
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "gpinvert"
    fig.savefig(path, format="svg", metadata={"Date": None})


def _plot_lines(path, x, series, xlabel, ylabel, logy=False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, y in series:
        ax.plot(x, y, label=label, linewidth=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _plot_contour(path, axis1, axis2, values, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    ax.contour(axis1, axis2, values.T, levels=10, linewidths=0.9)
    ax.set_xlabel("theta1")
    ax.set_ylabel("theta2")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _density_columns(run_dir):
    """(variant name -> (axes, values)) for every density.csv under run_dir."""
    out = {}
    for vdir in sorted(Path(run_dir).iterdir()):
        f = vdir / "density.csv"
        if not vdir.is_dir() or not f.exists():
            continue
        header, rows = _read_csv(f)
        cols = np.array(rows, dtype=float).T
        out[vdir.name] = (cols[:-1], cols[-1])
    return out


def write_report(run_dir, svg=True):
    """Aggregate a finished run into per-figure CSVs (and SVG plots)."""
    run_dir = Path(run_dir)
    prov_path = run_dir / "provenance.json"
    if not prov_path.exists():
        raise ConfigError(f"{run_dir} has no provenance.json; run a config there first")
    with open(prov_path) as fh:
        prov = json.load(fh)
    study = prov["resolved_config"]["experiment"]["kind"]
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    made = []

    if study == "grid":
        made += _report_grid(run_dir, fig_dir, svg)
    elif study == "mcmc":
        made += _report_mcmc(run_dir, fig_dir, svg)
    elif study == "sweep":
        made += _report_sweep(run_dir, fig_dir, svg)
    return made


def _report_grid(run_dir, fig_dir, svg):
    made = []
    densities = _density_columns(run_dir)
    truth = densities.pop("truth", None)
    one_dim = truth is not None and truth[0].shape[0] == 1

    header, rows = _read_csv(run_dir / "hellinger.csv")
    idx = {name: header.index(name) for name in header}
    n_values = sorted({int(r[idx["n_train"]]) for r in rows})
    labels = sorted({f"{r[idx['family']]}_{r[idx['form']]}" for r in rows})
    for metric in ("hellinger", "avg_variance"):
        cols = {lab: [None] * len(n_values) for lab in labels}
        for r in rows:
            lab = f"{r[idx['family']]}_{r[idx['form']]}"
            cols[lab][n_values.index(int(r[idx["n_train"]]))] = float(r[idx[metric]])
        out = fig_dir / f"fig_{metric}.csv"
        _write_csv(out, ["n_train"] + labels,
                   [[n] + [cols[lab][i] for lab in labels] for i, n in enumerate(n_values)])
        made.append(out)
        if svg:
            out_svg = fig_dir / f"fig_{metric}.svg"
            _plot_lines(out_svg, n_values, [(lab, cols[lab]) for lab in labels],
                        "N", metric, logy=True)
            made.append(out_svg)

    if one_dim:
        for form in _FORMS:
            names = [n for n in densities if f"_{form}_N" in n]
            if not names:
                continue
            out = fig_dir / f"fig_densities_{form}.csv"
            axis = truth[0][0]
            cols = [("truth", truth[1])] + [(n, densities[n][1]) for n in sorted(names)]
            _write_csv(out, ["theta"] + [c[0] for c in cols],
                       [[axis[i]] + [c[1][i] for c in cols] for i in range(axis.size)])
            made.append(out)
            if svg:
                out_svg = fig_dir / f"fig_densities_{form}.svg"
                _plot_lines(out_svg, axis, cols, "theta", "density")
                made.append(out_svg)
    elif truth is not None and svg:
        for name, (axes_cols, vals) in [("truth", truth)] + sorted(densities.items()):
            a1 = np.unique(axes_cols[0])
            a2 = np.unique(axes_cols[1])
            out_svg = fig_dir / f"fig_contour_{name}.svg"
            _plot_contour(out_svg, a1, a2, vals.reshape(a1.size, a2.size), name)
            made.append(out_svg)
    return made


def _report_mcmc(run_dir, fig_dir, svg):
    made = []
    chains = {}
    for vdir in sorted(Path(run_dir).iterdir()):
        f = vdir / "chain.csv"
        if vdir.is_dir() and f.exists():
            chains[vdir.name] = Chain.load(f)
    if not chains:
        raise ConfigError(f"{run_dir} contains no chain files")
    d = next(iter(chains.values())).samples.shape[1]
    for j in range(d):
        lo = min(float(c.samples[:, j].min()) for c in chains.values())
        hi = max(float(c.samples[:, j].max()) for c in chains.values())
        cols = {}
        for name, chain in sorted(chains.items()):
            edges, dens = marginal_hist(chain, j, bins=60, extent=(lo, hi))
            cols[name] = dens
        centers = 0.5 * (edges[:-1] + edges[1:])
        out = fig_dir / f"fig_marginals_theta{j}.csv"
        _write_csv(out, ["theta"] + list(cols),
                   [[centers[i]] + [cols[n][i] for n in cols] for i in range(centers.size)])
        made.append(out)
        if svg:
            out_svg = fig_dir / f"fig_marginals_theta{j}.svg"
            _plot_lines(out_svg, centers, list(cols.items()), f"theta{j}", "density")
            made.append(out_svg)
    return made


def _report_sweep(run_dir, fig_dir, svg):
    made = []
    header, rows = _read_csv(run_dir / "sweep.csv")
    idx = {name: header.index(name) for name in header}
    # use whichever budget axis actually varies
    for axis in ("d_f", "n_bar", "n_train"):
        if len({r[idx[axis]] for r in rows}) > 1:
            break
    x = [int(r[idx[axis]]) for r in rows]
    order = np.argsort(x)
    x = [x[i] for i in order]
    for metric in ("rmse", "avg_variance"):
        y = [float(rows[i][idx[metric]]) for i in order]
        out = fig_dir / f"fig_sweep_{metric}.csv"
        _write_csv(out, [axis, metric], [[a, b] for a, b in zip(x, y)])
        made.append(out)
        if svg:
            out_svg = fig_dir / f"fig_sweep_{metric}.svg"
            _plot_lines(out_svg, x, [(metric, y)], axis, metric, logy=True)
            made.append(out_svg)
    return made


# ---------------------------------------------------------------------------
# entry point


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None, help="override data and sampler seeds")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--cache-dir", default=None, help="training-set cache directory")
    sub.add_argument("--mesh-n", type=int, default=None, help="override the emulator mesh")
    sub.add_argument("--samples", type=int, default=None, help="override the sampler length")
    sub.add_argument("--no-svg", action="store_true", help="skip SVG output")


def _overrides_from(args):
    overrides = {
        "data.seed": args.seed,
        "sampler.seed": args.seed,
        "emulator.mesh_n": args.mesh_n,
        "sampler.n_samples": args.samples,
        "outputs.directory": args.out,
        "outputs.cache_dir": args.cache_dir or os.environ.get(CACHE_ENV),
    }
    if args.no_svg:
        overrides["outputs.svg"] = False
    return {k: v for k, v in overrides.items() if v is not None}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gpinvert",
        description="Run emulator-based inversion studies described by TOML configs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a study config")
    p_run.add_argument("config")
    _add_common(p_run)
    p_tim = sub.add_parser("timings", help="measure per-call costs for a config")
    p_tim.add_argument("config")
    _add_common(p_tim)
    p_rep = sub.add_parser("report", help="emit figure data from a finished run")
    p_rep.add_argument("directory")
    p_rep.add_argument("--no-svg", action="store_true", help="skip SVG output")
    args = parser.parse_args(argv)

    try:
        if args.command == "report":
            made = write_report(args.directory, svg=not args.no_svg)
            for path in made:
                print(path)
            return 0
        overrides = _overrides_from(args)
        cfg, defaults = load_config(args.config, overrides)
        if args.command == "run":
            out = run_study(cfg, defaults, overrides)
            print(f"wrote {out}")
            if cfg["outputs"]["svg"]:
                for path in write_report(out, svg=True):
                    print(path)
            return 0
        rows = measure_timings(cfg)
        for quantity, variant, reps, sec in rows:
            print(f"{quantity:18s} {variant:40s} {sec * 1e6:12.1f} us  ({reps} reps)")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
