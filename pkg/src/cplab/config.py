"""Experiment configuration: parsing, validation, defaults, model building.

Configs are JSON with four sections (model, dynamics, analysis, output)
plus a master seed.  Parsing is strict: duplicate keys, unknown fields
and out-of-range parameters are rejected with the dotted path of the
offending key.  ``resolved()`` materializes every default so the
manifest echo is complete and re-runnable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .spaces import (
    ABSORBING,
    PERIODIC,
    build_conductance_kernel,
    build_continuum_kernel,
    build_lattice_kernel,
    build_percolation_kernel,
    build_tree_kernel,
    scale_kernel,
)

_MODEL_FIELDS = {
    "ring": {"kind", "d", "side", "boundary_mode", "perturbation",
             "jump_rate", "jump_bound", "scale"},
    "lattice": {"kind", "d", "side", "boundary_mode", "perturbation",
                "jump_rate", "jump_bound", "scale"},
    "tree": {"kind", "k", "depth", "boundary_mode", "scale"},
    "conductance": {"kind", "d", "side", "c", "scale"},
    "percolation": {"kind", "d", "side", "p", "min_p",
                    "min_cluster_fraction", "scale"},
    "continuum": {"kind", "d", "L", "dispersal", "scale"},
}
_DISPERSAL_FIELDS = {
    "uniform": {"kind", "radius"},
    "gaussian": {"kind", "sigma"},
    "power_law": {"kind", "alpha"},
    "nn_lattice": {"kind", "step"},
}
_DYNAMICS_DEFAULTS = {
    "rho": 1.0, "horizon": 10.0, "replicas": 100, "series_times": None,
    "snapshot_times": [], "event_cap": 10 ** 8, "init_mask": None,
}
_ANALYSIS_DEFAULTS = {
    "transience": {"pairs": "auto", "horizons": [5.0, 10.0, 20.0, 40.0],
                   "replicas": 4000},
    "heatkernel": {"x": "auto", "times": [2.0, 3.0, 4.5, 6.5, 9.5, 14.0,
                                          20.0, 30.0],
                   "replicas": 200000, "statistic": "return"},
    "hierarchy": {"T": 10.0, "dt": None, "tol": 1e-8, "stationary": False,
                  "stationary_T_max": 512.0, "stationary_tol": 1e-4},
    "validate": {"positivity_trials": 10, "t_grid": [0.5, 1.0, 2.0],
                 "duality_replicas": 10000, "criticality_tol": 1e-9},
}
_OUTPUT_DEFAULTS = {"dir": "out", "figures": True, "snapshots_jsonl": False}


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}")
        seen[key] = value
    return seen


def _check_fields(section: dict, allowed, path: str):
    for key in section:
        if key not in allowed:
            raise ConfigError("unknown field", path=f"{path}.{key}")


def _require(section: dict, key: str, types, path: str, default=None):
    if key not in section:
        if default is not None:
            return default
        raise ConfigError("missing required field", path=f"{path}.{key}")
    value = section[key]
    if not isinstance(value, types):
        raise ConfigError(f"expected {types}, got {type(value).__name__}",
                          path=f"{path}.{key}")
    return value


@dataclass
class ExperimentConfig:
    model: dict
    dynamics: dict
    analysis: dict
    output: dict
    seed: int
    raw: dict = field(default_factory=dict, repr=False)

    def resolved(self) -> dict:
        """Config dict with every defaulted field written out."""
        return {"model": self.model, "dynamics": self.dynamics,
                "analysis": self.analysis, "output": self.output,
                "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment config."""
    try:
        data = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in data and "model" not in data:
        data = data["config"]  # accept a manifest echo as a config
        if not isinstance(data, dict):
            raise ConfigError("manifest echo carries no config object")
    _check_fields(data, {"model", "dynamics", "analysis", "output", "seed"},
                  "config")

    model = _validate_model(data.get("model"))
    dynamics = _validate_dynamics(data.get("dynamics", {}))
    analysis = _validate_analysis(data.get("analysis", {}))
    output = _validate_output(data.get("output", {}))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer", path="config.seed")
    if dynamics["series_times"] is None:
        T = dynamics["horizon"]
        dynamics["series_times"] = [0.0, T / 4.0, T / 2.0, 3.0 * T / 4.0, T]
    return ExperimentConfig(model=model, dynamics=dynamics, analysis=analysis,
                            output=output, seed=seed, raw=data)


def _validate_model(model) -> dict:
    if model is None:
        raise ConfigError("missing model section", path="config.model")
    if not isinstance(model, dict):
        raise ConfigError("model must be an object", path="config.model")
    kind = model.get("kind")
    if kind not in _MODEL_FIELDS:
        raise ConfigError(f"unknown model kind {kind!r} (choose from "
                          f"{sorted(_MODEL_FIELDS)})", path="config.model.kind")
    _check_fields(model, _MODEL_FIELDS[kind], "config.model")
    out = dict(model)
    out.setdefault("scale", 1.0)
    if not isinstance(out["scale"], (int, float)) or out["scale"] <= 0:
        raise ConfigError("scale must be positive", path="config.model.scale")
    path = "config.model"
    if kind in ("ring", "lattice"):
        d = 1 if kind == "ring" else _require(model, "d", int, path)
        if kind == "ring" and model.get("d", 1) != 1:
            raise ConfigError("a ring is one-dimensional", path=f"{path}.d")
        side = _require(model, "side", int, path)
        if side < 2:
            raise ConfigError("side must be >= 2", path=f"{path}.side")
        out["d"] = d
        out.setdefault("boundary_mode", PERIODIC)
        out.setdefault("perturbation", [])
        out.setdefault("jump_rate", 0.0)
        out.setdefault("jump_bound", None)
        if out["boundary_mode"] not in (PERIODIC, ABSORBING):
            raise ConfigError("boundary_mode must be periodic or absorbing",
                              path=f"{path}.boundary_mode")
    elif kind == "tree":
        k = _require(model, "k", int, path)
        if k < 3:
            raise ConfigError("vertex degree k must be >= 3", path=f"{path}.k")
        _require(model, "depth", int, path)
        out.setdefault("boundary_mode", ABSORBING)
        if out["boundary_mode"] not in (PERIODIC, ABSORBING):
            raise ConfigError("boundary_mode must be periodic or absorbing",
                              path=f"{path}.boundary_mode")
    elif kind == "conductance":
        _require(model, "d", int, path)
        _require(model, "side", int, path)
        c = _require(model, "c", (int, float), path)
        if c < 1:
            raise ConfigError("c must be >= 1", path=f"{path}.c")
    elif kind == "percolation":
        d = _require(model, "d", int, path)
        if d < 2:
            raise ConfigError("percolation needs d >= 2 (and promises "
                              "transience only for d >= 3)", path=f"{path}.d")
        _require(model, "side", int, path)
        p = _require(model, "p", (int, float), path)
        if not 0 <= p <= 1:
            raise ConfigError("p must be a probability", path=f"{path}.p")
        out.setdefault("min_p", 0.5)
        out.setdefault("min_cluster_fraction", 0.5)
    elif kind == "continuum":
        d = _require(model, "d", int, path)
        _require(model, "L", (int, float), path)
        disp = _require(model, "dispersal", dict, path)
        dkind = disp.get("kind")
        if dkind not in _DISPERSAL_FIELDS:
            raise ConfigError(f"unknown dispersal kind {dkind!r}",
                              path=f"{path}.dispersal.kind")
        _check_fields(disp, _DISPERSAL_FIELDS[dkind], f"{path}.dispersal")
        if dkind == "power_law":
            alpha = disp.get("alpha")
            hi = {1: 1.0, 2: 2.0}.get(d)
            if hi is None:
                raise ConfigError("power-law dispersal only in d = 1, 2",
                                  path=f"{path}.dispersal")
            if not isinstance(alpha, (int, float)) or not 0 < alpha < hi:
                raise ConfigError(
                    f"power-law exponent must lie in (0, {hi}) for d={d}",
                    path=f"{path}.dispersal.alpha")
    return out


def _validate_dynamics(section) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("dynamics must be an object", path="config.dynamics")
    _check_fields(section, set(_DYNAMICS_DEFAULTS), "config.dynamics")
    out = dict(_DYNAMICS_DEFAULTS)
    out.update(section)
    path = "config.dynamics"
    if not isinstance(out["rho"], (int, float)) or out["rho"] <= 0:
        raise ConfigError("rho must be positive", path=f"{path}.rho")
    if not isinstance(out["horizon"], (int, float)) or out["horizon"] < 0:
        raise ConfigError("horizon must be nonnegative", path=f"{path}.horizon")
    if not isinstance(out["replicas"], int) or out["replicas"] < 1:
        raise ConfigError("replicas must be a positive integer",
                          path=f"{path}.replicas")
    if out["init_mask"] not in (None, "interior"):
        raise ConfigError("init_mask must be null or 'interior'",
                          path=f"{path}.init_mask")
    for key in ("series_times", "snapshot_times"):
        if out[key] is not None and not isinstance(out[key], list):
            raise ConfigError("must be a list of times", path=f"{path}.{key}")
    return out


def _validate_analysis(section) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("analysis must be an object", path="config.analysis")
    _check_fields(section, set(_ANALYSIS_DEFAULTS), "config.analysis")
    out = {}
    for name, defaults in _ANALYSIS_DEFAULTS.items():
        sub = section.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError("must be an object", path=f"config.analysis.{name}")
        _check_fields(sub, set(defaults), f"config.analysis.{name}")
        merged = dict(defaults)
        merged.update(sub)
        out[name] = merged
    if len(out["transience"]["horizons"]) < 4:
        raise ConfigError("need at least 4 horizons",
                          path="config.analysis.transience.horizons")
    if out["heatkernel"]["statistic"] not in ("return", "sup"):
        raise ConfigError("statistic must be 'return' or 'sup'",
                          path="config.analysis.heatkernel.statistic")
    return out


def _validate_output(section) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("output must be an object", path="config.output")
    _check_fields(section, set(_OUTPUT_DEFAULTS), "config.output")
    out = dict(_OUTPUT_DEFAULTS)
    out.update(section)
    return out


# ---------------------------------------------------------------------------
# model construction


def build_model(config: ExperimentConfig):
    """Build (space, environment) from the model section."""
    model = config.model
    kind = model["kind"]
    env = None
    if kind in ("ring", "lattice"):
        pert = {(tuple(u), tuple(x)): v for u, x, v in model["perturbation"]}
        space = build_lattice_kernel(
            model["d"], model["side"], perturbation=pert or None,
            boundary_mode=model["boundary_mode"],
            jump_rate=model["jump_rate"], jump_bound=model["jump_bound"])
    elif kind == "tree":
        space = build_tree_kernel(model["k"], model["depth"],
                                  boundary_mode=model["boundary_mode"])
    elif kind == "conductance":
        space, env = build_conductance_kernel(model["d"], model["side"],
                                              model["c"], config.seed)
    elif kind == "percolation":
        space, env = build_percolation_kernel(
            model["d"], model["side"], model["p"], config.seed,
            min_p=model["min_p"],
            min_cluster_fraction=model["min_cluster_fraction"])
    elif kind == "continuum":
        space = build_continuum_kernel(model["d"], model["L"],
                                       model["dispersal"])
    else:  # pragma: no cover - kinds validated at parse time
        raise ConfigError(f"unhandled model kind {kind}")
    if model["scale"] != 1.0:
        if kind == "continuum":
            raise ConfigError("continuum dispersal is always normalized; "
                              "scale is not supported",
                              path="config.model.scale")
        space = scale_kernel(space, model["scale"])
    return space, env


# ---------------------------------------------------------------------------
# built-in model registry (validation suites & acceptance)


def builtin_models():
    """Catalogue of desk-scale models.

    ``critical`` marks kernels whose rows sum to one at every site (so
    constants are exactly harmonic and the mean density is conserved).
    """
    registry = {
        "ring-16": dict(build=lambda: build_lattice_kernel(1, 16),
                        critical=True),
        "torus2d-6": dict(build=lambda: build_lattice_kernel(2, 6),
                          critical=True),
        "torus3d-4": dict(build=lambda: build_lattice_kernel(3, 4),
                          critical=True),
        "lattice2d-8-absorbing": dict(
            build=lambda: build_lattice_kernel(2, 8, boundary_mode=ABSORBING),
            critical=False),
        "perturbed2d-8": dict(
            build=lambda: build_lattice_kernel(
                2, 8, perturbation={((1, 0), (0, 0)): -0.1,
                                    ((0, 1), (0, 0)): 0.1}),
            critical=True),
        "tree3-4-periodic": dict(
            build=lambda: build_tree_kernel(3, 4, boundary_mode=PERIODIC),
            critical=True),
        "tree3-4-absorbing": dict(
            build=lambda: build_tree_kernel(3, 4),
            critical=False),
        "conductance3d-4": dict(
            build=lambda: build_conductance_kernel(3, 4, 4.0, seed=7)[0],
            critical=True),
        "percolation3d-6": dict(
            build=lambda: build_percolation_kernel(3, 6, 0.7, seed=3)[0],
            critical=True),
    }
    return registry
