"""Declarative run configuration.

A run is described by one YAML file with the sections below; every section
except ``model`` is optional for verbs that do not need it::

    model:     {bc: dirichlet_neumann, eta0: 0.3333, tau: 0.1, horizon: 20}
    input:     {kind: windowed_abs_cos, t_end: 2.0}
    truth:     {family: uniform, rho: [2, 4]}
    data:      {n_samples: 100, n_fine: 128, seed: 0, sampler: iid, noise_std: 0}
    estimate:  {family: uniform, level: [32, 32], levels: [[8, 8], [16, 16]],
                init: [1, 6], bounds: {lower: [...], upper: [...]},
                options: {max_iter: 500, gtol: 1.0e-6}, warm_start: true}
    bands:     {coverage: 0.75, n_samples: 1000, seed: 1, level: [32, 32], rho: [...]}
    gradcheck: {level: [8, 8], rho: [[...], ...], n_random: 10, seed: 0, rel_step: 1.0e-3}

Errors raise :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .assembly import DiscretizationLevel
from .density import DensityError, Family, TruncatedDensity
from .estimator import Constraints, EstimateOptions
from .experiments import ExperimentConfig
from .fem1d import BoundaryCondition, ModelSpec

SECTIONS = ("model", "input", "truth", "data", "estimate", "bands", "gradcheck")


class ConfigError(ValueError):
    """Malformed configuration; the message names the field."""


def _get(section: dict, name: str, key: str, kind, default=None, required=False):
    where = f"{name}.{key}"
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"missing required field '{where}'")
        return default
    value = section[key]
    try:
        if kind is float:
            return float(value)
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind is bool:
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind is list:
            return np.asarray(value, dtype=float)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{where}': invalid value {value!r}") from exc


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    return sec


def _level(value, where: str) -> DiscretizationLevel:
    try:
        return DiscretizationLevel.coerce(value)
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field '{where}': {exc}") from exc


def _family(sec: dict, name: str, required=True) -> Family | None:
    value = sec.get("family")
    if value is None:
        if required:
            raise ConfigError(f"missing required field '{name}.family'")
        return None
    try:
        return Family(value)
    except ValueError as exc:
        choices = ", ".join(f.value for f in Family)
        raise ConfigError(f"field '{name}.family': unknown family {value!r} (choose {choices})") from exc


@dataclass
class RunConfig:
    """Parsed configuration plus the raw mapping it came from."""

    raw: dict
    spec: ModelSpec
    input_t_end: float = 2.0
    truth: TruncatedDensity | None = None
    data: dict = field(default_factory=dict)
    estimate: dict = field(default_factory=dict)
    bands: dict = field(default_factory=dict)
    gradcheck: dict = field(default_factory=dict)
    source: str | None = None

    @property
    def digest(self) -> str:
        return config_hash(self.raw)

    def require_truth(self) -> TruncatedDensity:
        if self.truth is None:
            raise ConfigError("missing required section 'truth'")
        return self.truth

    def experiment(self, seed: int | None = None) -> ExperimentConfig:
        d = self.data
        return ExperimentConfig(
            spec=self.spec, truth=self.require_truth(), n_samples=d["n_samples"],
            n_fine=d["n_fine"], seed=d["seed"] if seed is None else seed, sampler=d["sampler"],
            noise_std=d["noise_std"], noise_seed=d["noise_seed"], input_t_end=self.input_t_end,
            family=self.estimate.get("family"), levels=self.estimate.get("levels", []),
            init=self.estimate.get("init"), constraints=self.estimate.get("constraints"),
            options=self.estimate.get("options", EstimateOptions()),
            warm_start=self.estimate.get("warm_start", True),
            band_samples=self.bands.get("n_samples", 1000),
            band_coverage=self.bands.get("coverage", 0.75), band_seed=self.bands.get("seed", 1))


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form; stable under key reordering."""
    return hashlib.sha256(json.dumps(raw, sort_keys=True, default=str).encode()).hexdigest()


def _parse_model(raw) -> ModelSpec:
    sec = _section(raw, "model")
    bc_value = sec.get("bc", BoundaryCondition.DIRICHLET_NEUMANN.value)
    try:
        bc = BoundaryCondition(bc_value)
    except ValueError as exc:
        raise ConfigError(f"field 'model.bc': unknown boundary condition {bc_value!r}") from exc
    default_eta0 = 1.0 / 3.0 if bc is BoundaryCondition.DIRICHLET_NEUMANN else 0.0
    try:
        return ModelSpec(bc=bc, eta0=_get(sec, "model", "eta0", float, default_eta0),
                         tau=_get(sec, "model", "tau", float, 0.1),
                         horizon=_get(sec, "model", "horizon", float, 20.0))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"section 'model': {exc}") from exc


def _parse_density(sec: dict, name: str, required=True) -> TruncatedDensity | None:
    fam = _family(sec, name, required)
    if fam is None:
        return None
    rho = _get(sec, name, "rho", list, required=True)
    try:
        return TruncatedDensity.from_rho(fam, rho)
    except DensityError as exc:
        raise ConfigError(f"field '{name}.rho': {exc}") from exc


def _parse_estimate(sec: dict, spec: ModelSpec) -> dict:
    if not sec:
        return {}
    fam = _family(sec, "estimate")
    if fam.dim != spec.n_random:
        raise ConfigError(f"field 'estimate.family': {fam.value} has {fam.dim} random parameter(s) "
                          f"but model.bc={spec.bc.value} needs {spec.n_random}")
    out = {"family": fam}
    if "level" in sec:
        out["level"] = _level(sec["level"], "estimate.level")
    if "levels" in sec:
        if not isinstance(sec["levels"], list) or not sec["levels"]:
            raise ConfigError("field 'estimate.levels': need a non-empty list of levels")
        out["levels"] = [_level(v, f"estimate.levels[{i}]") for i, v in enumerate(sec["levels"])]
    if "level" in out:
        _check_level_family(out["level"], fam, "estimate.level")
    for i, lv in enumerate(out.get("levels", [])):
        _check_level_family(lv, fam, f"estimate.levels[{i}]")
    init = _get(sec, "estimate", "init", list)
    if init is not None and init.shape != (fam.n_params,):
        raise ConfigError(f"field 'estimate.init': {fam.value} needs {fam.n_params} entries "
                          f"({', '.join(fam.param_names)})")
    out["init"] = init
    bounds = sec.get("bounds") or {}
    if not isinstance(bounds, dict):
        raise ConfigError("field 'estimate.bounds' must be a mapping with lower/upper")
    try:
        overrides = {k: bounds[k] for k in ("lower", "upper") if k in bounds}
        out["constraints"] = Constraints.default(fam, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'estimate.bounds': {exc}") from exc
    opts = sec.get("options") or {}
    if not isinstance(opts, dict):
        raise ConfigError("field 'estimate.options' must be a mapping")
    try:
        out["options"] = EstimateOptions.from_dict(opts)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field 'estimate.options': {exc}") from exc
    out["warm_start"] = _get(sec, "estimate", "warm_start", bool, True)
    return out


def _check_level_family(level: DiscretizationLevel, fam: Family, where: str):
    if len(level.cells) != fam.dim:
        raise ConfigError(f"field '{where}': level has {len(level.cells)} parameter "
                          f"partition(s) but {fam.value} needs {fam.dim}")


def parse(raw: dict, source: str | None = None) -> RunConfig:
    """Validate a raw mapping into a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    raw = copy.deepcopy(raw)
    spec = _parse_model(raw)

    inp = _section(raw, "input")
    kind = inp.get("kind", "windowed_abs_cos")
    if kind != "windowed_abs_cos":
        raise ConfigError(f"field 'input.kind': unsupported input {kind!r}")
    t_end = _get(inp, "input", "t_end", float, 2.0)

    truth_sec = _section(raw, "truth")
    truth = _parse_density(truth_sec, "truth") if truth_sec else None
    if truth is not None and truth.dim != spec.n_random:
        raise ConfigError(f"field 'truth.family': {truth.family.value} does not match "
                          f"model.bc={spec.bc.value}")

    d = _section(raw, "data")
    sampler = d.get("sampler", "iid")
    if sampler not in ("iid", "stratified"):
        raise ConfigError(f"field 'data.sampler': unknown sampler {sampler!r} (iid or stratified)")
    data = {
        "n_samples": _get(d, "data", "n_samples", int, 100),
        "n_fine": _get(d, "data", "n_fine", int, 128),
        "seed": _get(d, "data", "seed", int, 0),
        "sampler": sampler,
        "noise_std": _get(d, "data", "noise_std", float, 0.0),
        "noise_seed": _get(d, "data", "noise_seed", int),
    }
    if data["n_samples"] < 1 or data["n_fine"] < 1:
        raise ConfigError("fields 'data.n_samples' and 'data.n_fine' must be positive")
    if data["noise_std"] < 0:
        raise ConfigError("field 'data.noise_std' must be nonnegative")

    estimate = _parse_estimate(_section(raw, "estimate"), spec)

    b = _section(raw, "bands")
    bands = {}
    if b:
        bands = {
            "coverage": _get(b, "bands", "coverage", float, 0.75),
            "n_samples": _get(b, "bands", "n_samples", int, 1000),
            "seed": _get(b, "bands", "seed", int, 1),
            "level": _level(b["level"], "bands.level") if "level" in b else None,
            "rho": _get(b, "bands", "rho", list),
        }
        if not 0.0 < bands["coverage"] < 1.0:
            raise ConfigError("field 'bands.coverage' must lie in (0, 1)")

    g = _section(raw, "gradcheck")
    gradcheck = {}
    if g:
        gradcheck = {
            "level": _level(g.get("level", [8, 8]), "gradcheck.level"),
            "rho": None if g.get("rho") is None else [np.asarray(r, dtype=float) for r in g["rho"]],
            "n_random": _get(g, "gradcheck", "n_random", int, 10),
            "seed": _get(g, "gradcheck", "seed", int, 0),
            "rel_step": _get(g, "gradcheck", "rel_step", float, 1e-3),
        }
    return RunConfig(raw=raw, spec=spec, input_t_end=t_end, truth=truth, data=data,
                     estimate=estimate, bands=bands, gradcheck=gradcheck, source=source)


def load(path) -> RunConfig:
    """Read and validate a YAML config file.

    YAML syntax errors are reported with their line and column.
    """
    path = Path(path)
    text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: YAML syntax error at {where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML error: {exc}") from exc
    return parse(raw or {}, source=str(path))
