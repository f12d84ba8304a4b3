"""Simulated-data studies: data generation, level sweeps and credible bands."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import DiscretizationLevel, assemble
from .dataset import Dataset
from .density import Family, TruncatedDensity
from .estimator import Constraints, EstimateOptions, EstimateResult, minimize
from .fem1d import ModelSpec
from .sampled import cell_outputs, discretize, propagate, simulate_points

log = logging.getLogger(__name__)


def windowed_abs_cos(spec: ModelSpec, t_end: float = 2.0) -> np.ndarray:
    """Zero-order-hold samples of ``|cos t|`` on ``[0, t_end]`` and 0 after."""
    t = spec.times[:-1]
    return np.where(t <= t_end + 1e-9 * spec.tau, np.abs(np.cos(t)), 0.0)


@dataclass
class ExperimentConfig:
    spec: ModelSpec
    truth: TruncatedDensity
    n_samples: int = 100
    n_fine: int = 128
    seed: int = 0
    sampler: str = "iid"
    noise_std: float = 0.0
    noise_seed: int | None = None
    input_t_end: float = 2.0
    family: Family | None = None
    levels: list = field(default_factory=list)
    init: np.ndarray | None = None
    constraints: Constraints | None = None
    options: EstimateOptions = field(default_factory=EstimateOptions)
    warm_start: bool = True
    band_samples: int = 1000
    band_coverage: float = 0.75
    band_seed: int = 1

    def __post_init__(self):
        self.family = Family(self.family or self.truth.family)
        self.levels = [DiscretizationLevel.coerce(lv) for lv in self.levels]
        if not 0.0 < self.band_coverage < 1.0:
            raise ValueError("band coverage must lie in (0, 1)")
        if self.sampler not in ("iid", "stratified"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.n_samples < 1:
            raise ValueError("need at least one data-generation sample")

    def inputs(self) -> np.ndarray:
        return windowed_abs_cos(self.spec, self.input_t_end)


def generate_data(config: ExperimentConfig) -> Dataset:
    """Average of deterministic fine-grid outputs over sampled parameters.

    Parameters are drawn i.i.d. or by stratified sampling (``config.sampler``);
    optional i.i.d. Gaussian measurement noise is added afterwards.
    """
    u = config.inputs()
    q = config.truth.sample(config.n_samples, config.seed, method=config.sampler)
    qq = q.reshape(len(q), -1)
    if np.any(qq[:, 0] <= 0):
        raise ValueError("sampled diffusivity is not positive; tighten the truth support")
    ys = simulate_points(config.spec, config.n_fine, q, u)
    y = ys.mean(axis=0)
    if config.noise_std > 0:
        seed = config.seed + 1 if config.noise_seed is None else config.noise_seed
        y = y + config.noise_std * np.random.default_rng(seed).standard_normal(y.size)
    meta = {
        "truth_family": config.truth.family.value,
        "truth_rho": config.truth.rho.tolist(),
        "n_samples": config.n_samples,
        "n_fine": config.n_fine,
        "seed": config.seed,
        "sampler": config.sampler,
        "noise_std": config.noise_std,
        "sample_std": ys.std(axis=0, ddof=1).tolist(),
        "bc": config.spec.bc.value,
        "eta0": config.spec.eta0,
    }
    return Dataset(u, y, config.spec.tau, meta)


@dataclass
class SweepResult:
    family: Family
    results: list
    truth: dict | None = None

    def rows(self) -> list[dict]:
        names = self.family.param_names
        out = []
        for level, res in self.results:
            row = {"n": level.n, **{f"m{i + 1}": c for i, c in enumerate(level.cells)}}
            if isinstance(res, EstimateResult):
                row.update(dict(zip(names, res.rho.tolist())))
                row.update(J=res.objective, iterations=res.iterations, status=res.reason)
            else:
                row.update(status=f"failed: {res}")
            out.append(row)
        if self.truth:
            out.append({"n": "true", **self.truth})
        return out

    def estimates(self) -> np.ndarray:
        return np.array([r.rho for _, r in self.results if isinstance(r, EstimateResult)])


def convergence_sweep(config: ExperimentConfig, dataset: Dataset | None = None) -> SweepResult:
    """Estimate at every configured level against one dataset.

    With ``warm_start`` each level starts from the previous level's estimate.
    A level that raises is recorded and the sweep continues.
    """
    if not config.levels:
        raise ValueError("no levels to sweep")
    dataset = generate_data(config) if dataset is None else dataset
    init = config.init
    results = []
    for level in config.levels:
        try:
            res = minimize(config.spec, level, config.family, [dataset], init=init,
                           options=config.options, constraints=config.constraints)
        except Exception as exc:  # a failed level is a result, not a crash
            log.warning("level %s failed: %s", level.label, exc)
            results.append((level, exc))
            continue
        results.append((level, res))
        if config.warm_start:
            init = res.rho
    truth = None
    if config.family == config.truth.family:
        truth = dict(zip(config.family.param_names, config.truth.rho.tolist()))
    return SweepResult(config.family, results, truth)


@dataclass
class Band:
    times: np.ndarray
    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray
    coverage: float
    samples: np.ndarray = field(repr=False, default=None)
    sample_outputs: np.ndarray = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)


def credible_band(spec: ModelSpec, level, density: TruncatedDensity, inputs,
                  coverage: float = 0.75, n_samples: int = 1000, seed=None) -> Band:
    """Pointwise-in-time quantile band of the population state evaluated at sampled ``q``.

    Each sample is mapped to the parameter cell containing it and takes that
    cell's block trajectory. The state is only defined almost everywhere in
    ``q``, so the band is a heuristic.
    """
    if not 0.0 <= coverage < 1.0:
        raise ValueError("coverage must lie in [0, 1)")
    level = DiscretizationLevel.coerce(level)
    sampled = discretize(assemble(spec, level, density))
    X = propagate(sampled, inputs)
    yc = cell_outputs(sampled, X)
    q = density.sample(n_samples, seed)
    cells = density.cell_index(q, level.cells)
    ys = yc[:, cells].T
    lo_q, hi_q = 0.5 * (1.0 - coverage), 0.5 * (1.0 + coverage)
    lower, upper = np.quantile(ys, [lo_q, hi_q], axis=0)
    return Band(spec.times, lower, yc @ sampled.out_weight, upper, coverage, q, ys,
                meta={"heuristic": True, "level": level.as_tuple(), "n_samples": n_samples,
                      "method": "cell lookup, per-time marginal quantiles"})


def band_coverage_fraction(band: Band, outputs: np.ndarray) -> float:
    """Fraction of ``(sample, time)`` pairs of ``outputs`` inside the band."""
    inside = (outputs >= band.lower) & (outputs <= band.upper)
    return float(inside.mean())
