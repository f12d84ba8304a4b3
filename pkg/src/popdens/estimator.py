"""Least-squares estimation of the density parameters.

``J(rho) = sum_datasets sum_k (y_k(rho) - ytilde_k)^2`` is minimized over a
box with ordering constraints (``a < b``, ``c < d``) by projected gradient
descent. Each iteration tries a Barzilai-Borwein step, projects it onto the
feasible set and backtracks until the Armijo condition holds at the projected
point, so the objective history never increases.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adjoint import gradient, sensitivity_blocks
from .assembly import DiscretizationLevel, assemble
from .dataset import Dataset
from .density import EPS_WIDTH, DensityError, Family, TruncatedDensity
from .fem1d import ModelSpec
from .sampled import discretize, propagate, simulate

__all__ = ["Dataset", "Constraints", "ConstraintError", "EstimateOptions", "EstimateResult",
           "Problem", "objective", "minimize", "fd_gradient", "gradient_check", "random_feasible"]

log = logging.getLogger(__name__)


class ConstraintError(ValueError):
    """``rho`` lies outside the feasible set."""


_ORDERING = {
    Family.UNIFORM: [(0, 1)],
    Family.EXPONENTIAL: [],
    Family.NORMAL: [(0, 1)],
    Family.BIVARIATE_NORMAL: [(0, 1), (2, 3)],
}

_DEFAULT_BOX = {
    Family.UNIFORM: ([1e-2, 1e-2], [20.0, 20.0]),
    Family.EXPONENTIAL: ([0.1, 1e-5], [30.0, 5.0]),
    Family.NORMAL: ([1e-2, 1e-2, 1e-2, 1e-3], [20.0, 20.0, 20.0, 10.0]),
    Family.BIVARIATE_NORMAL: ([1e-2, 1e-2, 1e-2, 1e-2, 1e-2, 1e-2, 1e-3, -20.0, 1e-3],
                              [40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 20.0, 20.0, 20.0]),
}

# moderate sub-box of the feasible set for derivative checks: the extreme
# corners of the default boxes give gradient entries below any finite
# difference resolution
_CHECK_BOX = {
    Family.UNIFORM: ([0.5, 0.5], [10.0, 10.0]),
    Family.EXPONENTIAL: ([1.0, 1e-2], [30.0, 2.0]),
    Family.NORMAL: ([0.5, 0.5, 0.5, 0.05], [10.0, 10.0, 10.0, 5.0]),
    Family.BIVARIATE_NORMAL: ([0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, -3.0, 0.5],
                              [30.0, 30.0, 24.0, 24.0, 30.0, 24.0, 6.0, 3.0, 6.0]),
}


@dataclass(frozen=True)
class Constraints:
    """Box bounds plus ``rho[i] <= rho[j] - eps_width`` for each ordering pair."""

    family: Family
    lower: np.ndarray
    upper: np.ndarray
    eps_width: float = EPS_WIDTH

    def __post_init__(self):
        fam = Family(self.family)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (fam.n_params,) or hi.shape != (fam.n_params,):
            raise ValueError(f"{fam.value} bounds need {fam.n_params} entries")
        if np.any(lo > hi):
            raise ValueError("lower bound above upper bound")
        for i, j in _ORDERING[fam]:
            if lo[i] + self.eps_width > hi[j]:
                raise ValueError(f"ordering {fam.param_names[i]} < {fam.param_names[j]} "
                                 "is infeasible within the box")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, family, **overrides) -> "Constraints":
        fam = Family(family)
        lo, hi = _DEFAULT_BOX[fam]
        return cls(fam, np.array(overrides.get("lower", lo), dtype=float),
                   np.array(overrides.get("upper", hi), dtype=float),
                   overrides.get("eps_width", EPS_WIDTH))

    @classmethod
    def check_box(cls, family) -> "Constraints":
        """Moderate sub-box used to draw random points for gradient checks."""
        fam = Family(family)
        lo, hi = _CHECK_BOX[fam]
        return cls(fam, np.array(lo, dtype=float), np.array(hi, dtype=float))

    @property
    def ordering(self) -> list[tuple[int, int]]:
        return _ORDERING[self.family]

    def midpoint(self) -> np.ndarray:
        return self.project(0.5 * (self.lower + self.upper))

    def project(self, rho) -> np.ndarray:
        """Euclidean projection onto the box intersected with each ordering half-plane.

        Ordering pairs never share an entry, so each pair is a 2D problem.
        When clipping to the box breaks the ordering, the projection lies on
        the line ``rho[j] = rho[i] + eps`` and is the clamped foot point of
        the unclipped pair on that segment.
        """
        raw = np.asarray(rho, dtype=float)
        x = np.clip(raw, self.lower, self.upper)
        eps = self.eps_width
        lo, hi = self.lower, self.upper
        for i, j in self.ordering:
            # same relative slack as the density's width check, so projecting twice is a no-op
            if x[j] - x[i] >= eps * (1 - 1e-9):
                continue
            t = 0.5 * (raw[i] + raw[j] - eps)
            t = min(max(t, lo[i], lo[j] - eps), hi[i], hi[j] - eps)
            x[i], x[j] = t, t + eps
        return x

    def is_feasible(self, rho, tol: float = 1e-12) -> bool:
        x = np.asarray(rho, dtype=float)
        if np.any(x < self.lower - tol) or np.any(x > self.upper + tol):
            return False
        return all(x[j] - x[i] >= self.eps_width - tol for i, j in self.ordering)

    def random(self, rng, count: int) -> np.ndarray:
        pts = self.lower + (self.upper - self.lower) * rng.random((count, self.family.n_params))
        return np.array([self.project(p) for p in pts])


@dataclass
class EstimateOptions:
    max_iter: int = 500
    gtol: float = 1e-6
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_halvings: int = 60
    step_tol: float = 1e-14
    grad: str = "adjoint"
    fd_rel_step: float = 1e-5
    multistart: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "EstimateOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown optimizer option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class EstimateResult:
    family: Family
    level: DiscretizationLevel
    rho: np.ndarray
    objective: float
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    wall_time: float = 0.0
    n_evaluations: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def params(self) -> dict:
        return dict(zip(self.family.param_names, map(float, self.rho)))

    @property
    def objective_history(self) -> np.ndarray:
        return np.array([h["J"] for h in self.history])

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "level": {"n": self.level.n, "cells": list(self.level.cells)},
            "rho": self.rho.tolist(),
            "params": self.params,
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
            "wall_time": self.wall_time,
            "n_evaluations": self.n_evaluations,
            "meta": self.meta,
        }


class Problem:
    """Objective and gradient of the approximating problem at one level.

    The last evaluated point is cached so that the gradient at an accepted
    line-search point reuses its assembled and discretized blocks.
    """

    def __init__(self, spec: ModelSpec, level, family, datasets, eps_width: float = EPS_WIDTH):
        self.spec = spec
        self.level = DiscretizationLevel.coerce(level)
        self.family = Family(family)
        self.datasets = [datasets] if isinstance(datasets, Dataset) else list(datasets)
        self.eps_width = eps_width
        self.n_evaluations = 0
        self._cache_key = None
        self._cache = None
        for ds in self.datasets:
            if abs(ds.tau - spec.tau) > 1e-12 or ds.n_steps != spec.n_steps:
                raise ValueError("dataset grid does not match the model's tau/horizon")

    def density(self, rho) -> TruncatedDensity:
        try:
            return TruncatedDensity(self.family, np.asarray(rho, dtype=float), eps_width=self.eps_width)
        except DensityError as exc:
            raise ConstraintError(f"infeasible rho {np.asarray(rho).tolist()}: {exc}") from exc

    def _prepare(self, rho):
        key = np.asarray(rho, dtype=float).tobytes()
        if key != self._cache_key:
            system = assemble(self.spec, self.level, self.density(rho))
            sampled = discretize(system)
            trajs = [propagate(sampled, ds.inputs) for ds in self.datasets]
            J = 0.0
            for ds, X in zip(self.datasets, trajs):
                r = (X @ sampled.c_eta) @ sampled.out_weight - ds.outputs
                J += float(r @ r)
            self._cache_key = key
            self._cache = {"system": system, "sampled": sampled, "trajs": trajs, "J": J}
            self.n_evaluations += 1
        return self._cache

    def value(self, rho) -> float:
        return self._prepare(rho)["J"]

    def value_and_gradient(self, rho) -> tuple[float, np.ndarray]:
        c = self._prepare(rho)
        if "grad" not in c:
            sens = sensitivity_blocks(c["system"], c["sampled"])
            c["grad"] = gradient(c["sampled"], sens, self.datasets, c["trajs"]).gradient
        return c["J"], c["grad"].copy()

    def fd_gradient(self, rho, rel_step: float = 1e-5, order: int = 2) -> np.ndarray:
        return fd_gradient(self.value, rho, rel_step, order)

    def outputs(self, rho) -> list[np.ndarray]:
        c = self._prepare(rho)
        s = c["sampled"]
        return [(X @ s.c_eta) @ s.out_weight for X in c["trajs"]]


def fd_gradient(fun, rho, rel_step: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central differences with step ``h = rel_step * max(|rho_k|, 1)``.

    ``order=4`` uses the five-point stencil.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    rho = np.asarray(rho, dtype=float)
    g = np.empty_like(rho)

    def shifted(k, t):
        x = rho.copy()
        x[k] += t
        return fun(x)

    for k in range(rho.size):
        h = rel_step * max(abs(rho[k]), 1.0)
        d1 = shifted(k, h) - shifted(k, -h)
        if order == 2:
            g[k] = d1 / (2 * h)
        else:
            d2 = shifted(k, 2 * h) - shifted(k, -2 * h)
            g[k] = (8 * d1 - d2) / (12 * h)
    return g


def objective(spec: ModelSpec, level, density: TruncatedDensity, datasets) -> float:
    """Sum of squared output residuals of the population model at ``level``."""
    datasets = [datasets] if isinstance(datasets, Dataset) else list(datasets)
    sampled = discretize(assemble(spec, level, density))
    J = 0.0
    for ds in datasets:
        r = simulate(sampled, ds.inputs).values - ds.outputs
        J += float(r @ r)
    return J


def _descend(problem: Problem, cons: Constraints, x0, opts: EstimateOptions):
    if opts.grad == "adjoint":
        fg = problem.value_and_gradient
    elif opts.grad == "fd":
        def fg(x):
            g = problem.fd_gradient(x, opts.fd_rel_step)
            return problem.value(x), g
    else:
        raise ValueError(f"unknown gradient mode {opts.grad!r}")

    x = cons.project(x0)
    f, g = fg(x)
    history = []
    alpha = 0.1 * max(np.max(np.abs(x)), 1.0) / max(np.max(np.abs(g)), 1e-300)
    reason, converged = "max iterations", False
    it = 0
    for it in range(opts.max_iter + 1):
        pg = float(np.linalg.norm(x - cons.project(x - g)))
        history.append({"iter": it, "rho": x.tolist(), "J": f, "pgnorm": pg})
        if pg <= opts.gtol:
            reason, converged = "gradient tolerance", True
            break
        if it == opts.max_iter:
            break
        a = alpha
        accepted = collapsed = False
        for _ in range(opts.max_halvings):
            xn = cons.project(x - a * g)
            d = xn - x
            if np.linalg.norm(d) <= opts.step_tol * (1.0 + np.linalg.norm(x)):
                collapsed = True
                break
            try:
                fn = problem.value(xn)
            except (ConstraintError, FloatingPointError):
                # trial point outside the numerically usable region: shrink
                a *= opts.backtrack
                continue
            if fn <= f + opts.armijo * float(g @ d):
                accepted = True
                break
            a *= opts.backtrack
        if collapsed:
            reason, converged = "step collapse", True
            break
        if not accepted:
            reason = "stalled"
            break
        fn, gn = fg(xn)
        s, yv = xn - x, gn - g
        sy = float(s @ yv)
        alpha = float(s @ s) / sy if sy > 0 else 2.0 * a
        alpha = min(max(alpha, 1e-20), 1e20)
        x, f, g = xn, fn, gn
    return x, f, history, converged, reason, it


def minimize(spec: ModelSpec, level, family, datasets, init=None,
             options: EstimateOptions | None = None,
             constraints: Constraints | None = None) -> EstimateResult:
    """Projected-gradient estimate of ``rho`` at one discretization level."""
    t0 = time.perf_counter()
    opts = options or EstimateOptions()
    fam = Family(family)
    cons = constraints or Constraints.default(fam)
    problem = Problem(spec, level, fam, datasets, cons.eps_width)
    x0 = cons.midpoint() if init is None else np.asarray(init, dtype=float)
    if not cons.is_feasible(x0):
        raise ConstraintError(f"initial rho {x0.tolist()} is not feasible")
    starts = [x0]
    if opts.multistart > 0:
        starts += list(cons.random(np.random.default_rng(opts.seed), opts.multistart))
    best = None
    for s in starts:
        try:
            out = _descend(problem, cons, s, opts)
        except ConstraintError as exc:
            log.warning("start %s failed: %s", np.asarray(s).tolist(), exc)
            continue
        if best is None or out[1] < best[1]:
            best = out
    if best is None:
        raise ConstraintError("no start produced a valid estimate")
    x, f, history, converged, reason, it = best
    log.info("%s %s: J=%.6g after %d iterations (%s)", fam.value, problem.level.label, f, it, reason)
    return EstimateResult(family=fam, level=problem.level, rho=np.asarray(x), objective=f,
                          iterations=it, history=history, converged=converged, reason=reason,
                          wall_time=time.perf_counter() - t0,
                          n_evaluations=problem.n_evaluations,
                          meta={"constraints": {"lower": cons.lower.tolist(),
                                                "upper": cons.upper.tolist()},
                                "options": asdict(opts), "n_starts": len(starts)})


def random_feasible(family, rng, count: int, constraints: Constraints | None = None,
                    min_normalizer: float = 1e-3, max_tries: int = 10000) -> np.ndarray:
    """Random feasible ``rho`` whose density keeps a usable normalizer.

    Points are drawn uniformly in the box, projected onto the ordering
    constraints, and rejected when the truncated density has less than
    ``min_normalizer`` of its untruncated mass on the support.
    """
    fam = Family(family)
    cons = constraints or Constraints.default(fam)
    out = []
    for _ in range(max_tries):
        x = cons.random(rng, 1)[0]
        try:
            d = TruncatedDensity(fam, x, eps_width=cons.eps_width)
        except DensityError:
            continue
        if d.normalizer() >= min_normalizer:
            out.append(x)
            if len(out) == count:
                return np.array(out)
    raise ConstraintError(f"could not draw {count} usable {fam.value} points")


def gradient_check(problem: Problem, rhos, rel_step: float = 1e-3, floor: float = 1e-4,
                   order: int = 4) -> list[dict]:
    """Adjoint against central-difference gradient at each ``rho``.

    The relative error of entry ``k`` is
    ``|g_adj - g_fd| / (max(|g_adj|, |g_fd|) + floor * max|g_fd|)``. The
    objective carries rounding noise of order ``1e-13 * J``, so entries far
    below the largest one cannot be resolved by differencing; the floor
    measures those against the gradient scale instead.
    """
    rows = []
    for i, rho in enumerate(rhos):
        rho = np.asarray(rho, dtype=float)
        J, ga = problem.value_and_gradient(rho)
        gf = problem.fd_gradient(rho, rel_step, order)
        scale = floor * float(np.max(np.abs(gf)))
        for k, name in enumerate(problem.family.param_names):
            denom = max(abs(ga[k]), abs(gf[k])) + scale
            err = abs(ga[k] - gf[k]) / denom if denom > 0 else 0.0
            rows.append({"point": i, "param": name, "rho": float(rho[k]), "objective": J,
                         "adjoint": float(ga[k]), "fd": float(gf[k]), "rel_err": float(err)})
    return rows
