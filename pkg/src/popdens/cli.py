"""Command-line entry point: ``popdens <verb> --config run.yaml [options]``.

Verbs: simulate, estimate, sweep, bands, gradcheck. All data goes to files
under ``--out``; stdout carries one summary line. Exit codes: 0 success
(an optimizer stall is a result and still exits 0), 1 gradient check failed
or unexpected error, 2 configuration error, 3 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import DiscretizationLevel
from .config import ConfigError, RunConfig, load, parse
from .dataset import FLOAT_FMT, Dataset, _jsonable
from .density import DensityError, Family, SamplingError, TruncatedDensity
from .estimator import (ConstraintError, Constraints, Problem, gradient_check, minimize,
                        random_feasible)
from .experiments import (band_coverage_fraction, convergence_sweep, credible_band,
                          generate_data)
from .sampled import simulate_points

log = logging.getLogger("popdens")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class _Run:
    """Collects written files and provenance for the manifest."""

    def __init__(self, verb: str, cfg: RunConfig, out: Path):
        self.verb = verb
        self.cfg = cfg
        self.out = out
        self.files: list[Path] = []
        self.started = _now()
        self.extra: dict = {}

    def add(self, *paths):
        self.files.extend(Path(p) for p in paths)

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.add(path)
        return path

    def write_csv(self, name: str, header, rows) -> Path:
        path = self.out / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.add(path)
        return path

    def manifest(self, seeds: dict) -> Path:
        files = []
        for p in self.files:
            data = p.read_bytes()
            files.append({"path": str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p),
                          "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        body = {
            "verb": self.verb,
            "config": self.cfg.raw,
            "config_hash": self.cfg.digest,
            "config_source": self.cfg.source,
            "seeds": seeds,
            "versions": _versions(),
            "started": self.started,
            "finished": _now(),
            "files": files,
            **self.extra,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _versions() -> dict:
    import scipy
    import yaml

    return {"popdens": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v))
    return str(v)


def _apply_overrides(raw: dict, args) -> dict:
    """Fold CLI overrides into the raw config so the manifest echo reproduces the run."""
    raw = json.loads(json.dumps(raw, default=_jsonable))
    if args.seed is not None:
        raw.setdefault("data", {})["seed"] = args.seed
    opts = {}
    if args.grad is not None:
        opts["grad"] = args.grad
    if args.multistart is not None:
        opts["multistart"] = args.multistart
    if opts:
        if "estimate" not in raw:
            raise ConfigError("--grad/--multistart need an 'estimate' section")
        raw["estimate"].setdefault("options", {}).update(opts)
    return raw


def _dataset(cfg: RunConfig, args, run: _Run) -> Dataset:
    if args.data:
        ds = Dataset.read(args.data)
    else:
        ds = generate_data(cfg.experiment())
        run.add(*ds.write(run.out / "data.csv"))
    if abs(ds.tau - cfg.spec.tau) > 1e-12 or ds.n_steps != cfg.spec.n_steps:
        raise ConfigError(f"data grid (tau={ds.tau}, {ds.n_steps} steps) does not match "
                          f"model (tau={cfg.spec.tau}, {cfg.spec.n_steps} steps)")
    return ds


def _require_estimate(cfg: RunConfig) -> dict:
    if not cfg.estimate:
        raise ConfigError("missing required section 'estimate'")
    return cfg.estimate


def _level(est: dict) -> DiscretizationLevel:
    if "level" in est:
        return est["level"]
    if est.get("levels"):
        return est["levels"][-1]
    raise ConfigError("missing required field 'estimate.level'")


def _history_rows(res):
    for h in res.history:
        yield [h["iter"], *h["rho"], h["J"], h["pgnorm"]]


# --- verbs ---------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args, run: _Run) -> str:
    exp = cfg.experiment()
    ds = generate_data(exp)
    target = Path(args.out) if args.out and Path(args.out).suffix == ".csv" else run.out / "data.csv"
    run.add(*ds.write(target))
    run.extra["seeds"] = {"data": exp.seed}
    plot = None
    if args.plot:
        plot = _plot_data(ds, run.out / "data.png")
        run.add(plot)
    return f"simulate: wrote {ds.n_steps + 1} samples to {target}"


def cmd_estimate(cfg: RunConfig, args, run: _Run) -> str:
    est = _require_estimate(cfg)
    ds = _dataset(cfg, args, run)
    level = _level(est)
    res = minimize(cfg.spec, level, est["family"], [ds], init=est.get("init"),
                   options=est["options"], constraints=est["constraints"])
    body = res.to_dict()
    body["stalled"] = res.reason == "stalled"
    body["history"] = res.history
    run.write_json("estimate.json", body)
    names = list(est["family"].param_names)
    run.write_csv("history.csv", ["iter", *names, "J", "pgnorm"], _history_rows(res))
    prob = Problem(cfg.spec, level, est["family"], [ds])
    fit = prob.outputs(res.rho)[0]
    run.write_csv("fit.csv", ["t", "y_data", "y_model"], zip(ds.times, ds.outputs, fit))
    if args.plot:
        from .report import plot_density
        run.add(plot_density([TruncatedDensity(est["family"], res.rho)], run.out / "density.png",
                             labels=[level.label], truth=_matching_truth(cfg, est["family"])))
    flag = " (stalled)" if body["stalled"] else ""
    params = ", ".join(f"{k}={v:.6g}" for k, v in res.params.items())
    return f"estimate {level.label}: {params}; J={res.objective:.6g}; {res.reason}{flag}"


def _matching_truth(cfg: RunConfig, family: Family):
    t = cfg.truth
    return t if t is not None and t.family == family else None


def cmd_sweep(cfg: RunConfig, args, run: _Run) -> str:
    est = _require_estimate(cfg)
    if not est.get("levels"):
        raise ConfigError("missing required field 'estimate.levels'")
    ds = _dataset(cfg, args, run)
    exp = cfg.experiment() if cfg.truth is not None else None
    if exp is None:
        raise ConfigError("sweep needs a 'truth' section (used for the true-value row)")
    sweep = convergence_sweep(exp, ds)
    rows = sweep.rows()
    cells = max(len(lv.cells) for lv, _ in sweep.results)
    header = ["n", *[f"m{i + 1}" for i in range(cells)], *est["family"].param_names,
              "J", "iterations", "status"]
    run.write_csv("sweep.csv", header, ([r.get(h) for h in header] for r in rows))
    run.write_json("sweep.json", {"family": est["family"].value,
                                  "results": [r.to_dict() if hasattr(r, "to_dict")
                                              else {"level": lv.as_tuple(), "error": str(r)}
                                              for lv, r in sweep.results],
                                  "truth": sweep.truth})
    if args.plot:
        from .report import plot_density, plot_sweep
        run.add(plot_sweep(sweep, run.out / "sweep.png"))
        fits = [(lv, r) for lv, r in sweep.results if hasattr(r, "rho")]
        if fits:
            run.add(plot_density([TruncatedDensity(est["family"], r.rho) for _, r in fits],
                                 run.out / "densities.png", labels=[lv.label for lv, _ in fits],
                                 truth=_matching_truth(cfg, est["family"])))
    failed = sum(1 for _, r in sweep.results if not hasattr(r, "rho"))
    last = next((r for _, r in reversed(sweep.results) if hasattr(r, "rho")), None)
    tail = ", ".join(f"{k}={v:.6g}" for k, v in last.params.items()) if last else "no estimate"
    return f"sweep: {len(sweep.results)} levels ({failed} failed); finest {tail}"


def _band_density(cfg: RunConfig, args) -> TruncatedDensity:
    b = cfg.bands
    fam = cfg.estimate.get("family") or (cfg.truth.family if cfg.truth else None)
    if args.estimate:
        body = json.loads(Path(args.estimate).read_text())
        return TruncatedDensity.from_rho(body["family"], body["rho"])
    if b.get("rho") is not None:
        if fam is None:
            raise ConfigError("field 'bands.rho' needs 'estimate.family' or 'truth.family'")
        try:
            return TruncatedDensity.from_rho(fam, b["rho"])
        except DensityError as exc:
            raise ConfigError(f"field 'bands.rho': {exc}") from exc
    if cfg.truth is not None:
        return cfg.truth
    raise ConfigError("bands need 'bands.rho', --estimate or a 'truth' section")


def cmd_bands(cfg: RunConfig, args, run: _Run) -> str:
    b = cfg.bands or {"coverage": 0.75, "n_samples": 1000, "seed": 1, "level": None, "rho": None}
    density = _band_density(cfg, args)
    level = b.get("level") or (cfg.estimate.get("level") if cfg.estimate else None)
    if level is None:
        raise ConfigError("missing required field 'bands.level'")
    if len(level.cells) != density.dim:
        raise ConfigError(f"field 'bands.level': {density.family.value} needs {density.dim} "
                          "parameter partition(s)")
    ds = Dataset.read(args.data) if args.data else None
    from .experiments import windowed_abs_cos

    u = ds.inputs if ds is not None else windowed_abs_cos(cfg.spec, cfg.input_t_end)
    seed = b["seed"] if args.seed is None else args.seed
    band = credible_band(cfg.spec, level, density, u, b["coverage"], b["n_samples"], seed)
    run.write_csv("bands.csv", ["t", "lower", "mean", "upper"],
                  zip(band.times, band.lower, band.mean, band.upper))
    meta = {**band.meta, "coverage": band.coverage, "family": density.family.value,
            "rho": density.rho.tolist(), "seed": seed}
    if args.check_coverage:
        fresh = density.sample(b["n_samples"], seed + 1)
        direct = simulate_points(cfg.spec, level.n, fresh, u)
        meta["empirical_coverage"] = band_coverage_fraction(band, direct)
    run.write_json("bands.json", meta)
    run.extra["seeds"] = {"bands": seed}
    if args.plot:
        from .report import plot_band
        run.add(plot_band(band, run.out / "bands.png", data=ds))
    extra = f"; empirical coverage {meta['empirical_coverage']:.3f}" if "empirical_coverage" in meta else ""
    return f"bands {level.label}: coverage {band.coverage:.2f} from {b['n_samples']} samples{extra}"


def cmd_gradcheck(cfg: RunConfig, args, run: _Run) -> tuple[str, int]:
    est = _require_estimate(cfg)
    g = cfg.gradcheck or {"level": DiscretizationLevel.coerce([8] * (1 + est["family"].dim)),
                          "rho": None, "n_random": 10, "seed": 0, "rel_step": 1e-3}
    fam = est["family"]
    level = g["level"]
    if len(level.cells) != fam.dim:
        raise ConfigError(f"field 'gradcheck.level': {fam.value} needs {fam.dim} partition(s)")
    ds = _dataset(cfg, args, run)
    if g["rho"] is not None:
        rhos = g["rho"]
        for i, r in enumerate(rhos):
            if r.shape != (fam.n_params,):
                raise ConfigError(f"field 'gradcheck.rho[{i}]': needs {fam.n_params} entries")
    else:
        seed = g["seed"] if args.seed is None else args.seed
        rhos = random_feasible(fam, np.random.default_rng(seed), g["n_random"],
                               Constraints.check_box(fam))
    prob = Problem(cfg.spec, level, fam, [ds])
    rows = gradient_check(prob, rhos, g["rel_step"])
    header = ["point", "param", "rho", "objective", "adjoint", "fd", "rel_err"]
    run.write_csv("gradcheck.csv", header, ([r[h] for h in header] for r in rows))
    worst = max(r["rel_err"] for r in rows)
    ok = worst <= GRADCHECK_TOL
    run.extra["gradcheck"] = {"max_rel_err": worst, "tolerance": GRADCHECK_TOL, "passed": ok}
    code = EXIT_OK if ok else EXIT_FAIL
    verdict = "ok" if ok else "FAILED"
    return f"gradcheck {fam.value} {level.label}: {len(rhos)} points, max rel err {worst:.2e} ({verdict})", code


def _plot_data(ds: Dataset, path: Path) -> Path:
    from .report import _figure, _save

    fig, (ax,) = _figure()
    ax.plot(ds.times[:-1], ds.inputs, drawstyle="steps-post", lw=1, label="u")
    ax.plot(ds.times, ds.outputs, "k.", ms=2.5, label="y")
    ax.set_xlabel("t")
    ax.legend(frameon=False)
    return _save(fig, path)


VERBS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "sweep": cmd_sweep,
         "bands": cmd_bands, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popdens", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--data", help="dataset CSV (t,u,y); generated from 'truth' when omitted")
    p.add_argument("--out", default=".", help="output directory (simulate also accepts a .csv path)")
    p.add_argument("--seed", type=int, help="override the data (or band / gradcheck) seed")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit (default: all cores)")
    p.add_argument("--grad", choices=["adjoint", "fd"], help="gradient used by the optimizer")
    p.add_argument("--multistart", type=int, help="extra random starts for the optimizer")
    p.add_argument("--estimate", help="bands: estimate.json whose rho defines the density")
    p.add_argument("--check-coverage", action="store_true",
                   help="bands: also report coverage of fresh direct simulations")
    p.add_argument("--plot", action="store_true", help="also write PNG figures (needs matplotlib)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config)
        cfg = parse(_apply_overrides(cfg.raw, args), source=cfg.source)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO

    out = Path(args.out)
    out_dir = out.parent if args.verb == "simulate" and out.suffix == ".csv" else out
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    run = _Run(args.verb, cfg, out_dir)

    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        result = VERBS[args.verb](cfg, args, run)
        summary, code = result if isinstance(result, tuple) else (result, EXIT_OK)
        seeds = {"data": cfg.data.get("seed"), **run.extra.pop("seeds", {})}
        run.manifest(seeds)
    except (ConfigError, ConstraintError, DensityError, SamplingError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, csv.Error) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ImportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limiter is not None:
            limiter.unregister()
    print(summary)
    return code


if __name__ == "__main__":
    sys.exit(main())
