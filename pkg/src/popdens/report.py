"""Optional figures written next to the CSV outputs.

matplotlib is an optional extra (``pip install artifact[plot]``); it is
imported only when a figure is requested. Figures are built on a bare
``Figure`` so no display backend is needed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .density import TruncatedDensity


class PlottingUnavailable(RuntimeError):
    """matplotlib is not installed."""


def _figure(width=6.0, height=3.6, ncols=1):
    try:
        from matplotlib.figure import Figure
    except ImportError as exc:
        raise PlottingUnavailable("plotting needs matplotlib: pip install 'artifact[plot]'") from exc
    fig = Figure(figsize=(width * ncols, height), layout="constrained")
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=150)
    return path


def plot_band(band, path, data=None, title=None) -> Path:
    """Population output with its credible band, and the data if given."""
    fig, (ax,) = _figure()
    ax.fill_between(band.times, band.lower, band.upper, color="tab:blue", alpha=0.25,
                    linewidth=0, label=f"{band.coverage:.0%} band")
    ax.plot(band.times, band.mean, color="tab:blue", lw=1.5, label="population model")
    if data is not None:
        ax.plot(data.times, data.outputs, "k.", ms=2.5, label="data")
    ax.set_xlabel("t")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep(sweep, path) -> Path:
    """Each estimated parameter against level index, with the true value dashed."""
    names = sweep.family.param_names
    ok = [(lv, r) for lv, r in sweep.results if hasattr(r, "rho")]
    fig, axes = _figure(2.6, 2.4, ncols=len(names))
    x = np.arange(len(ok))
    labels = ["x".join(map(str, lv.as_tuple())) for lv, _ in ok]
    for k, (ax, name) in enumerate(zip(axes, names)):
        ax.plot(x, [r.rho[k] for _, r in ok], "o-", ms=3)
        if sweep.truth and name in sweep.truth:
            ax.axhline(sweep.truth[name], color="k", ls="--", lw=0.8)
        ax.set_xticks(x, labels, rotation=45, fontsize=7)
        ax.set_title(name)
    return _save(fig, path)


def plot_density(densities, path, labels=None, truth: TruncatedDensity | None = None) -> Path:
    """Fitted densities (1D families: curves; bivariate: contours of the last one)."""
    densities = list(densities)
    labels = labels or [None] * len(densities)
    fig, (ax,) = _figure()
    last = densities[-1]
    if last.dim == 1:
        lo = min(d.lower[0] for d in densities)
        hi = max(d.upper[0] for d in densities)
        q = np.linspace(lo, hi, 600)
        for d, lab in zip(densities, labels):
            ax.plot(q, d.pdf(q), lw=1.2, label=lab)
        if truth is not None:
            qt = q[(q >= truth.lower[0]) & (q <= truth.upper[0])]
            ax.plot(qt, truth.pdf(qt), "k--", lw=1, label="truth")
        ax.set_xlabel("q")
        ax.set_ylabel("density")
        if any(labels) or truth is not None:
            ax.legend(frameon=False, fontsize=7)
    else:
        q1 = np.linspace(last.lower[0], last.upper[0], 160)
        q2 = np.linspace(last.lower[1], last.upper[1], 160)
        Q1, Q2 = np.meshgrid(q1, q2)
        Z = last.pdf(np.stack([Q1.ravel(), Q2.ravel()], axis=1)).reshape(Q1.shape)
        cs = ax.contourf(Q1, Q2, Z, levels=14, cmap="viridis")
        fig.colorbar(cs, ax=ax)
        ax.set_xlabel("q1")
        ax.set_ylabel("q2")
    return _save(fig, path)
