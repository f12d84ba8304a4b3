"""Truncated exponential-family densities over an axis-aligned parameter box.

Four families are supported. Each is described by a flat parameter vector
``rho`` whose layout is fixed per family:

==================  ==========================================
family              rho layout
==================  ==========================================
uniform             (a, b)
exponential         (R, theta)              support [0, R]
normal              (a, b, mu, sigma)
bivariate_normal    (a, b, c, d, mu1, mu2, L11, L12, L22)
==================  ==========================================

For the bivariate normal the covariance is ``Sigma = L.T @ L`` with ``L``
upper triangular, so ``L11, L22 > 0`` keeps ``Sigma`` positive definite.

The quantities the Galerkin assembly needs are per-cell masses and first
moments on a uniform partition of the support, together with their partial
derivatives with respect to every entry of ``rho``. Cell edges are affine in
the support bounds, so bound partials carry Leibniz terms from the moving
integration limits as well as the normalizer dependence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats
from scipy.special import gammainc, ndtr

EPS_WIDTH = 1e-6
TOL_QUAD = 1e-10
GAUSS_NODES = 12

_SQRT2PI = np.sqrt(2.0 * np.pi)


class DensityError(ValueError):
    """Invalid density parameters or a request outside the support."""


class SamplingError(RuntimeError):
    """Rejection sampling cannot make progress."""


class Family(str, enum.Enum):
    UNIFORM = "uniform"
    EXPONENTIAL = "exponential"
    NORMAL = "normal"
    BIVARIATE_NORMAL = "bivariate_normal"

    @property
    def dim(self) -> int:
        return 2 if self is Family.BIVARIATE_NORMAL else 1

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]

    @property
    def n_params(self) -> int:
        return len(_PARAM_NAMES[self])


_PARAM_NAMES = {
    Family.UNIFORM: ("a", "b"),
    Family.EXPONENTIAL: ("R", "theta"),
    Family.NORMAL: ("a", "b", "mu", "sigma"),
    Family.BIVARIATE_NORMAL: ("a", "b", "c", "d", "mu1", "mu2", "L11", "L12", "L22"),
}

# (index of lower bound or None when fixed at 0, index of upper bound) per axis
_SUPPORT_INDEX = {
    Family.UNIFORM: [(0, 1)],
    Family.EXPONENTIAL: [(None, 0)],
    Family.NORMAL: [(0, 1)],
    Family.BIVARIATE_NORMAL: [(0, 1), (2, 3)],
}

_SHAPE_INDEX = {
    Family.UNIFORM: (),
    Family.EXPONENTIAL: (1,),
    Family.NORMAL: (2, 3),
    Family.BIVARIATE_NORMAL: (4, 5, 6, 7, 8),
}


def _gauss_legendre(n: int = GAUSS_NODES) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    # map to [0, 1]
    return 0.5 * (nodes + 1.0), 0.5 * weights


@dataclass(frozen=True)
class TruncatedDensity:
    """A member of a truncated exponential family.

    Build one with :meth:`from_rho`; the constructor validates every
    invariant, so an instance always describes a proper density.
    """

    family: Family
    rho: np.ndarray
    eps_width: float = EPS_WIDTH
    require_positive: bool = True

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float).reshape(-1)
        rho.setflags(write=False)
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "rho", rho)
        self._validate()

    @classmethod
    def from_rho(cls, family, rho, **kwargs) -> "TruncatedDensity":
        return cls(Family(family), np.asarray(rho, dtype=float), **kwargs)

    # -- layout -----------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.family.dim

    @property
    def n_params(self) -> int:
        return self.family.n_params

    @property
    def lower(self) -> np.ndarray:
        return np.array([0.0 if lo is None else self.rho[lo]
                         for lo, _ in _SUPPORT_INDEX[self.family]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.rho[hi] for _, hi in _SUPPORT_INDEX[self.family]])

    @property
    def shape(self) -> np.ndarray:
        return self.rho[list(_SHAPE_INDEX[self.family])]

    @property
    def mu(self) -> np.ndarray:
        if self.family is Family.NORMAL:
            return self.rho[2:3]
        if self.family is Family.BIVARIATE_NORMAL:
            return self.rho[4:6]
        raise AttributeError("family has no location parameter")

    @property
    def chol(self) -> np.ndarray:
        """Upper-triangular factor ``L`` with ``Sigma = L.T @ L``."""
        l11, l12, l22 = self.rho[6:9]
        return np.array([[l11, l12], [0.0, l22]])

    @property
    def covariance(self) -> np.ndarray:
        L = self.chol
        return L.T @ L

    def with_rho(self, rho) -> "TruncatedDensity":
        return TruncatedDensity(self.family, np.asarray(rho, dtype=float),
                                eps_width=self.eps_width,
                                require_positive=self.require_positive)

    def _validate(self):
        rho = self.rho
        if rho.shape != (self.family.n_params,):
            raise DensityError(
                f"{self.family.value}: expected {self.family.n_params} parameters "
                f"{self.family.param_names}, got {rho.size}")
        if not np.all(np.isfinite(rho)):
            raise DensityError("non-finite density parameter")
        lo, hi = self.lower, self.upper
        if np.any(hi - lo < self.eps_width * (1 - 1e-9)):
            raise DensityError(f"support width below {self.eps_width:g}: [{lo}, {hi}]")
        if self.require_positive and self.family is not Family.EXPONENTIAL and np.any(lo <= 0):
            raise DensityError("support lower bounds must be strictly positive")
        fam = self.family
        if fam is Family.EXPONENTIAL and rho[1] <= 0:
            raise DensityError("exponential rate theta must be positive")
        if fam is Family.NORMAL and rho[3] <= 0:
            raise DensityError("normal scale sigma must be positive")
        if fam is Family.BIVARIATE_NORMAL and (rho[6] <= 0 or rho[8] <= 0):
            raise DensityError("L11 and L22 must be positive")
        if self.normalizer() <= 0:
            raise DensityError("density normalizer vanishes on the support")

    # -- unnormalized weight ---------------------------------------------------

    def weight(self, q) -> np.ndarray:
        """Untruncated family density ``phi(q; theta)`` (no support indicator)."""
        q = np.asarray(q, dtype=float)
        fam = self.family
        if fam is Family.UNIFORM:
            return np.ones_like(q)
        if fam is Family.EXPONENTIAL:
            th = self.rho[1]
            return th * np.exp(-th * q)
        if fam is Family.NORMAL:
            mu, sig = self.rho[2], self.rho[3]
            z = (q - mu) / sig
            return np.exp(-0.5 * z * z) / (_SQRT2PI * sig)
        w, _ = _bvn_whiten(self, q[..., 0], q[..., 1])
        return _bvn_pdf(self, w)

    def normalizer(self) -> float:
        """``Phi_D(theta)``: integral of the untruncated weight over the support."""
        if self.dim == 1:
            I0, *_ = _interval_integrals(self, self.lower[:1], self.upper[:1])
            return float(I0[0])
        lo, hi, _, _ = _partition_geometry(self, (8, 8))
        ints = _bvn_box_integrals(self, lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1])
        return float(np.sum(ints["I"][:, 0]))

    # -- pointwise ---------------------------------------------------------------

    def pdf(self, q) -> np.ndarray:
        """Truncated density; zero outside the support.

        ``q`` is a scalar/array for one-parameter families and has a trailing
        axis of length 2 for the bivariate family.
        """
        q = np.asarray(q, dtype=float)
        Z = self.normalizer()
        if self.dim == 1:
            inside = (q >= self.lower[0]) & (q <= self.upper[0])
            w = self.weight(q)
        else:
            inside = np.all((q >= self.lower) & (q <= self.upper), axis=-1)
            w = self.weight(q)
        return np.where(inside, w / Z, 0.0)

    def pdf_bounds(self, cells=(8,)) -> tuple[float, float]:
        """Min and max of the density over the cell endpoints/corners of a partition."""
        if self.dim == 1:
            pts = np.linspace(self.lower[0], self.upper[0], cells[0] + 1)
            if self.family is Family.NORMAL:
                pts = np.append(pts, np.clip(self.rho[2], self.lower[0], self.upper[0]))
            vals = self.pdf(pts)
        else:
            m1, m2 = (cells + cells)[:2] if len(cells) == 1 else cells
            g1 = np.linspace(self.lower[0], self.upper[0], m1 + 1)
            g2 = np.linspace(self.lower[1], self.upper[1], m2 + 1)
            P = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
            mode = np.clip(self.mu, self.lower, self.upper)
            vals = self.pdf(np.vstack([P, mode]))
        return float(vals.min()), float(vals.max())

    # -- cells -------------------------------------------------------------------

    def cell_mass(self, cell) -> float:
        """Probability mass of a sub-box ``cell`` of the support."""
        return float(self._fixed_cell(cell).mass[0])

    def cell_first_moment(self, cell, axis: int = 0) -> float:
        """``int_cell q[axis] f(q) dq``."""
        return float(self._fixed_cell(cell).first[0, axis])

    def cell_moment_partials(self, cell) -> tuple[np.ndarray, np.ndarray]:
        """Partials of the cell mass and first moments with respect to ``rho``.

        Returns ``(dmass, dfirst)`` of shapes ``(n_params,)`` and
        ``(dim, n_params)``. A cell edge that coincides with a support bound
        moves with that bound; other edges are held fixed.
        """
        cm = self._fixed_cell(cell)
        return cm.dmass[0], cm.dfirst[0]

    def _fixed_cell(self, cell) -> "CellMoments":
        cell = np.asarray(cell, dtype=float).reshape(self.dim, 2)
        lo, hi = self.lower, self.upper
        tol = 1e-12 * max(1.0, float(np.max(np.abs(hi))))
        if np.any(cell[:, 0] < lo - tol) or np.any(cell[:, 1] > hi + tol) or np.any(cell[:, 1] < cell[:, 0]):
            raise DensityError(f"cell {cell.tolist()} is not inside the support [{lo}, {hi}]")
        dlo_s, dhi_s = _support_jacobian(self)
        dlo = np.zeros((1, self.dim, self.n_params))
        dhi = np.zeros((1, self.dim, self.n_params))
        for ax in range(self.dim):
            if abs(cell[ax, 0] - lo[ax]) <= tol:
                dlo[0, ax] = dlo_s[ax]
            if abs(cell[ax, 1] - hi[ax]) <= tol:
                dhi[0, ax] = dhi_s[ax]
        return _moments(self, cell[None, :, 0], cell[None, :, 1], dlo, dhi)

    def partition(self, counts) -> "CellMoments":
        """Moments of the uniform partition of the support into ``counts`` cells per axis.

        Cells are ordered with the first axis slowest (C order over the per-axis
        cell indices).
        """
        counts = tuple(int(c) for c in np.atleast_1d(counts))
        if len(counts) != self.dim or min(counts) < 1:
            raise DensityError(f"need {self.dim} positive cell counts, got {counts}")
        lo, hi, dlo, dhi = _partition_geometry(self, counts)
        cm = _moments(self, lo, hi, dlo, dhi, normalize_by_sum=True)
        return CellMoments(cm.lo, cm.hi, cm.mass, cm.first, cm.dmass, cm.dfirst, counts)

    def cell_index(self, q, counts) -> np.ndarray:
        """Flat index of the partition cell containing each point in ``q``."""
        q = np.asarray(q, dtype=float).reshape(-1, self.dim)
        counts = np.atleast_1d(counts)
        lo, hi = self.lower, self.upper
        j = np.floor((q - lo) / (hi - lo) * counts).astype(int)
        j = np.clip(j, 0, counts - 1)
        return np.ravel_multi_index(tuple(j.T), tuple(int(c) for c in counts))

    def mean(self) -> np.ndarray:
        cm = self.partition((1,) * self.dim)
        return cm.first[0] / cm.mass[0]

    # -- sampling ----------------------------------------------------------------

    def sample(self, count: int, seed=None, method: str = "iid") -> np.ndarray:
        """Draws of shape ``(count,)`` or ``(count, 2)``; deterministic given ``seed``.

        ``method="iid"`` gives independent draws (inverse CDF or rejection).
        ``method="stratified"`` gives a Latin hypercube sample pushed through
        the inverse CDF, so each marginal stratum of width ``1/count`` holds
        one draw. For the bivariate family the hypercube is mapped through the
        untruncated normal and points outside the box are replaced by further
        stratified batches.
        """
        if count < 1:
            raise ValueError("count must be positive")
        if method not in ("iid", "stratified"):
            raise ValueError(f"unknown sampling method {method!r}")
        rng = np.random.default_rng(seed)
        if method == "stratified":
            return self._sample_stratified(count, rng)
        fam = self.family
        lo, hi = self.lower, self.upper
        if fam is Family.UNIFORM:
            return lo[0] + (hi[0] - lo[0]) * rng.random(count)
        if fam is Family.EXPONENTIAL:
            return self._exp_ppf(rng.random(count))
        accept = self._acceptance()
        out = np.empty((count, self.dim))
        filled = 0
        while filled < count:
            batch = int(min(max(2 * (count - filled) / accept, 64), 1e7))
            if fam is Family.NORMAL:
                draw = (self.rho[2] + self.rho[3] * rng.standard_normal(batch))[:, None]
            else:
                draw = self.mu + rng.standard_normal((batch, 2)) @ self.chol
            filled = self._fill(out, filled, draw)
        return out[:, 0] if self.dim == 1 else out

    def _acceptance(self) -> float:
        accept = self.normalizer()
        if accept < 1e-6:
            raise SamplingError(f"rejection acceptance rate {accept:.3g} below 1e-6")
        return accept

    def _fill(self, out, filled, draw) -> int:
        keep = draw[np.all((draw >= self.lower) & (draw <= self.upper), axis=1)]
        take = min(len(keep), len(out) - filled)
        out[filled:filled + take] = keep[:take]
        return filled + take

    def _exp_ppf(self, u):
        th, R = self.rho[1], self.upper[0]
        return -np.log1p(u * np.expm1(-th * R)) / th

    def _sample_stratified(self, count, rng) -> np.ndarray:
        def lhs(k, dim):
            strata = np.stack([rng.permutation(k) for _ in range(dim)], axis=1)
            return (strata + rng.random((k, dim))) / k

        fam = self.family
        lo, hi = self.lower, self.upper
        if fam is Family.UNIFORM:
            return lo[0] + (hi[0] - lo[0]) * lhs(count, 1)[:, 0]
        if fam is Family.EXPONENTIAL:
            return self._exp_ppf(lhs(count, 1)[:, 0])
        if fam is Family.NORMAL:
            mu, sd = self.rho[2], self.rho[3]
            u = lhs(count, 1)[:, 0]
            return stats.truncnorm.ppf(u, (lo[0] - mu) / sd, (hi[0] - mu) / sd, loc=mu, scale=sd)
        accept = self._acceptance()
        out = np.empty((count, 2))
        filled = 0
        while filled < count:
            k = int(min(np.ceil((count - filled) / accept), 1e7))
            z = special.ndtri(lhs(k, 2))
            filled = self._fill(out, filled, self.mu + z @ self.chol)
        return out


@dataclass(frozen=True)
class CellMoments:
    """Per-cell masses and first moments with their ``rho`` partials.

    ``first[j, ax]`` is ``int_cell q_ax f dq`` (not a conditional mean).
    """

    lo: np.ndarray
    hi: np.ndarray
    mass: np.ndarray
    first: np.ndarray
    dmass: np.ndarray
    dfirst: np.ndarray
    counts: tuple = field(default=())

    @property
    def n_cells(self) -> int:
        return self.mass.size


# --- support geometry ------------------------------------------------------------


def _support_jacobian(d: TruncatedDensity) -> tuple[np.ndarray, np.ndarray]:
    """d(lower)/d(rho) and d(upper)/d(rho), each of shape (dim, n_params)."""
    dlo = np.zeros((d.dim, d.n_params))
    dhi = np.zeros((d.dim, d.n_params))
    for ax, (lo, hi) in enumerate(_SUPPORT_INDEX[d.family]):
        if lo is not None:
            dlo[ax, lo] = 1.0
        dhi[ax, hi] = 1.0
    return dlo, dhi


def _partition_geometry(d: TruncatedDensity, counts):
    """Edges of the uniform partition and their derivatives in ``rho``.

    Returns ``lo, hi`` of shape ``(n_cells, dim)`` and ``dlo, dhi`` of shape
    ``(n_cells, dim, n_params)``; cell edges are affine in the support bounds.
    """
    lo_s, hi_s = d.lower, d.upper
    dlo_s, dhi_s = _support_jacobian(d)
    edges_lo, edges_hi, dl, dh = [], [], [], []
    for ax, m in enumerate(counts):
        frac_lo = np.arange(m) / m
        frac_hi = np.arange(1, m + 1) / m
        w = hi_s[ax] - lo_s[ax]
        lo_e = lo_s[ax] + frac_lo * w
        hi_e = lo_s[ax] + frac_hi * w
        hi_e[-1] = hi_s[ax]
        edges_lo.append(lo_e)
        edges_hi.append(hi_e)
        dl.append((1 - frac_lo)[:, None] * dlo_s[ax] + frac_lo[:, None] * dhi_s[ax])
        dh.append((1 - frac_hi)[:, None] * dlo_s[ax] + frac_hi[:, None] * dhi_s[ax])
    idx = np.indices(counts).reshape(d.dim, -1)
    lo = np.stack([edges_lo[ax][idx[ax]] for ax in range(d.dim)], axis=1)
    hi = np.stack([edges_hi[ax][idx[ax]] for ax in range(d.dim)], axis=1)
    dlo = np.stack([dl[ax][idx[ax]] for ax in range(d.dim)], axis=1)
    dhi = np.stack([dh[ax][idx[ax]] for ax in range(d.dim)], axis=1)
    return lo, hi, dlo, dhi


def _shape_selector(d: TruncatedDensity) -> np.ndarray:
    idx = _SHAPE_INDEX[d.family]
    S = np.zeros((len(idx), d.n_params))
    S[np.arange(len(idx)), list(idx)] = 1.0
    return S


# --- one-parameter families --------------------------------------------------------


def _interval_integrals(d: TruncatedDensity, lo, hi):
    """Unnormalized integrals over intervals ``[lo, hi]``.

    Returns ``I0, I1, dI0, dI1, phi_lo, phi_hi`` where ``Ik = int q^k phi``,
    ``dIk`` has shape ``(n, n_shape)`` (derivatives in the shape parameters)
    and ``phi_*`` are the weight values at the endpoints.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    fam = d.family
    if fam is Family.UNIFORM:
        I0 = hi - lo
        I1 = 0.5 * (hi - lo) * (hi + lo)
        empty = np.zeros(lo.shape + (0,))
        return I0, I1, empty, empty, np.ones_like(lo), np.ones_like(hi)

    if fam is Family.EXPONENTIAL:
        th = d.rho[1]
        x = th * (hi - lo)
        E = np.exp(-th * lo)
        J0 = gammainc(1.0, x)
        J1 = gammainc(2.0, x) / th
        J2 = 2.0 * gammainc(3.0, x) / th**2
        I0 = E * J0
        I1 = E * (lo * J0 + J1)
        I2 = E * (lo * lo * J0 + 2.0 * lo * J1 + J2)
        dI0 = (I0 / th - I1)[:, None]
        dI1 = (I1 / th - I2)[:, None]
        return I0, I1, dI0, dI1, th * np.exp(-th * lo), th * np.exp(-th * hi)

    mu, sig = d.rho[2], d.rho[3]
    zl = (lo - mu) / sig
    zh = (hi - mu) / sig
    # upper-tail cells use survival functions to avoid cancellation
    M0 = np.where(zl > 0, ndtr(-zl) - ndtr(-zh), ndtr(zh) - ndtr(zl))
    pl = np.exp(-0.5 * zl * zl) / _SQRT2PI
    ph = np.exp(-0.5 * zh * zh) / _SQRT2PI
    M1 = pl - ph
    M2 = M0 + zl * pl - zh * ph
    M3 = 2.0 * M1 + zl * zl * pl - zh * zh * ph
    I0 = M0
    I1 = mu * M0 + sig * M1
    dI0 = np.stack([M1 / sig, (zl * pl - zh * ph) / sig], axis=-1)
    dI1 = np.stack([(mu * M1 + sig * M2) / sig,
                    (mu * (zl * pl - zh * ph) + sig * (M3 - M1)) / sig], axis=-1)
    return I0, I1, dI0, dI1, pl / sig, ph / sig


# --- bivariate normal -----------------------------------------------------------------


def _bvn_whiten(d: TruncatedDensity, q1, q2):
    """Whitened residual ``w = L^{-T} (q - mu)`` and ``v = Sigma^{-1} (q - mu)``."""
    mu1, mu2, l11, l12, l22 = d.rho[4:9]
    r1 = q1 - mu1
    r2 = q2 - mu2
    w1 = r1 / l11
    w2 = (r2 - l12 * w1) / l22
    v2 = w2 / l22
    v1 = (w1 - l12 * v2) / l11
    return (w1, w2), (v1, v2)


def _bvn_pdf(d: TruncatedDensity, w):
    l11, l22 = d.rho[6], d.rho[8]
    return np.exp(-0.5 * (w[0] ** 2 + w[1] ** 2)) / (2.0 * np.pi * l11 * l22)


_PANEL_NODES, _PANEL_WEIGHTS = _gauss_legendre()
_W_CLIP = 9.0
_W_GRID = np.linspace(-_W_CLIP, _W_CLIP, 37)
_CROSS_OFFSETS = np.array([-8.0, -4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0, 8.0])


def _bvn_panels(d: TruncatedDensity, alpha, beta, lo2, hi2):
    """Composite Gauss nodes in ``w1`` for each box, shape ``(n, K)``.

    Breakpoints: a fixed grid on ``[-9, 9]`` plus clusters around the ``w1``
    where a ``q2`` edge crosses the conditional mean, spaced on the
    conditional transition width ``L22 / |L12|``. Panels are clipped to the
    box, so empty panels carry zero weight.
    """
    mu2, l12, l22 = d.rho[5], d.rho[7], d.rho[8]
    n = alpha.size
    a = np.clip(alpha, -_W_CLIP, _W_CLIP)
    b = np.clip(beta, -_W_CLIP, _W_CLIP)
    parts = [np.broadcast_to(_W_GRID, (n, _W_GRID.size)), a[:, None], b[:, None]]
    if abs(l12) > 1e-12 * l22:
        width = l22 / abs(l12)
        for e in (lo2, hi2):
            cross = (e - mu2) / l12
            parts.append(cross[:, None] + width * _CROSS_OFFSETS[None, :])
    br = np.sort(np.clip(np.concatenate(parts, axis=1), a[:, None], b[:, None]), axis=1)
    left, h = br[:, :-1], np.diff(br, axis=1)
    nodes = (left[:, :, None] + h[:, :, None] * _PANEL_NODES).reshape(n, -1)
    weights = (h[:, :, None] * _PANEL_WEIGHTS).reshape(n, -1)
    return nodes, weights


def _std_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _conditional_terms(d: TruncatedDensity, w1, lo2, hi2):
    """Inner ``q2`` integrals at fixed ``w1`` and their partials in ``(m, L22)``."""
    mu2, l12, l22 = d.rho[5], d.rho[7], d.rho[8]
    m = mu2 + l12 * w1
    zl = (lo2 - m) / l22
    zh = (hi2 - m) / l22
    # upper-tail difference where both limits sit above the mean keeps precision
    dPhi = np.where(zl > 0, ndtr(-zl) - ndtr(-zh), ndtr(zh) - ndtr(zl))
    pl, ph = _std_pdf(zl), _std_pdf(zh)
    dphi = ph - pl
    dzphi = zh * ph - zl * pl
    dz2phi = zh * zh * ph - zl * zl * pl
    F0 = dPhi
    F2 = m * dPhi - l22 * dphi
    return {
        "m": m, "F0": F0, "F2": F2,
        "F0_m": -dphi / l22, "F0_s": -dzphi / l22,
        "F2_m": dPhi - m * dphi / l22 - dzphi,
        "F2_s": -m * dzphi / l22 - dphi - dz2phi,
    }


def _bvn_box_integrals(d: TruncatedDensity, lo1, hi1, lo2, hi2):
    """Box integrals of the untruncated bivariate normal ``phi``.

    With ``q1 = mu1 + L11 w1`` and ``q2 | w1 ~ N(mu2 + L12 w1, L22^2)`` the
    inner ``q2`` integrals are closed form; the outer ``w1`` integral uses
    composite Gauss-Legendre panels (see :func:`_bvn_panels`).

    Returns a dict with
      ``I``      (n, 3): integrals of phi * (1, q1, q2)
      ``dI``     (n, 3, 5): derivatives of ``I`` in (mu1, mu2, L11, L12, L22), box fixed
      ``edge``   (n, 4, 3): line integrals of phi * (1, q1, q2) along the edges
                 q1=lo1, q1=hi1, q2=lo2, q2=hi2
    """
    lo1, hi1, lo2, hi2 = (np.asarray(x, dtype=float).reshape(-1) for x in (lo1, hi1, lo2, hi2))
    mu1, mu2, l11, l12, l22 = d.rho[4:9]
    n = lo1.size
    alpha = (lo1 - mu1) / l11
    beta = (hi1 - mu1) / l11
    W1, WT = _bvn_panels(d, alpha, beta, lo2, hi2)
    L2, H2 = lo2[:, None], hi2[:, None]
    c = _conditional_terms(d, W1, L2, H2)
    q1 = mu1 + l11 * W1
    pw = _std_pdf(W1) * WT

    I = np.stack([(pw * c["F0"]).sum(1), (pw * q1 * c["F0"]).sum(1), (pw * c["F2"]).sum(1)], axis=-1)

    dI = np.zeros((n, 3, 5))
    # mu2 and L12 act through the conditional mean m (dm/dmu2 = 1, dm/dL12 = w1)
    for k, dm in ((1, 1.0), (3, W1)):
        dI[:, 0, k] = (pw * c["F0_m"] * dm).sum(1)
        dI[:, 1, k] = (pw * q1 * c["F0_m"] * dm).sum(1)
        dI[:, 2, k] = (pw * c["F2_m"] * dm).sum(1)
    dI[:, 0, 4] = (pw * c["F0_s"]).sum(1)
    dI[:, 1, 4] = (pw * q1 * c["F0_s"]).sum(1)
    dI[:, 2, 4] = (pw * c["F2_s"]).sum(1)
    # mu1 and L11 move q1 at fixed w1 and the whitened limits alpha, beta
    dI[:, 1, 0] = (pw * c["F0"]).sum(1)
    dI[:, 1, 2] = (pw * W1 * c["F0"]).sum(1)
    ends = []
    for wb in (alpha, beta):
        cb = _conditional_terms(d, wb, lo2, hi2)
        qb = mu1 + l11 * wb
        ends.append(_std_pdf(wb)[:, None] * np.stack([cb["F0"], qb * cb["F0"], cb["F2"]], axis=-1))
    for k, dw in ((0, -1.0 / l11), (2, -1.0 / l11)):
        sa = dw * (alpha if k == 2 else 1.0)
        sb = dw * (beta if k == 2 else 1.0)
        dI[:, :, k] += ends[1] * np.reshape(sb, (-1, 1)) - ends[0] * np.reshape(sa, (-1, 1))

    edges = [ends[0] / l11, ends[1] / l11]
    for e in (lo2, hi2):
        z = (e[:, None] - (mu2 + l12 * W1)) / l22
        ph = pw * _std_pdf(z) / l22
        edges.append(np.stack([ph.sum(1), (ph * q1).sum(1), e * ph.sum(1)], axis=-1))
    return {"I": I, "dI": dI, "edge": np.stack(edges, axis=1)}


# --- generic cell moments ----------------------------------------------------------------


def _raw_cell_integrals(d: TruncatedDensity, lo, hi, dlo, dhi):
    """Unnormalized cell integrals ``(n, 1+dim)`` and their total ``rho`` derivatives."""
    S = _shape_selector(d)
    if d.dim == 1:
        l, h = lo[:, 0], hi[:, 0]
        I0, I1, dI0, dI1, pl, ph = _interval_integrals(d, l, h)
        I = np.stack([I0, I1], axis=-1)
        dshape = np.stack([dI0, dI1], axis=1) @ S
        # Leibniz: d/dh int^h g phi = g(h) phi(h)
        g_lo = np.stack([pl, l * pl], axis=-1)
        g_hi = np.stack([ph, h * ph], axis=-1)
        dI = dshape + g_hi[:, :, None] * dhi[:, 0, None, :] - g_lo[:, :, None] * dlo[:, 0, None, :]
        return I, dI
    res = _bvn_box_integrals(d, lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1])
    I = res["I"]
    dI = res["dI"] @ S
    e = res["edge"]
    dI = (dI
          - e[:, 0, :, None] * dlo[:, 0, None, :]
          + e[:, 1, :, None] * dhi[:, 0, None, :]
          - e[:, 2, :, None] * dlo[:, 1, None, :]
          + e[:, 3, :, None] * dhi[:, 1, None, :])
    return I, dI


def _moments(d: TruncatedDensity, lo, hi, dlo, dhi, normalize_by_sum=False) -> CellMoments:
    I, dI = _raw_cell_integrals(d, lo, hi, dlo, dhi)
    if normalize_by_sum:
        # cells tile the support, so the normalizer is their sum
        Z = I[:, 0].sum()
        dZ = dI[:, 0, :].sum(axis=0)
    else:
        dlo_s, dhi_s = _support_jacobian(d)
        if d.dim == 1:
            Iz, dIz = _raw_cell_integrals(d, d.lower[None, :], d.upper[None, :],
                                          dlo_s[None], dhi_s[None])
            Z, dZ = Iz[0, 0], dIz[0, 0]
        else:
            If, dIf = _raw_cell_integrals(d, *_partition_geometry(d, (8, 8)))
            Z, dZ = If[:, 0].sum(), dIf[:, 0, :].sum(axis=0)
    mass = I[:, 0] / Z
    first = I[:, 1:] / Z
    dmass = dI[:, 0, :] / Z - np.outer(mass, dZ) / Z
    dfirst = dI[:, 1:, :] / Z - first[:, :, None] * dZ[None, None, :] / Z
    return CellMoments(lo, hi, mass, first, dmass, dfirst)
