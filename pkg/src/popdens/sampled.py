"""Zero-order-hold sampled-time population model and its simulation.

Per cell ``j`` the continuous generator is ``A_j = -M_j^{-1} K_j``. Because
``M_j`` and the Robin term both scale with the cell mass, this reduces to::

    A_j = -(qbar_j * G + H),   G = M_eta^{-1} K_diff,  H = M_eta^{-1} K_bdry
    M_j^{-1} B_j = g_j * M_eta^{-1} b_eta

with ``qbar_j`` the conditional mean of ``q1`` on the cell and ``g_j`` the
conditional mean of the input gain (1 when there is no gain parameter).
Cells whose mass underflows are given the cell midpoint instead; their
output weight is exactly zero, so they never reach the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import GalerkinSystem, assemble
from .density import TruncatedDensity
from .expm import matrix_exponential
from .fem1d import (ModelSpec, SpatialMesh, spatial_input_vector, spatial_mass,
                    spatial_output_vector, spatial_stiffness)

TINY_MASS = 1e-300
COND_LIMIT = 1e12


class AssemblyDegenerateError(ArithmeticError):
    """A cell block cannot be turned into a well-defined generator."""


@dataclass(frozen=True)
class SampledSystem:
    """Discrete-time blocks ``x_{k+1} = Ahat_j x_k + Bhat_j u_k`` for every cell.

    The population output is ``y_k = sum_j C_j x_{k, j}``.
    """

    spec: ModelSpec
    tau: float
    A: np.ndarray
    Ahat: np.ndarray
    Bhat: np.ndarray
    out_weight: np.ndarray
    c_eta: np.ndarray
    qbar: np.ndarray
    gain: np.ndarray
    G: np.ndarray
    H: np.ndarray
    b_tilde: np.ndarray
    system: GalerkinSystem | None = None

    @property
    def n_cells(self) -> int:
        return self.Ahat.shape[0]

    @property
    def dof(self) -> int:
        return self.Ahat.shape[1]

    @property
    def n_steps(self) -> int:
        return self.spec.n_steps

    @property
    def C(self) -> np.ndarray:
        return self.out_weight[:, None] * self.c_eta

    @property
    def input_operator(self) -> np.ndarray:
        """``M_j^{-1} B_j`` per cell."""
        return self.gain[:, None] * self.b_tilde


@dataclass(frozen=True)
class OutputSeries:
    times: np.ndarray
    values: np.ndarray
    states: np.ndarray | None = field(default=None, repr=False)


def _spatial_operators(mesh: SpatialMesh):
    Me = spatial_mass(mesh)
    Kd, Kb = spatial_stiffness(mesh)
    G = np.linalg.solve(Me, Kd)
    H = np.linalg.solve(Me, Kb)
    bt = np.linalg.solve(Me, spatial_input_vector(mesh))
    return G, H, bt


def zoh_input(A: np.ndarray, Ahat: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    """``int_0^tau exp(A s) b ds`` for a stack of blocks.

    Uses ``(Ahat - I) A^{-1} b`` where ``A`` is safely invertible and the
    augmented exponential ``exp([[A, b], [0, 0]] tau)`` elsewhere.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    out = np.empty(A.shape[:-1])
    cond = np.linalg.cond(A) if n else np.zeros(len(A))
    ok = np.isfinite(cond) & (cond < COND_LIMIT)
    if ok.any():
        y = np.linalg.solve(A[ok], b[ok][..., None])
        out[ok] = ((Ahat[ok] - np.eye(n)) @ y)[..., 0]
    if (~ok).any():
        bad = np.flatnonzero(~ok)
        aug = np.zeros((len(bad), n + 1, n + 1))
        aug[:, :n, :n] = A[bad]
        aug[:, :n, n] = b[bad]
        out[bad] = matrix_exponential(aug * tau)[:, :n, n]
    return out


def _build(spec, mesh, qbar, gain, out_weight, tau, system=None) -> SampledSystem:
    G, H, bt = _spatial_operators(mesh)
    if not (np.all(np.isfinite(qbar)) and np.all(np.isfinite(gain))):
        bad = int(np.flatnonzero(~(np.isfinite(qbar) & np.isfinite(gain)))[0])
        raise AssemblyDegenerateError(f"cell {bad}: block weights are not finite")
    A = -(qbar[:, None, None] * G + H)
    Ahat = matrix_exponential(A * tau)
    b = gain[:, None] * bt
    Bhat = zoh_input(A, Ahat, b, tau)
    return SampledSystem(spec=spec, tau=tau, A=A, Ahat=Ahat, Bhat=Bhat,
                         out_weight=np.asarray(out_weight, dtype=float),
                         c_eta=spatial_output_vector(mesh, spec.eta0),
                         qbar=qbar, gain=gain, G=G, H=H, b_tilde=bt, system=system)


def conditional_weights(system: GalerkinSystem) -> tuple[np.ndarray, np.ndarray]:
    """Conditional cell means ``(qbar, gain)`` with the small-mass fallback."""
    cm = system.moments
    mass = cm.mass
    mid = 0.5 * (cm.lo + cm.hi)
    ok = mass > TINY_MASS
    safe = np.where(ok, mass, 1.0)
    qbar = np.where(ok, system.stiffness_weight / safe, mid[:, 0])
    qbar = np.clip(qbar, cm.lo[:, 0], cm.hi[:, 0])
    if system.spec.n_random == 2:
        gain = np.where(ok, system.input_weight / safe, mid[:, 1])
        gain = np.clip(gain, cm.lo[:, 1], cm.hi[:, 1])
    else:
        gain = np.ones_like(mass)
    return qbar, gain


def discretize(system: GalerkinSystem, tau: float | None = None) -> SampledSystem:
    """Zero-order-hold discretization of every cell block."""
    tau = system.spec.tau if tau is None else float(tau)
    qbar, gain = conditional_weights(system)
    return _build(system.spec, system.mesh, qbar, gain, system.cell_mass, tau, system)


def point_system(spec: ModelSpec, n: int, q) -> SampledSystem:
    """Independent deterministic models, one block per parameter point.

    ``q`` has shape ``(k,)`` (diffusivity only) or ``(k, 2)`` (diffusivity
    and input gain). Every block gets output weight 1, so per-block outputs
    are the deterministic model outputs.
    """
    q = np.asarray(q, dtype=float)
    q = q.reshape(-1, 1) if q.ndim <= 1 else q
    if q.shape[1] != spec.n_random:
        raise ValueError(f"{spec.bc.value} takes {spec.n_random} parameters per point")
    if np.any(q[:, 0] <= 0):
        raise ValueError("diffusivity must be strictly positive")
    mesh = SpatialMesh(n, spec.bc)
    gain = q[:, 1] if spec.n_random == 2 else np.ones(len(q))
    return _build(spec, mesh, q[:, 0].copy(), gain.copy(), np.ones(len(q)), spec.tau)


def _check_inputs(sampled: SampledSystem, inputs) -> np.ndarray:
    u = np.asarray(inputs, dtype=float).reshape(-1)
    if u.size != sampled.n_steps:
        raise ValueError(f"expected {sampled.n_steps} input values (horizon/tau), got {u.size}")
    return u


def propagate(sampled: SampledSystem, inputs, x0=None) -> np.ndarray:
    """State trajectory ``(n_steps + 1, n_cells, dof)``."""
    u = _check_inputs(sampled, inputs)
    X = np.empty((u.size + 1, sampled.n_cells, sampled.dof))
    X[0] = 0.0 if x0 is None else x0
    Ahat, Bhat = sampled.Ahat, sampled.Bhat
    for k in range(u.size):
        X[k + 1] = np.einsum("cij,cj->ci", Ahat, X[k]) + Bhat * u[k]
    return X


def cell_outputs(sampled: SampledSystem, states: np.ndarray) -> np.ndarray:
    """Unweighted per-cell outputs ``c_eta . x_{k, j}``, shape ``(n_steps + 1, n_cells)``."""
    return states @ sampled.c_eta


def simulate(sampled: SampledSystem, inputs, x0=None, keep_states: bool = False) -> OutputSeries:
    """Population output ``y_k = sum_j C_j x_{k, j}`` from a zero initial state."""
    X = propagate(sampled, inputs, x0)
    y = cell_outputs(sampled, X) @ sampled.out_weight
    return OutputSeries(sampled.spec.times[:len(y)], y, X if keep_states else None)


def deterministic_simulate(spec: ModelSpec, n: int, q, inputs) -> OutputSeries:
    """Output of the model at one fixed parameter point."""
    sampled = point_system(spec, n, np.asarray(q, dtype=float).reshape(1, -1))
    return simulate(sampled, inputs)


def simulate_points(spec: ModelSpec, n: int, q, inputs, batch: int = 256) -> np.ndarray:
    """Deterministic outputs for many parameter points, shape ``(k, n_steps + 1)``."""
    q = np.asarray(q, dtype=float)
    q = q.reshape(-1, 1) if q.ndim <= 1 else q
    out = []
    for start in range(0, len(q), batch):
        sampled = point_system(spec, n, q[start:start + batch])
        out.append(cell_outputs(sampled, propagate(sampled, inputs)).T)
    return np.vstack(out)


def impulse_kernels(sampled: SampledSystem, length: int) -> np.ndarray:
    """Markov parameters ``h_i = sum_j C_j Ahat_j^{i-1} Bhat_j`` for ``i = 1..length``."""
    h = np.zeros(length + 1)
    v = sampled.Bhat.copy()
    C = sampled.C
    for i in range(1, length + 1):
        h[i] = np.sum(C * v)
        v = np.einsum("cij,cj->ci", sampled.Ahat, v)
    return h


def population_output(spec: ModelSpec, level, density: TruncatedDensity, inputs) -> OutputSeries:
    """Convenience: assemble, discretize and simulate in one call."""
    return simulate(discretize(assemble(spec, level, density)), inputs)
