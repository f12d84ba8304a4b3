"""Exact gradients of the output least-squares objective.

The gradient is the exact derivative of the implemented recurrence
(discretize, then differentiate). The backward recursion is::

    v_k     = 2 C^T (y_k - ytilde_k)
    z_n     = v_n
    z_{k-1} = Ahat^T z_k + v_{k-1}

and::

    dJ = sum_{k=1}^{n} z_k . (dAhat x_{k-1} + dBhat u_{k-1})
       + sum_{k=0}^{n} 2 (y_k - ytilde_k) dC x_k

Per cell ``dA_j/drho = -(dqbar_j/drho) G``, so the derivative of
``Ahat_j`` in every ``rho`` entry is a multiple of one matrix ``Psi_j``,
read off a single block-triangular exponential per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import GalerkinPartials, GalerkinSystem
from .expm import expm_sensitivity
from .sampled import COND_LIMIT, TINY_MASS, SampledSystem, cell_outputs, propagate


@dataclass(frozen=True)
class SensitivityTensor:
    """``d(Ahat, Bhat, C)/d rho`` in factored per-cell form.

    ``psi[j]`` is ``dAhat_j/dqbar_j``; ``bhat_q[j]`` and ``bhat_g[j]`` are the
    derivatives of ``Bhat_j`` in the conditional diffusivity and gain. The
    chain coefficients ``dqbar``, ``dgain``, ``dout`` have shape
    ``(n_cells, n_params)``.
    """

    psi: np.ndarray
    bhat_q: np.ndarray
    bhat_g: np.ndarray
    dqbar: np.ndarray
    dgain: np.ndarray
    dout: np.ndarray
    c_eta: np.ndarray

    @property
    def n_params(self) -> int:
        return self.dqbar.shape[1]

    def dAhat(self, k: int) -> np.ndarray:
        return self.dqbar[:, k, None, None] * self.psi

    def dBhat(self, k: int) -> np.ndarray:
        return self.dqbar[:, k, None] * self.bhat_q + self.dgain[:, k, None] * self.bhat_g

    def dC(self, k: int) -> np.ndarray:
        return self.dout[:, k, None] * self.c_eta


def generator_partials(system: GalerkinSystem, partials: GalerkinPartials | None = None):
    """``dA_j/drho_k = -M_j^{-1} dK_j + M_j^{-1} dM_j M_j^{-1} K_j`` by direct solves.

    Shape ``(n_params, n_cells, dof, dof)``. Only valid when every cell has
    positive mass; used to cross-check the factored form.
    """
    p = system.partials if partials is None else partials
    M, K = system.M, system.K
    MinvK = np.linalg.solve(M, K)
    dK, dM = p.dK, p.dM
    return -np.linalg.solve(M[None], dK) + np.linalg.solve(M[None], dM @ MinvK[None])


def _weight_partials(system: GalerkinSystem, sampled: SampledSystem, partials: GalerkinPartials):
    mass = system.cell_mass
    ok = (mass > TINY_MASS)[:, None]
    safe = np.where(ok, mass[:, None], 1.0)
    dqbar = np.where(ok, (partials.dstiffness - sampled.qbar[:, None] * partials.dmass) / safe, 0.0)
    if system.spec.n_random == 2:
        dgain = np.where(ok, (partials.dinput - sampled.gain[:, None] * partials.dmass) / safe, 0.0)
    else:
        dgain = np.zeros_like(dqbar)
    return dqbar, dgain


def sensitivity_blocks(system: GalerkinSystem, sampled: SampledSystem,
                       partials: GalerkinPartials | None = None, tau: float | None = None
                       ) -> SensitivityTensor:
    """Factored derivatives of the sampled operators in every ``rho`` entry."""
    partials = system.partials if partials is None else partials
    tau = sampled.tau if tau is None else tau
    dqbar, dgain = _weight_partials(system, sampled, partials)
    A, Ahat, G = sampled.A, sampled.Ahat, sampled.G
    n_cells, d = sampled.n_cells, sampled.dof
    b = sampled.input_operator
    bt = np.broadcast_to(sampled.b_tilde, b.shape)

    _, psi = expm_sensitivity(A, np.broadcast_to(-G, A.shape), tau)
    bhat_q = np.empty((n_cells, d))
    bhat_g = np.empty((n_cells, d))
    cond = np.linalg.cond(A)
    ok = np.isfinite(cond) & (cond < COND_LIMIT)
    if ok.any():
        # Bhat = (Ahat - I) A^{-1} b, differentiated by the product rule
        Aok = A[ok]
        E = Ahat[ok] - np.eye(d)
        y = np.linalg.solve(Aok, b[ok][..., None])
        Gy = np.einsum("ab,cbk->cak", G, y)
        bhat_q[ok] = (psi[ok] @ y + E @ np.linalg.solve(Aok, Gy))[..., 0]
        bhat_g[ok] = (E @ np.linalg.solve(Aok, bt[ok][..., None]))[..., 0]
    if (~ok).any():
        bad = np.flatnonzero(~ok)
        aug = np.zeros((len(bad), d + 1, d + 1))
        aug[:, :d, :d] = A[bad]
        aug[:, :d, d] = b[bad]
        dq = np.zeros_like(aug)
        dq[:, :d, :d] = -G
        dg = np.zeros_like(aug)
        dg[:, :d, d] = bt[bad]
        _, Pq = expm_sensitivity(aug, dq, tau)
        _, Pg = expm_sensitivity(aug, dg, tau)
        bhat_q[bad] = Pq[:, :d, d]
        bhat_g[bad] = Pg[:, :d, d]
    return SensitivityTensor(psi=psi, bhat_q=bhat_q, bhat_g=bhat_g, dqbar=dqbar,
                             dgain=dgain, dout=partials.dmass.copy(), c_eta=sampled.c_eta)


@dataclass(frozen=True)
class AdjointRun:
    objective: float
    gradient: np.ndarray
    adjoints: list
    residuals: list


def _check_lengths(sampled: SampledSystem, dataset, states):
    n = sampled.n_steps
    if dataset.inputs.size != n or dataset.outputs.size != n + 1:
        raise ValueError(f"dataset length {dataset.inputs.size} does not match the model horizon ({n} steps)")
    if states is not None and states.shape[0] != n + 1:
        raise ValueError("trajectory length does not match the dataset")


def gradient(sampled: SampledSystem, sens: SensitivityTensor, datasets,
             trajectories=None, keep_adjoints: bool = False) -> AdjointRun:
    """Objective and adjoint gradient summed over ``datasets``.

    ``trajectories`` (one state array per dataset, from
    :func:`popdens.sampled.propagate`) are recomputed when omitted.
    """
    datasets = list(datasets)
    if trajectories is None:
        trajectories = [propagate(sampled, ds.inputs) for ds in datasets]
    C = sampled.C
    Ahat_T = np.swapaxes(sampled.Ahat, 1, 2)
    J = 0.0
    g = np.zeros(sens.n_params)
    adj, res = [], []
    for ds, X in zip(datasets, trajectories):
        _check_lengths(sampled, ds, X)
        yc = cell_outputs(sampled, X)
        r = yc @ sampled.out_weight - ds.outputs
        J += float(r @ r)
        n = ds.n_steps
        Z = np.empty_like(X)
        Z[n] = 2.0 * r[n] * C
        for k in range(n, 0, -1):
            Z[k - 1] = np.einsum("cij,cj->ci", Ahat_T, Z[k]) + 2.0 * r[k - 1] * C
        W = np.einsum("kci,kcj->cij", Z[1:], X[:-1])
        zu = np.einsum("kci,k->ci", Z[1:], ds.inputs)
        cx = 2.0 * (r @ yc)
        per_q = np.einsum("cij,cij->c", sens.psi, W) + np.einsum("ci,ci->c", sens.bhat_q, zu)
        per_g = np.einsum("ci,ci->c", sens.bhat_g, zu)
        g += per_q @ sens.dqbar + per_g @ sens.dgain + cx @ sens.dout
        if keep_adjoints:
            adj.append(Z)
            res.append(r)
    return AdjointRun(J, g, adj, res)


def gradient_forward(sampled: SampledSystem, sens: SensitivityTensor, datasets) -> np.ndarray:
    """Same gradient by forward sensitivity propagation (one pass per ``rho`` entry)."""
    g = np.zeros(sens.n_params)
    C = sampled.C
    for ds in datasets:
        X = propagate(sampled, ds.inputs)
        _check_lengths(sampled, ds, X)
        r = cell_outputs(sampled, X) @ sampled.out_weight - ds.outputs
        for k in range(sens.n_params):
            dA, dB, dC = sens.dAhat(k), sens.dBhat(k), sens.dC(k)
            dX = np.zeros_like(X[0])
            total = 2.0 * r[0] * np.sum(dC * X[0])
            for t in range(ds.n_steps):
                dX = (np.einsum("cij,cj->ci", sampled.Ahat, dX)
                      + np.einsum("cij,cj->ci", dA, X[t]) + dB * ds.inputs[t])
                total += 2.0 * r[t + 1] * (np.sum(C * dX) + np.sum(dC * X[t + 1]))
            g[k] += total
    return g
