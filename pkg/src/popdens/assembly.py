"""Parameter-averaged Galerkin operators on tensor-product bases.

The basis is ``phi_i(eta) * chi_j(q)`` with hat functions in space and
indicator functions of a uniform partition of the current density support
in the parameter. Indicators of distinct cells never overlap, so every
operator is block diagonal with one spatial block per cell::

    M_j = f1_j * M_eta
    K_j = f2_j * K_diff + f1_j * K_bdry
    B_j = w_j  * b_eta          (w_j = f1_j, or the cell moment of q2)
    C_j = f1_j * c_eta

where ``f1_j`` is the cell mass and ``f2_j`` the cell moment of ``q1``.
Global indices are cell-major: ``r = j * dof + i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import block_diag

from .density import CellMoments, TruncatedDensity
from .fem1d import (ModelSpec, SpatialMesh, spatial_input_vector, spatial_mass,
                    spatial_output_vector, spatial_stiffness)


@dataclass(frozen=True)
class DiscretizationLevel:
    """Spatial subintervals ``n`` and per-axis parameter cell counts."""

    n: int
    cells: tuple[int, ...]

    def __post_init__(self):
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "cells", cells)
        if self.n < 2:
            raise ValueError("level needs n >= 2")
        if not cells or min(cells) < 1:
            raise ValueError("every parameter cell count must be >= 1")

    @classmethod
    def coerce(cls, value) -> "DiscretizationLevel":
        """Accept a level, ``(n, m)``, ``(n, m1, m2)`` or ``{"n": .., "cells": ..}``."""
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            return cls(value["n"], tuple(np.atleast_1d(value["cells"])))
        value = tuple(value)
        return cls(value[0], value[1:])

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def label(self) -> str:
        return "n={} m={}".format(self.n, "x".join(map(str, self.cells)))

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n,) + self.cells


@dataclass(frozen=True)
class GalerkinSystem:
    """Assembled block-diagonal population operators for one density."""

    spec: ModelSpec
    level: DiscretizationLevel
    density: TruncatedDensity
    mesh: SpatialMesh
    mass_eta: np.ndarray
    k_diff: np.ndarray
    k_bdry: np.ndarray
    b_eta: np.ndarray
    c_eta: np.ndarray
    moments: CellMoments

    @property
    def n_cells(self) -> int:
        return self.level.n_cells

    @property
    def dof(self) -> int:
        return self.mesh.dof

    # per-cell scalar weights
    @property
    def cell_mass(self) -> np.ndarray:
        return self.moments.mass

    @property
    def stiffness_weight(self) -> np.ndarray:
        return self.moments.first[:, 0]

    @property
    def input_weight(self) -> np.ndarray:
        if self.spec.n_random == 2:
            return self.moments.first[:, 1]
        return self.moments.mass

    # block views
    @property
    def M(self) -> np.ndarray:
        return self.cell_mass[:, None, None] * self.mass_eta

    @property
    def K(self) -> np.ndarray:
        return (self.stiffness_weight[:, None, None] * self.k_diff
                + self.cell_mass[:, None, None] * self.k_bdry)

    @property
    def B(self) -> np.ndarray:
        return self.input_weight[:, None] * self.b_eta

    @property
    def C(self) -> np.ndarray:
        return self.cell_mass[:, None] * self.c_eta

    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Global ``(M, K, B, C)`` with cell-major ordering."""
        return (block_diag(*self.M), block_diag(*self.K),
                self.B.reshape(-1), self.C.reshape(-1))

    @cached_property
    def partials(self) -> "GalerkinPartials":
        return assemble_partials(self)


@dataclass(frozen=True)
class GalerkinPartials:
    """Derivatives of the per-cell weights in every ``rho`` entry.

    Arrays have shape ``(n_cells, n_params)``; the spatial factors do not
    depend on ``rho``.
    """

    system: GalerkinSystem
    dmass: np.ndarray
    dstiffness: np.ndarray
    dinput: np.ndarray

    @property
    def dM(self) -> np.ndarray:
        """``(n_params, n_cells, dof, dof)``."""
        return np.einsum("jk,ab->kjab", self.dmass, self.system.mass_eta)

    @property
    def dK(self) -> np.ndarray:
        s = self.system
        return (np.einsum("jk,ab->kjab", self.dstiffness, s.k_diff)
                + np.einsum("jk,ab->kjab", self.dmass, s.k_bdry))

    @property
    def dB(self) -> np.ndarray:
        return np.einsum("jk,a->kja", self.dinput, self.system.b_eta)

    @property
    def dC(self) -> np.ndarray:
        return np.einsum("jk,a->kja", self.dmass, self.system.c_eta)


def _check_compatible(spec: ModelSpec, density: TruncatedDensity):
    if density.dim != spec.n_random:
        raise ValueError(
            f"{spec.bc.value} needs a {spec.n_random}-parameter density, "
            f"got {density.family.value}")


def assemble(spec: ModelSpec, level, density: TruncatedDensity) -> GalerkinSystem:
    """Assemble the block population system at ``level`` for ``density``."""
    level = DiscretizationLevel.coerce(level)
    _check_compatible(spec, density)
    if len(level.cells) != density.dim:
        raise ValueError(f"level {level.label} has {len(level.cells)} cell axes, "
                         f"density has {density.dim}")
    mesh = SpatialMesh(level.n, spec.bc)
    k_diff, k_bdry = spatial_stiffness(mesh)
    moments = density.partition(level.cells)
    # cells with vanishing mass keep exact-zero weights
    tiny = moments.mass < 1e-300
    if tiny.any():
        moments.mass[tiny] = 0.0
        moments.first[tiny] = 0.0
    return GalerkinSystem(spec=spec, level=level, density=density, mesh=mesh,
                          mass_eta=spatial_mass(mesh), k_diff=k_diff, k_bdry=k_bdry,
                          b_eta=spatial_input_vector(mesh),
                          c_eta=spatial_output_vector(mesh, spec.eta0),
                          moments=moments)


def assemble_partials(system: GalerkinSystem) -> GalerkinPartials:
    cm = system.moments
    dinput = cm.dfirst[:, 1, :] if system.spec.n_random == 2 else cm.dmass
    return GalerkinPartials(system, cm.dmass, cm.dfirst[:, 0, :], dinput)
