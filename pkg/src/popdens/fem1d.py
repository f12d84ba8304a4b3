"""Linear-spline Galerkin factors for the 1D diffusion operator on [0, 1].

Two boundary configurations are supported:

* ``dirichlet_neumann``: ``x(t, 0) = 0`` and flux input at ``eta = 1``.
  Node 0 is eliminated, leaving ``n`` unknowns.
* ``robin_neumann``: ``q1 x'(t, 0) - x(t, 0) = 0`` and flux input at
  ``eta = 1`` scaled by the gain ``q2``. All ``n + 1`` nodes are kept.

All matrices are dense; meshes here never exceed a few hundred nodes.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np


class BoundaryCondition(str, enum.Enum):
    DIRICHLET_NEUMANN = "dirichlet_neumann"
    ROBIN_NEUMANN = "robin_neumann"


@dataclass(frozen=True)
class ModelSpec:
    """Boundary variant, output location and sampling grid."""

    bc: BoundaryCondition = BoundaryCondition.DIRICHLET_NEUMANN
    eta0: float = 1.0 / 3.0
    tau: float = 0.1
    horizon: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "bc", BoundaryCondition(self.bc))
        if not 0.0 <= self.eta0 <= 1.0:
            raise ValueError(f"eta0 must lie in [0, 1], got {self.eta0}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        steps = self.horizon / self.tau
        if self.horizon <= 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("horizon must be a positive integer multiple of tau")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.tau))

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.n_steps + 1)

    @property
    def n_random(self) -> int:
        """Number of random parameters the model carries (q1, or q1 and q2)."""
        return 2 if self.bc is BoundaryCondition.ROBIN_NEUMANN else 1


@dataclass(frozen=True)
class SpatialMesh:
    n: int
    bc: BoundaryCondition = BoundaryCondition.DIRICHLET_NEUMANN

    def __post_init__(self):
        object.__setattr__(self, "bc", BoundaryCondition(self.bc))
        if self.n < 2:
            raise ValueError("need at least 2 spatial subintervals")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def first_node(self) -> int:
        return 1 if self.bc is BoundaryCondition.DIRICHLET_NEUMANN else 0

    @property
    def dof(self) -> int:
        return self.n + 1 - self.first_node

    @property
    def nodes(self) -> np.ndarray:
        """Coordinates of the nodes carrying unknowns."""
        return np.arange(self.first_node, self.n + 1) / self.n


def _full_tridiag(n: int, diag_interior: float, diag_end: float, off: float) -> np.ndarray:
    d = np.full(n + 1, diag_interior)
    d[0] = d[-1] = diag_end
    return np.diag(d) + np.diag(np.full(n, off), 1) + np.diag(np.full(n, off), -1)


def spatial_mass(mesh: SpatialMesh) -> np.ndarray:
    """Hat-function overlap integrals ``int phi_i phi_k d eta``."""
    h = mesh.h
    M = _full_tridiag(mesh.n, 2 * h / 3, h / 3, h / 6)
    s = mesh.first_node
    return M[s:, s:]


def spatial_stiffness(mesh: SpatialMesh) -> tuple[np.ndarray, np.ndarray]:
    """Stiffness split into the diffusion part and the boundary part.

    Returns ``(K_diff, K_bdry)`` with ``K_diff = int phi_i' phi_k'`` and
    ``K_bdry`` carrying the Robin term ``phi_i(0) phi_k(0)``, which the
    diffusivity does not multiply. ``K_bdry`` is zero for the Dirichlet
    variant.
    """
    h = mesh.h
    K = _full_tridiag(mesh.n, 2 / h, 1 / h, -1 / h)
    s = mesh.first_node
    K = K[s:, s:]
    Kb = np.zeros_like(K)
    if mesh.bc is BoundaryCondition.ROBIN_NEUMANN:
        Kb[0, 0] = 1.0
    return K, Kb


def spatial_input_vector(mesh: SpatialMesh) -> np.ndarray:
    """Point evaluation at ``eta = 1``."""
    b = np.zeros(mesh.dof)
    b[-1] = 1.0
    return b


def spatial_output_vector(mesh: SpatialMesh, eta0: float) -> np.ndarray:
    """Point evaluation of the discrete state at ``eta0``."""
    if not 0.0 <= eta0 <= 1.0:
        raise ValueError(f"eta0 must lie in [0, 1], got {eta0}")
    full = np.zeros(mesh.n + 1)
    x = eta0 * mesh.n
    i = min(int(np.floor(x)), mesh.n - 1)
    t = x - i
    full[i] = 1.0 - t
    full[i + 1] = t
    # snap node coincidences so the other weight is exactly zero
    full[np.abs(full) < 1e-13] = 0.0
    full[np.abs(full - 1.0) < 1e-13] = 1.0
    c = full[mesh.first_node:]
    if not c.any():
        warnings.warn("output location sits on the Dirichlet boundary; output is identically zero",
                      RuntimeWarning, stacklevel=2)
    return c
