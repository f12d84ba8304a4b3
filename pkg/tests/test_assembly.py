import numpy as np
import pytest
from scipy import linalg

from popdens import DiscretizationLevel, ModelSpec, TruncatedDensity, assemble
from popdens.adjoint import generator_partials
from popdens.sampled import discretize


def element_assembly(n, robin):
    """Global spatial matrices from 2x2 element matrices, Dirichlet row dropped after."""
    h = 1.0 / n
    Me = h / 6 * np.array([[2.0, 1.0], [1.0, 2.0]])
    Ke = 1 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
    M = np.zeros((n + 1, n + 1))
    K = np.zeros((n + 1, n + 1))
    for e in range(n):
        for a in range(2):
            for b in range(2):
                M[e + a, e + b] += Me[a, b]
                K[e + a, e + b] += Ke[a, b]
    Kb = np.zeros_like(K)
    if robin:
        Kb[0, 0] = 1.0
        return M, K, Kb
    return M[1:, 1:], K[1:, 1:], Kb[1:, 1:]


def brute_force(spec, level, d):
    robin = spec.bc.value == "robin_neumann"
    Me, Kd, Kb = element_assembly(level.n, robin)
    dof = len(Me)
    lo, hi = d.lower, d.upper
    edges = [np.linspace(lo[i], hi[i], c + 1) for i, c in enumerate(level.cells)]
    cells = [np.array(c) for c in np.ndindex(*level.cells)]
    mass = np.array([d.cell_mass([(edges[a][c[a]], edges[a][c[a] + 1]) for a in range(d.dim)])
                     for c in cells])
    first = np.array([[d.cell_first_moment([(edges[a][c[a]], edges[a][c[a] + 1])
                                            for a in range(d.dim)], ax) for ax in range(d.dim)]
                      for c in cells])
    first = first / mass.sum()
    mass = mass / mass.sum()
    J = len(cells)
    M = np.zeros((J * dof, J * dof))
    K = np.zeros_like(M)
    B = np.zeros(J * dof)
    C = np.zeros(J * dof)
    b = np.zeros(dof)
    b[-1] = 1.0
    c = np.zeros(dof)
    x = spec.eta0 * level.n
    i = min(int(x), level.n - 1)
    full = np.zeros(level.n + 1)
    full[i], full[i + 1] = 1 - (x - i), x - i
    c = full if robin else full[1:]
    for j in range(J):
        s = slice(j * dof, (j + 1) * dof)
        M[s, s] = mass[j] * Me
        K[s, s] = first[j, 0] * Kd + mass[j] * Kb
        B[s] = (first[j, 1] if robin else mass[j]) * b
        C[s] = mass[j] * c
    return M, K, B, C


CASES = [
    (ModelSpec(), "uniform", [1.5, 3.0]),
    (ModelSpec(eta0=0.6), "exponential", [7.0, 0.6]),
    (ModelSpec(), "normal", [0.5, 6.0, 2.5, 0.8]),
    (ModelSpec(bc="robin_neumann", eta0=0.0), "bivariate_normal",
     [1.0, 9.0, 0.5, 7.0, 4.0, 3.5, 1.5, 0.6, 1.1]),
]


@pytest.mark.parametrize("spec, fam, rho", CASES)
@pytest.mark.parametrize("n", [2, 3, 4])
@pytest.mark.parametrize("m", [1, 2, 4])
def test_blocked_equals_dense_brute_force(spec, fam, rho, n, m):
    d = TruncatedDensity.from_rho(fam, rho)
    level = DiscretizationLevel(n, (m,) * d.dim)
    got = assemble(spec, level, d).dense()
    for g, r, name in zip(got, brute_force(spec, level, d), "MKBC"):
        assert np.abs(g - r).max() <= 1e-14 * max(1.0, np.abs(r).max()), name


@pytest.mark.parametrize("spec, fam, rho", CASES)
def test_bhat_matches_time_quadrature(spec, fam, rho):
    d = TruncatedDensity.from_rho(fam, rho)
    s = discretize(assemble(spec, (4,) + (3,) * d.dim, d))
    x, w = np.polynomial.legendre.leggauss(64)
    t = 0.5 * s.tau * (x + 1)
    for j in range(s.n_cells):
        integral = sum(wk * linalg.expm(s.A[j] * tk) @ s.input_operator[j]
                       for tk, wk in zip(t, 0.5 * s.tau * w))
        np.testing.assert_allclose(s.Bhat[j], integral, atol=1e-10, rtol=0)
        np.testing.assert_allclose(s.Ahat[j], linalg.expm(s.A[j] * s.tau), atol=1e-13)


@pytest.mark.parametrize("spec, fam, rho", CASES)
def test_generator_is_minus_minv_k(spec, fam, rho):
    d = TruncatedDensity.from_rho(fam, rho)
    g = assemble(spec, (4,) + (3,) * d.dim, d)
    s = discretize(g)
    np.testing.assert_allclose(s.A, -np.linalg.solve(g.M, g.K), atol=1e-10)
    np.testing.assert_allclose(s.input_operator, np.linalg.solve(g.M, g.B[..., None])[..., 0],
                               atol=1e-10)


@pytest.mark.parametrize("spec, fam, rho", CASES)
def test_factored_partials_match_direct_solves(spec, fam, rho):
    from popdens.adjoint import sensitivity_blocks
    from popdens.expm import expm_sensitivity

    d = TruncatedDensity.from_rho(fam, rho)
    g = assemble(spec, (4,) + (3,) * d.dim, d)
    s = discretize(g)
    sens = sensitivity_blocks(g, s)
    dA = generator_partials(g)
    for k in range(d.n_params):
        _, psi = expm_sensitivity(s.A, dA[k], s.tau)
        np.testing.assert_allclose(sens.dAhat(k), psi, atol=1e-10)


def test_level_validation(dn_spec):
    d = TruncatedDensity.from_rho("uniform", [2, 4])
    with pytest.raises(ValueError):
        assemble(dn_spec, (4, 4, 4), d)
    with pytest.raises(ValueError):
        assemble(ModelSpec(bc="robin_neumann"), (4, 4), d)
    with pytest.raises(ValueError):
        DiscretizationLevel(1, (4,))
    assert DiscretizationLevel.coerce({"n": 8, "cells": [4, 2]}).as_tuple() == (8, 4, 2)


def test_cell_major_ordering(dn_spec):
    d = TruncatedDensity.from_rho("uniform", [2, 4])
    M, *_ = assemble(dn_spec, (3, 2), d).dense()
    dof = 3
    assert np.all(M[:dof, dof:] == 0) and np.all(M[dof:, :dof] == 0)
    np.testing.assert_allclose(M[:dof, :dof], M[dof:, dof:])
