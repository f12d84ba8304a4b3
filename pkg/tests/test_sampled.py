import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from popdens import (ModelSpec, TruncatedDensity, assemble, discretize, population_output,
                     simulate, simulate_points, windowed_abs_cos)
from popdens.estimator import random_feasible
from popdens.fem1d import spatial_mass
from popdens.sampled import (AssemblyDegenerateError, deterministic_simulate, impulse_kernels,
                             point_system, zoh_input)

from conftest import TRUTHS, spec_for

FAMILIES = ["uniform", "exponential", "normal", "bivariate_normal"]


def random_system(seed, n=5, m=4):
    r = np.random.default_rng(seed)
    fam = FAMILIES[seed % 4]
    d = TruncatedDensity.from_rho(fam, random_feasible(fam, r, 1)[0])
    return discretize(assemble(spec_for(fam), (n,) + (m,) * d.dim, d)), r


@given(st.integers(0, 10_000))
def test_linearity(seed):
    s, r = random_system(seed)
    u1, u2 = r.standard_normal((2, s.n_steps))
    a, b = r.standard_normal(2)
    y = simulate(s, a * u1 + b * u2).values
    ref = a * simulate(s, u1).values + b * simulate(s, u2).values
    assert np.abs(y - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


@given(st.integers(0, 10_000), st.integers(0, 199))
def test_causality(seed, k):
    s, r = random_system(seed)
    u = r.standard_normal(s.n_steps)
    v = u.copy()
    v[k:] = r.standard_normal(s.n_steps - k)
    # y_j depends on u_0..u_{j-1} only
    np.testing.assert_array_equal(simulate(s, u).values[:k + 1], simulate(s, v).values[:k + 1])


@given(st.integers(0, 10_000))
def test_dissipativity(seed):
    s, r = random_system(seed)
    assert np.all(np.abs(np.linalg.eigvals(s.Ahat)) < 1.0)
    # the free response of every block decays in the mass-weighted energy norm
    M = spatial_mass(s.system.mesh)
    x = r.standard_normal((s.n_cells, s.dof))
    x1 = np.einsum("cij,cj->ci", s.Ahat, x)
    e0 = np.einsum("ci,ij,cj->c", x, M, x)
    e1 = np.einsum("ci,ij,cj->c", x1, M, x1)
    assert np.all(e1 <= e0 * (1 + 1e-12))
    assert np.all(simulate(s, np.zeros(s.n_steps)).values == 0.0)


@pytest.mark.parametrize("fam", FAMILIES)
def test_impulse_kernel_convolution_reproduces_simulate(fam):
    spec = spec_for(fam)
    d = TruncatedDensity.from_rho(fam, TRUTHS[fam])
    s = discretize(assemble(spec, (16,) + (8,) * d.dim, d))
    u = np.random.default_rng(4).standard_normal(s.n_steps)
    y = simulate(s, u).values
    h = impulse_kernels(s, s.n_steps)
    conv = np.array([h[1:k + 1] @ u[k - 1::-1] if k else 0.0 for k in range(s.n_steps + 1)])
    assert np.abs(conv - y).max() <= 1e-10


# partitions fine enough that cell averaging is below the Monte Carlo error; the
# exponential output varies sharply for q near 0 where its density is largest
MC_CELLS = {"uniform": (64,), "normal": (512,), "exponential": (16384,),
            "bivariate_normal": (32, 32)}


@pytest.mark.parametrize("fam", FAMILIES)
def test_population_output_matches_monte_carlo(fam):
    spec = spec_for(fam)
    u = windowed_abs_cos(spec)
    d = TruncatedDensity.from_rho(fam, TRUTHS[fam])
    y = population_output(spec, (8,) + MC_CELLS[fam], d, u).values
    ys = simulate_points(spec, 8, d.sample(10_000, 0), u)
    mean = ys.mean(axis=0)
    se = ys.std(axis=0, ddof=1) / np.sqrt(len(ys))
    # the absolute floor only matters where outputs have decayed to round-off
    tol = 3 * se + 1e-12 * np.abs(mean).max()
    assert np.all(np.abs(y - mean) <= tol)


def test_point_mass_limit(dn_spec, u_dn):
    # a narrow uniform behaves like the deterministic model at its centre
    d = TruncatedDensity.from_rho("uniform", [3.0 - 1e-4, 3.0 + 1e-4])
    y = population_output(dn_spec, (8, 1), d, u_dn).values
    np.testing.assert_allclose(y, deterministic_simulate(dn_spec, 8, 3.0, u_dn).values,
                               atol=1e-12)


def test_point_system_batches(rn_spec):
    q = np.array([[1.0, 2.0], [3.0, 0.5], [7.0, 1.0]])
    u = windowed_abs_cos(rn_spec)
    many = simulate_points(rn_spec, 6, q, u, batch=2)
    for row, qi in zip(many, q):
        np.testing.assert_allclose(row, deterministic_simulate(rn_spec, 6, qi, u).values)
    # the output is linear in the input gain
    np.testing.assert_allclose(simulate_points(rn_spec, 6, [[1.0, 4.0]], u),
                               4 * simulate_points(rn_spec, 6, [[1.0, 1.0]], u))


def test_point_system_validation(dn_spec):
    with pytest.raises(ValueError):
        point_system(dn_spec, 4, [[1.0, 2.0]])
    with pytest.raises(ValueError):
        point_system(dn_spec, 4, [0.0])


def test_input_length_checked(dn_spec):
    s = point_system(dn_spec, 4, [1.0])
    with pytest.raises(ValueError):
        simulate(s, np.zeros(5))


def test_zoh_input_singular_generator():
    A = np.zeros((1, 3, 3))
    Ahat = np.eye(3)[None]
    b = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(zoh_input(A, Ahat, b, 0.1), 0.1 * b)


def test_non_finite_weights_raise(dn_spec):
    from popdens.fem1d import SpatialMesh
    from popdens.sampled import _build

    with pytest.raises(AssemblyDegenerateError):
        _build(dn_spec, SpatialMesh(4), np.array([np.nan]), np.ones(1), np.ones(1), 0.1)


def test_empty_cells_do_not_reach_the_output(dn_spec, u_dn):
    # most cells of a narrow normal on a wide support carry no mass
    d = TruncatedDensity.from_rho("normal", [0.01, 8.0, 4.0, 0.05])
    s = discretize(assemble(dn_spec, (8, 64), d))
    assert np.all(np.isfinite(s.Ahat)) and np.any(s.out_weight == 0)
    assert np.all(np.isfinite(simulate(s, u_dn).values))


@pytest.mark.parametrize("fam", ["uniform", "normal"])
def test_trotter_kato_doublings_decrease(fam, dn_spec, u_dn):
    d = TruncatedDensity.from_rho(fam, TRUTHS[fam])
    ys = [population_output(dn_spec, (n, n), d, u_dn).values for n in (4, 8, 16, 32)]
    diffs = [np.abs(b - a).max() for a, b in zip(ys, ys[1:])]
    assert diffs[0] > diffs[1] > diffs[2]
