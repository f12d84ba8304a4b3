import numpy as np
import pytest

from popdens import (Dataset, ExperimentConfig, ModelSpec, TruncatedDensity,
                     band_coverage_fraction, convergence_sweep, credible_band, generate_data,
                     windowed_abs_cos)
from popdens.estimator import EstimateOptions


def test_windowed_input(dn_spec):
    u = windowed_abs_cos(dn_spec)
    assert u.size == 200
    t = dn_spec.times[:-1]
    np.testing.assert_allclose(u[t <= 2.0], np.abs(np.cos(t[t <= 2.0])))
    assert np.all(u[t > 2.0] == 0.0)
    # t = 2 is a sample instant and belongs to the closed window
    assert u[20] == pytest.approx(abs(np.cos(2.0)))


def test_generate_data_is_seeded_and_recorded(dn_spec):
    cfg = ExperimentConfig(dn_spec, TruncatedDensity.from_rho("uniform", [2, 4]), n_fine=16)
    a, b = generate_data(cfg), generate_data(cfg)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    assert a.meta["seed"] == 0 and a.meta["sampler"] == "iid" and a.outputs[0] == 0.0
    other = generate_data(ExperimentConfig(dn_spec, cfg.truth, n_fine=16, seed=1))
    assert not np.array_equal(a.outputs, other.outputs)


def test_noise_is_added_reproducibly(dn_spec):
    truth = TruncatedDensity.from_rho("uniform", [2, 4])
    clean = generate_data(ExperimentConfig(dn_spec, truth, n_fine=16))
    noisy = generate_data(ExperimentConfig(dn_spec, truth, n_fine=16, noise_std=1e-3))
    r = noisy.outputs - clean.outputs
    assert 5e-4 < r.std() < 2e-3


def test_experiment_config_validation(dn_spec):
    truth = TruncatedDensity.from_rho("uniform", [2, 4])
    with pytest.raises(ValueError):
        ExperimentConfig(dn_spec, truth, sampler="sobol")
    with pytest.raises(ValueError):
        ExperimentConfig(dn_spec, truth, band_coverage=1.0)


def test_sweep_rows_and_warm_start(dn_spec):
    truth = TruncatedDensity.from_rho("uniform", [2, 4])
    cfg = ExperimentConfig(dn_spec, truth, n_fine=32, levels=[(4, 4), (8, 8)],
                           init=np.array([1.0, 6.0]), options=EstimateOptions(max_iter=100))
    sweep = convergence_sweep(cfg)
    rows = sweep.rows()
    assert [r["n"] for r in rows] == [4, 8, "true"]
    assert rows[-1] == {"n": "true", "a": 2.0, "b": 4.0}
    assert sweep.estimates().shape == (2, 2)
    assert all(r["J"] < 1e-5 and r["iterations"] <= 100 for r in rows[:2])
    assert {"m1", "status"} <= set(rows[0])


def test_sweep_records_failed_levels(dn_spec):
    truth = TruncatedDensity.from_rho("uniform", [2, 4])
    cfg = ExperimentConfig(dn_spec, truth, n_fine=16, levels=[(4, 4)], init=np.array([5.0, 1.0]))
    rows = convergence_sweep(cfg).rows()
    assert rows[0]["status"].startswith("failed")


def test_band_structure(dn_spec, u_dn):
    d = TruncatedDensity.from_rho("normal", [0.01, 8, 4, 0.25])
    band = credible_band(dn_spec, (8, 16), d, u_dn, 0.75, 300, seed=3)
    assert np.all(band.lower <= band.upper)
    assert band.samples.shape == (300,)
    assert band.meta["heuristic"] is True
    assert band_coverage_fraction(band, band.sample_outputs) >= 0.75
    with pytest.raises(ValueError):
        credible_band(dn_spec, (8, 16), d, u_dn, 1.5)


def test_coverage_fraction_counts_pairs():
    from popdens.experiments import Band

    band = Band(np.arange(3.0), np.zeros(3), np.zeros(3), np.ones(3), 0.5)
    outs = np.array([[0.5, 2.0, 0.5], [-1.0, 0.5, 0.5]])
    assert band_coverage_fraction(band, outs) == pytest.approx(4 / 6)


def test_point_mass_band_is_degenerate(dn_spec, u_dn):
    d = TruncatedDensity.from_rho("uniform", [3.0, 3.0 + 1e-6])
    band = credible_band(dn_spec, (8, 4), d, u_dn, 0.75, 200, seed=0)
    assert np.max(band.upper - band.lower) < 1e-6
    assert np.max(np.abs(band.mean - 0.5 * (band.upper + band.lower))) < 1e-6


def test_zero_coverage_band_is_the_median(dn_spec, u_dn):
    d = TruncatedDensity.from_rho("uniform", [2, 4])
    band = credible_band(dn_spec, (8, 8), d, u_dn, 0.0, 301, seed=2)
    med = np.median(band.sample_outputs, axis=0)
    np.testing.assert_array_equal(band.lower, med)
    np.testing.assert_array_equal(band.upper, med)


def test_wider_coverage_widens_band(dn_spec, u_dn):
    d = TruncatedDensity.from_rho("normal", [0.01, 8, 4, 0.25])
    narrow = credible_band(dn_spec, (8, 16), d, u_dn, 0.5, 400, seed=5)
    wide = credible_band(dn_spec, (8, 16), d, u_dn, 0.9, 400, seed=5)
    assert np.all(wide.lower <= narrow.lower) and np.all(wide.upper >= narrow.upper)
