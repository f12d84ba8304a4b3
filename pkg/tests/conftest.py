import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from popdens import ModelSpec, TruncatedDensity, windowed_abs_cos

settings.register_profile("pkg", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")

BIV_TRUTH = [0.01, 30.0, 0.01, 24.0, 12.0, 10.0, 3.0, 1.0, 2.0]

TRUTHS = {
    "uniform": [2.0, 4.0],
    "exponential": [60.0, 1.0 / 3.0],
    "normal": [0.01, 8.0, 4.0, 0.25],
    "bivariate_normal": BIV_TRUTH,
}


def spec_for(family) -> ModelSpec:
    if family == "bivariate_normal":
        return ModelSpec(bc="robin_neumann", eta0=0.0)
    return ModelSpec()


@pytest.fixture
def dn_spec():
    return ModelSpec()


@pytest.fixture
def rn_spec():
    return ModelSpec(bc="robin_neumann", eta0=0.0)


@pytest.fixture
def u_dn(dn_spec):
    return windowed_abs_cos(dn_spec)


@pytest.fixture
def truth():
    return {k: TruncatedDensity.from_rho(k, v) for k, v in TRUTHS.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
