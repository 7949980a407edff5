import math

import numpy as np
import pytest

from spde_stab import EigenBasis, calibrate_spectral_constant, parse_region

# Filled by test_acceptance; printed once at the end of the session.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def half_setup():
    """Basis on (0, pi) with M=12, region (0, pi/2) and its calibration on {1,...,36}."""
    basis = EigenBasis.on_interval(math.pi, 12)
    region = parse_region("0-pi/2")
    cal = calibrate_spectral_constant(region, basis, [1, 4, 9, 16, 25, 36])
    return basis, region, cal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
