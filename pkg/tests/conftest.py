import warnings

import numpy as np
import pytest
from scipy.integrate import IntegrationWarning

from halfspace_rg import flow as fl
from halfspace_rg import testfn as tf

C_ROBIN = 0.7
ROWS = (0, 10, 30, 60)
SPEC4 = tf.TestFunctionSpec.plain(4, (0.5, 0.3, 0.8), (0.5, 1.0, 0.0), c=C_ROBIN)
SPEC4_S3 = tf.TestFunctionSpec.plain(4, (0.2, 0.6), (0.0, 2.0), c=C_ROBIN)
SPEC2 = tf.TestFunctionSpec.plain(2, (0.4,), (0.7,), c=C_ROBIN)


def pytest_configure(config):
    warnings.filterwarnings("ignore", category=IntegrationWarning)


@pytest.fixture(scope="session")
def robin_state():
    cfg = fl.FlowConfig(Lam0=10.0, c=C_ROBIN, rows=ROWS)
    return fl.integrate_flow(cfg, trackers=[("phi", SPEC4), ("phi_s3", SPEC4_S3)])


@pytest.fixture(scope="session")
def two_point_ladder():
    return [fl.integrate_flow(fl.FlowConfig(Lam0=L0, c=C_ROBIN, rows=())) for L0 in (10.0, 100.0, 1000.0)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
