import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sharptail.instanton import InstantonConfig, solve_instanton
from sharptail.problems import make_model2d, make_ou

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def model2d():
    return make_model2d()


@pytest.fixture(scope="session")
def ou():
    return make_ou(1.0, 1.0)


@pytest.fixture(scope="session")
def inst2d_small(model2d):
    """Model instanton at z=3 on a 50-step Heun grid (dense-oracle size)."""
    return solve_instanton(model2d, InstantonConfig(3.0, n_t=50, scheme="rk2_if"))


@pytest.fixture(scope="session")
def inst2d_rk2(model2d):
    return solve_instanton(model2d, InstantonConfig(3.0, n_t=500, scheme="rk2_if"))


@pytest.fixture(scope="session")
def inst2d_euler(model2d):
    """The reference discretization: integrating-factor Euler, dt = 5e-4."""
    return solve_instanton(model2d, InstantonConfig(3.0, n_t=2000, scheme="euler_if"))


@pytest.fixture(scope="session")
def inst_ou(ou):
    return solve_instanton(ou, InstantonConfig(1.0, n_t=1000, scheme="rk2_if"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance_line():
    """Record the one-line PASS/FAIL verdict for an acceptance criterion."""
    def record(num, ok, text):
        verdict = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {num:>2}: {verdict:<17} {text}"
        _ACCEPTANCE_LINES[num] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[k])
