import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qfluct.algebra import Interval, LocalOperator

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_matrix(rng, dim, hermitian=False, scale=1.0):
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    if hermitian:
        a = (a + a.conj().T) / 2
    return scale * a


def random_local(rng, lo, hi, hermitian=True, d=2, unit_norm=False):
    m = random_matrix(rng, d ** (hi - lo + 1), hermitian)
    if unit_norm:
        m /= np.linalg.norm(m, 2)
    return LocalOperator(Interval(lo, hi), m, d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one PASS/FAIL line per acceptance criterion in the terminal summary ------------------

_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, rep in _criteria.items():
        name = nodeid.split("::")[-1].removeprefix("test_criterion_")
        detail = ", ".join(f"{k}={v}" for k, v in rep.user_properties)
        terminalreporter.write_line(f"{'PASS' if rep.passed else 'FAIL'}  {name}  {detail}".rstrip())
