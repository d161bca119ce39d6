import numpy as np
import pytest

from mtdlab.model_core import ExtendedModel, LTIModel, MatrixDistribution


def scalar_extended(A=1.0, B=1.0, C=1.0, At=0.5, Ct=1.0, mu_A=1.0, mu_B=1.0, mu_C=1.0,
                    sA=0.0, sB=0.0, sC=0.0, Q=1e-2, Qt=1e-2, R=1e-2, Rt=1e-2, check=True):
    """One plant state, one auxiliary state, one sensor of each kind."""
    base = LTIModel([[A]], [[B]], [[C]], [[Q]], [[R]], check=False)
    return ExtendedModel(base, [[At]], [[Ct]],
                         MatrixDistribution([mu_A], [[sA]], stream=1),
                         MatrixDistribution([mu_B], [[sB]], stream=2),
                         MatrixDistribution([mu_C], [[sC]], stream=3),
                         [[Qt]], np.diag([Rt, R]), check=check)


def random_extended(rng, n=2, p=1, m=1, nt=2, mt=1, scale=0.3):
    A = rng.standard_normal((n, n))
    A *= 0.8 / max(abs(np.linalg.eigvals(A)))
    At = rng.standard_normal((nt, nt))
    At *= 0.7 / max(abs(np.linalg.eigvals(At)))
    base = LTIModel(A, rng.standard_normal((n, p)), rng.standard_normal((m, n)), 0.01 * np.eye(n),
                    0.01 * np.eye(m), check=False)
    cov = lambda d: scale * np.eye(d)
    return ExtendedModel(base, At, rng.standard_normal((mt, nt)),
                         MatrixDistribution(rng.standard_normal(n), cov(n), stream=1),
                         MatrixDistribution(rng.standard_normal(p), cov(p), stream=2),
                         MatrixDistribution(rng.standard_normal(n), cov(n), stream=3),
                         0.01 * np.eye(nt), 0.01 * np.eye(mt + m))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from experiments import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
