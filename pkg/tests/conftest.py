import numpy as np
import pytest
from hypothesis import settings

from sinkdrse.ambiguity import SampleSet, SinkhornConfig, feasibility_threshold
from sinkdrse.bench import DisturbanceModel, sample_disturbance
from sinkdrse.sls import LtvSystem, build_sls_operators

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("default")

_ACCEPTANCE = []


def small_system(T=3):
    return LtvSystem.constant([[0.9]], [[1.0, 0.0]], [[1.0]], [[0.0, 0.5]], T)


def small_samples(n_xi, N=10, seed=1):
    return sample_disturbance(DisturbanceModel(), N, n_xi, seed=seed)


@pytest.fixture(scope="session")
def small():
    """n_x = 1, T = 3, N = 10 instance used across modules."""
    sys = small_system(3)
    ops = build_sls_operators(sys)
    return sys, ops, small_samples(ops.n_xi)


@pytest.fixture(scope="session")
def small_cfg(small):
    _, ops, S = small
    base = SinkhornConfig(1e-3, 1.0, np.eye(ops.n_xi))
    return base.replace(theta=2 * feasibility_threshold(S, base))


@pytest.fixture
def report():
    def _report(criterion, passed, detail):
        line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE.append(line)
        print("\n" + line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
