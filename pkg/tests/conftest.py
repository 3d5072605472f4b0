import numpy as np
import pytest

from kinetic_jko.core import DomainSpec, ParticleEnsemble


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _make(x, v, lf=None, domain=None):
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    x = x[:, None] if x.ndim == 1 else x
    v = v[:, None] if v.ndim == 1 else v
    lf = np.zeros(x.shape[0]) if lf is None else lf
    return ParticleEnsemble(x, v, lf, domain or DomainSpec(x.shape[1], v.shape[1]))


@pytest.fixture
def make_ensemble():
    return _make


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
