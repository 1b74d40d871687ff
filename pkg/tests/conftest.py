import numpy as np
import pytest

from mfglab.geometry import Domain
from mfglab.model import Model
from mfglab.trajopt import OptimalControlProblem


def make_problem(dom, model_spec, n_steps=100, T=1.0, flow=None):
    model = Model.from_config(model_spec, dom.dim)
    return OptimalControlProblem.build(dom, model, flow, T=T, n_steps=n_steps)


DECOUPLED = {"lagrangian": {"kind": "quadratic"}, "coupling": {"form": "zero"}, "terminal": "linear:a=[1]"}
ZERO_COST = {"lagrangian": {"kind": "quadratic"}, "coupling": {"form": "zero"}, "terminal": "const:c=0.7"}
TRAPPED = {"lagrangian": {"kind": "quadratic", "potential": "linear:a=[-2]"}, "coupling": {"form": "zero"},
           "terminal": "zero"}


@pytest.fixture
def interval():
    return Domain.interval(-1.0, 1.0)


@pytest.fixture
def disk():
    return Domain.disk((0.0, 0.0), 1.0)


@pytest.fixture
def ellipse():
    return Domain.ellipse((0.0, 0.0), (2.0, 1.0))


@pytest.fixture
def decoupled(interval):
    return make_problem(interval, DECOUPLED, n_steps=100)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
