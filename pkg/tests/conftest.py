import numpy as np
import pytest

from yopo.dynsys import NetworkSpec, Params, init_params
from yopo.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture
def small_tanh():
    spec = NetworkSpec((4, 6, 5, 3), "tanh", "cross_entropy")
    params = init_params(spec, make_rng(0, "small"))
    params = Params([1.5 * W for W in params.weights], [np.full(b.shape, 0.1) for b in params.biases])
    return spec, params


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """report(criterion, ok, detail): one PASS/FAIL line per criterion, repeated in the terminal summary."""
    def _report(num, ok, detail=""):
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        request.config._acceptance_lines.append(line)
        print(line)
        return ok
    return _report
