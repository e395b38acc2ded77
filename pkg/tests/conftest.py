import numpy as np
import pytest

from memextract.nn import Mlp


def perturb(net: Mlp, rng, scale=0.3) -> Mlp:
    """Move every parameter off its initial value so zero-initialised parts get exercised."""
    for k in net.params:
        net.params[k] = net.params[k] + scale * rng.standard_normal(net.params[k].shape)
    return net


def fd_rel_error(f, array, analytic, h=1e-5) -> float:
    """Worst relative error of ``analytic`` against central differences of scalar ``f``."""
    worst = 0.0
    for i in np.ndindex(array.shape):
        orig = array[i]
        array[i] = orig + h
        up = f()
        array[i] = orig - h
        down = f()
        array[i] = orig
        fd = (up - down) / (2 * h)
        denom = max(abs(fd), abs(analytic[i]), 1e-6)
        worst = max(worst, abs(fd - analytic[i]) / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed after the run so they survive output capture
ACCEPTANCE_VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_VERDICTS):
        terminalreporter.write_line(ACCEPTANCE_VERDICTS[n])
