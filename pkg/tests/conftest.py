import numpy as np
import pytest

from bridge_rl.mdp import TabularMDP, build_gridworld, build_star_mdp


def random_mdp(rng, n_states, n_actions, horizon, sparse=False):
    p = rng.random((n_states, n_actions, n_states))
    if sparse:
        p *= rng.random(p.shape) < 0.6
        p[..., 0] += 1e-3
    p /= p.sum(axis=-1, keepdims=True)
    d0 = rng.random(n_states)
    d0 /= d0.sum()
    return TabularMDP(p, d0, rng.normal(size=n_states), horizon, "random")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def star():
    return build_star_mdp()


@pytest.fixture(scope="session")
def grid():
    return build_gridworld()


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    number = getattr(item.function, "criterion", None)
    if number is None or call.when != "call":
        return
    status = "PASS" if call.excinfo is None else "FAIL"
    ACCEPTANCE[number] = (status, item.function.criterion_title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
