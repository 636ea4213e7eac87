import numpy as np
import pytest

from sfac.mdp import TabularMdp


def random_env(rng, n_states=4, n_actions=2, gamma=0.9, reward_bound=1.0):
    P = rng.random((n_states, n_actions, n_states)) + 0.05
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-reward_bound, reward_bound, (n_states, n_actions, n_states))
    b = rng.random(n_states) + 0.05
    return TabularMdp(P, R, gamma, b / b.sum(), reward_bound=reward_bound)


def random_policy(rng, n_states, n_actions):
    pi = rng.random((n_states, n_actions)) + 0.05
    return pi / pi.sum(axis=1, keepdims=True)


def eig_stationary(P):
    """Independent oracle: left Perron eigenvector via a full eigendecomposition."""
    w, v = np.linalg.eig(P.T)
    vec = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return vec / vec.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[num])
