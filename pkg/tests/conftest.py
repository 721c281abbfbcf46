import sys

import numpy as np
import pytest

from iql_lab.data import generate_dataset
from iql_lab.mdp import TabularPolicy, make_umaze
from iql_lab.oracle import greedy_policy, value_iteration


def optimal_policy(mdp):
    return greedy_policy(value_iteration(mdp)[1])


def maze_mixture(mdp, seed, n_optimal=1, n_uniform=99, max_steps=100):
    uniform = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    return generate_dataset(
        mdp, [(optimal_policy(mdp), n_optimal), (uniform, n_uniform)], max_steps, seed,
        names=["optimal", "uniform"],
    )


def random_full_support_dataset(mdp, seed, episodes=200, steps=50):
    """Behaviour mixes a random Dirichlet row with uniform, so every action
    keeps probability at least 0.5 / n_actions."""
    rng = np.random.default_rng(seed)
    mu = TabularPolicy(0.5 * rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
                       + 0.5 / mdp.n_actions)
    return generate_dataset(mdp, [(mu, episodes)], steps, seed)


def value_range(mdp):
    return (mdp.rewards.max() - mdp.rewards.min()) / (1.0 - mdp.discount)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def maze():
    return make_umaze(0.25, 10.0, 0.9)


@pytest.fixture(scope="session")
def maze0():
    return make_umaze(0.0, 10.0, 0.9)


@pytest.fixture(scope="session")
def maze_ds(maze):
    return maze_mixture(maze, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
