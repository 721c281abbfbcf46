import numpy as np
import pytest

from iql_lab.errors import ParameterError, UsageError, ValidationError
from iql_lab.mdp import (
    ACTIONS,
    UMAZE_CELLS,
    TabularMdp,
    TabularPolicy,
    make_grid_mdp,
    make_random_mdp,
    make_umaze,
    rollout,
    step,
    validate,
)
from iql_lab.oracle import policy_return

from conftest import optimal_policy

UP, DOWN, LEFT, RIGHT = (ACTIONS.index(a) for a in ("up", "down", "left", "right"))
START, GOAL = 0, UMAZE_CELLS.index((2, 0))


def _with(mdp, **fields):
    d = mdp.to_dict()
    d.update(fields)
    return d


def test_umaze_shape_and_reward_placement(maze):
    assert (maze.n_states, maze.n_actions) == (7, 4)
    assert maze.initial_dist[START] == 1.0
    assert maze.terminal.tolist() == [s == GOAL for s in range(7)]
    # Reward is the chance of entering the goal times 10, so only pairs that
    # can reach (2,0) carry any.
    entering = maze.transitions[:, :, GOAL] > 0
    entering[GOAL] = False
    assert np.all((maze.rewards != 0) == entering)
    np.testing.assert_allclose(maze.rewards, 10.0 * np.where(entering, maze.transitions[:, :, GOAL], 0))


def test_noise_free_maze_is_deterministic(maze0):
    assert np.all(np.isin(maze0.transitions, (0.0, 1.0)))
    assert np.all(maze0.transitions.sum(axis=2) == 1.0)
    assert set(np.unique(maze0.rewards)) == {0.0, 10.0}


def test_blocked_move_stay_probability(maze):
    # At (0,0) only "up" leaves the cell: down and left exit the grid and
    # (1,0) is a wall, so 3 of the 4 random actions also stay put.
    cells = set(UMAZE_CELLS)
    stays = sum((0 + dx, 0 + dy) not in cells for dx, dy in ((0, 1), (0, -1), (-1, 0), (1, 0)))
    assert stays == 3
    expected = 0.75 + 0.25 * stays / 4
    assert maze.transitions[START, RIGHT, START] == pytest.approx(expected)


def test_random_state_noise_mode():
    mdp = make_umaze(0.25, noise_mode="random_state")
    assert validate(mdp) == []
    assert mdp.transitions[START, UP, 1] == pytest.approx(0.75 + 0.25 / 7)
    assert mdp.transitions[START, UP, GOAL] == pytest.approx(0.25 / 7)


@pytest.mark.parametrize("noise,discount", [(-0.1, 0.9), (1.0, 0.9), (0.1, 1.0), (0.1, -0.5)])
def test_umaze_rejects_bad_parameters(noise, discount):
    with pytest.raises(ParameterError):
        make_umaze(noise, 10.0, discount)


def test_grid_mdp_rejects_unknown_noise_mode():
    with pytest.raises(ParameterError):
        make_grid_mdp(UMAZE_CELLS, 0, 6, noise_mode="teleport")


def test_random_mdp_determinism_and_validity():
    a, b, c = make_random_mdp(10, 4, 1), make_random_mdp(10, 4, 1), make_random_mdp(10, 4, 2)
    assert np.array_equal(a.transitions, b.transitions) and np.array_equal(a.rewards, b.rewards)
    assert a == b
    assert not np.array_equal(a.transitions, c.transitions)
    assert validate(a) == []


def test_every_constructed_mdp_validates(maze, maze0):
    for mdp in (maze, maze0, make_umaze(0.5, 1.0, 0.0), *(make_random_mdp(5, 3, s) for s in range(5))):
        assert validate(mdp) == []


def test_validate_reports_short_row(maze):
    P = maze.transitions.copy()
    P[2, 1] *= 0.9
    bad = TabularMdp(P, maze.rewards, maze.discount, maze.initial_dist, maze.terminal)
    problems = validate(bad)
    assert len(problems) == 1 and "(2, 1)" in problems[0]


def test_validate_reports_negative_entry(maze):
    P = maze.transitions.copy()
    P[3, 2, 0] -= 0.1
    P[3, 2, 1] += 0.1
    problems = validate(TabularMdp(P, maze.rewards, maze.discount, maze.initial_dist, maze.terminal))
    assert problems == [f"negative probability P[3][2][0] = {P[3, 2, 0]}"]


def test_validate_reports_terminal_and_initial_defects(maze):
    R = maze.rewards.copy()
    R[GOAL, 0] = 1.0
    p0 = maze.initial_dist * 0.5
    problems = validate(TabularMdp(maze.transitions, R, maze.discount, p0, maze.terminal))
    assert any("terminal" in p for p in problems)
    assert any("initial" in p for p in problems)


def test_json_round_trip_and_rejects_invalid(maze):
    again = TabularMdp.from_json(maze.to_json())
    assert again == maze and again.to_json() == maze.to_json()
    with pytest.raises(ValidationError):
        TabularMdp.from_dict(_with(maze, discount=1.5))


def test_arrays_are_read_only(maze):
    with pytest.raises(ValueError):
        maze.transitions[0, 0, 0] = 0.5


def test_step_deterministic_cases(maze0, rng):
    assert step(maze0, START, UP, rng) == (1, 0.0, False)
    penultimate = UMAZE_CELLS.index((2, 1))
    assert step(maze0, penultimate, DOWN, rng) == (GOAL, 10.0, True)


def test_step_from_terminal_is_usage_error(maze, rng):
    with pytest.raises(UsageError):
        step(maze, GOAL, UP, rng)


def test_step_frequencies_match_row(maze):
    rng = np.random.default_rng(0)
    n = 100_000
    s, a = UMAZE_CELLS.index((1, 2)), DOWN
    counts = np.bincount([step(maze, s, a, rng)[0] for _ in range(n)], minlength=7)
    p = maze.transitions[s, a]
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 3 * se + 1e-12)


def test_optimal_rollout_noise_free(maze0, rng):
    traj = rollout(maze0, optimal_policy(maze0), rng, max_steps=100)
    assert len(traj) == 6 and traj.terminated and not traj.truncated
    assert traj.next_states[-1] == GOAL
    assert traj.discounted_return(0.9) == pytest.approx(10 * 0.9**5)


def test_rollout_single_step_truncates(maze, rng):
    traj = rollout(maze, TabularPolicy.uniform(7, 4), rng, max_steps=1)
    assert len(traj) == 1 and traj.truncated and not traj.terminated


def test_rollout_is_reproducible(maze):
    pol = TabularPolicy.uniform(7, 4)
    a = rollout(maze, pol, np.random.default_rng(5), 50)
    b = rollout(maze, pol, np.random.default_rng(5), 50)
    assert a == b


def test_trajectory_chain_invariant(maze, rng):
    pol = TabularPolicy.uniform(7, 4)
    for _ in range(50):
        t = rollout(maze, pol, rng, 30)
        assert t.next_states[:-1] == t.states[1:]
        assert not (t.terminated and t.truncated)


def test_monte_carlo_return_matches_exact(maze):
    pol = TabularPolicy.uniform(7, 4)
    rng = np.random.default_rng(1)
    # The uniform walk rarely lasts 300 steps; the tail weight is below 0.9**300.
    rets = np.array([rollout(maze, pol, rng, 300).discounted_return(0.9) for _ in range(10_000)])
    se = rets.std(ddof=1) / np.sqrt(rets.size)
    assert abs(rets.mean() - policy_return(maze, pol)) <= 3 * se


def test_policy_validation():
    with pytest.raises(ParameterError):
        TabularPolicy(np.array([[0.5, 0.6]]))
    with pytest.raises(ParameterError):
        TabularPolicy(np.array([0.5, 0.5]))
    pol = TabularPolicy.deterministic([1, 0], 3)
    assert pol.probs.tolist() == [[0, 1, 0], [1, 0, 0]]
