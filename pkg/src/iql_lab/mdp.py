"""Finite tabular MDPs: construction, validation, stepping and rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError, UsageError, ValidationError

PROB_ATOL = 1e-9

# Action order for grid MDPs. Cells are (x, y) with y pointing up.
ACTIONS = ("up", "down", "left", "right")
ACTION_DELTAS = ((0, 1), (0, -1), (-1, 0), (1, 0))

UMAZE_CELLS = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0))

NOISE_MODES = ("random_action", "random_state")


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with absorbing, zero-reward terminal states.

    ``rewards[s, a]`` is the expected immediate reward of taking ``a`` in
    ``s``; it is what :func:`step` returns.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal: np.ndarray
    cells: Optional[tuple] = None
    name: str = "mdp"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "transitions", _frozen(self.transitions))
        object.__setattr__(self, "rewards", _frozen(self.rewards))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "terminal", _frozen(self.terminal, dtype=bool))
        object.__setattr__(self, "discount", float(self.discount))
        if self.cells is not None:
            object.__setattr__(
                self, "cells", tuple(tuple(int(v) for v in c) for c in self.cells)
            )
        if self.transitions.ndim != 3:
            raise ParameterError("transitions must be indexed [state][action][next_state]")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.tolist(),
            "cells": None if self.cells is None else [list(c) for c in self.cells],
            "params": self.params,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        try:
            mdp = cls(
                transitions=np.asarray(d["transitions"], dtype=float),
                rewards=np.asarray(d["rewards"], dtype=float),
                discount=d["discount"],
                initial_dist=np.asarray(d["initial_dist"], dtype=float),
                terminal=np.asarray(d["terminal"], dtype=bool),
                cells=d.get("cells"),
                name=d.get("name", "mdp"),
                params=d.get("params", {}),
            )
        except KeyError as exc:
            raise ValidationError(f"missing MDP field {exc.args[0]!r}") from None
        violations = validate(mdp)
        if violations:
            raise ValidationError(violations)
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Row-stochastic action probabilities indexed ``[state][action]``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise ParameterError("policy probs must be a [state][action] matrix")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=PROB_ATOL, rtol=0):
            raise ParameterError("policy rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def __eq__(self, other):
        if not isinstance(other, TabularPolicy):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def sample(self, state: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.probs.shape[1], p=self.probs[state]))


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    next_states: list = field(default_factory=list)
    terminated: bool = False
    truncated: bool = False

    def __len__(self):
        return len(self.actions)

    @property
    def steps(self):
        return list(zip(self.states, self.actions, self.rewards, self.next_states))

    def discounted_return(self, discount: float) -> float:
        return float(sum(r * discount**t for t, r in enumerate(self.rewards)))


def validate(mdp: TabularMdp) -> list:
    """Return every invariant violation of ``mdp``; an empty list means ok."""
    out = []
    P, R = mdp.transitions, mdp.rewards
    nS, nA = P.shape[0], P.shape[1]
    if P.shape != (nS, nA, nS):
        out.append(f"transitions shape {P.shape} is not (S, A, S)")
        return out
    if R.shape != (nS, nA):
        out.append(f"rewards shape {R.shape} does not match ({nS}, {nA})")
    if mdp.initial_dist.shape != (nS,):
        out.append(f"initial_dist shape {mdp.initial_dist.shape} does not match ({nS},)")
    if mdp.terminal.shape != (nS,):
        out.append(f"terminal shape {mdp.terminal.shape} does not match ({nS},)")
    if out:
        return out
    if not 0.0 <= mdp.discount < 1.0:
        out.append(f"discount {mdp.discount} outside [0, 1)")
    for s, a, s2 in zip(*np.nonzero(P < 0)):
        out.append(f"negative probability P[{s}][{a}][{s2}] = {P[s, a, s2]}")
    if not np.all(np.isfinite(P)):
        out.append("non-finite transition probability")
    sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > PROB_ATOL)):
        out.append(f"transition row ({s}, {a}) sums to {sums[s, a]!r}")
    if not np.all(np.isfinite(R)):
        out.append("non-finite reward entry")
    p0 = mdp.initial_dist
    if np.any(p0 < 0) or abs(p0.sum() - 1.0) > PROB_ATOL:
        out.append(f"initial_dist sums to {p0.sum()!r} or has negative entries")
    for s in np.flatnonzero(mdp.terminal):
        for a in range(nA):
            if P[s, a, s] != 1.0:
                out.append(f"terminal state {s} is not absorbing under action {a}")
            if R[s, a] != 0.0:
                out.append(f"terminal state {s} has nonzero reward under action {a}")
    if mdp.cells is not None and len(mdp.cells) != nS:
        out.append(f"{len(mdp.cells)} grid cells for {nS} states")
    return out


def _grid_move(cells, index, delta):
    x, y = cells[index]
    target = (x + delta[0], y + delta[1])
    try:
        return cells.index(target)
    except ValueError:
        return index


def make_grid_mdp(
    cells: Sequence[tuple],
    start: int,
    goal: int,
    noise_prob: float = 0.25,
    goal_reward: float = 10.0,
    discount: float = 0.9,
    noise_mode: str = "random_action",
    name: str = "grid",
) -> TabularMdp:
    """Build a grid MDP over open ``cells``; everything else is wall."""
    if not 0.0 <= noise_prob < 1.0:
        raise ParameterError(f"noise_prob must lie in [0, 1), got {noise_prob}")
    if not 0.0 <= discount < 1.0:
        raise ParameterError(f"discount must lie in [0, 1), got {discount}")
    if noise_mode not in NOISE_MODES:
        raise ParameterError(f"noise_mode must be one of {NOISE_MODES}, got {noise_mode!r}")
    cells = [tuple(c) for c in cells]
    nS, nA = len(cells), len(ACTIONS)
    moves = np.array([[_grid_move(cells, s, d) for d in ACTION_DELTAS] for s in range(nS)])

    P = np.zeros((nS, nA, nS))
    for s in range(nS):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        for a in range(nA):
            P[s, a, moves[s, a]] += 1.0 - noise_prob
            if noise_mode == "random_action":
                for b in range(nA):
                    P[s, a, moves[s, b]] += noise_prob / nA
            else:
                P[s, a, :] += noise_prob / nS
    # Expected reward of entering the goal.
    R = goal_reward * P[:, :, goal]
    R[goal] = 0.0
    p0 = np.zeros(nS)
    p0[start] = 1.0
    terminal = np.zeros(nS, dtype=bool)
    terminal[goal] = True
    return TabularMdp(
        transitions=P,
        rewards=R,
        discount=discount,
        initial_dist=p0,
        terminal=terminal,
        cells=tuple(cells),
        name=name,
        params={
            "noise_prob": noise_prob,
            "goal_reward": goal_reward,
            "discount": discount,
            "noise_mode": noise_mode,
            "start": start,
            "goal": goal,
        },
    )


def make_umaze(
    noise_prob: float = 0.25,
    goal_reward: float = 10.0,
    discount: float = 0.9,
    noise_mode: str = "random_action",
) -> TabularMdp:
    """The 7-cell U-shaped corridor on a 3x3 grid.

    Start is (0, 0) and the terminal goal is (2, 0); the shortest route is
    up, up, right, right, down, down. With probability ``noise_prob`` the
    commanded action is replaced by a uniformly random one
    (``noise_mode="random_action"``) or the agent lands in a uniformly random
    state (``noise_mode="random_state"``).
    """
    return make_grid_mdp(
        UMAZE_CELLS,
        start=0,
        goal=len(UMAZE_CELLS) - 1,
        noise_prob=noise_prob,
        goal_reward=goal_reward,
        discount=discount,
        noise_mode=noise_mode,
        name="umaze",
    )


def make_random_mdp(n_states: int, n_actions: int, seed: int) -> TabularMdp:
    if n_states < 2 or n_actions < 2:
        raise ParameterError("random MDPs need at least 2 states and 2 actions")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_states))
    P = raw / raw.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(
        transitions=P,
        rewards=R,
        discount=0.9,
        initial_dist=np.full(n_states, 1.0 / n_states),
        terminal=np.zeros(n_states, dtype=bool),
        name="random",
        params={"n_states": n_states, "n_actions": n_actions, "seed": seed},
    )


def step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator):
    """Sample one transition; returns ``(next_state, reward, done)``."""
    if not 0 <= state < mdp.n_states or not 0 <= action < mdp.n_actions:
        raise ParameterError(f"state {state} or action {action} out of range")
    if mdp.terminal[state]:
        raise UsageError(f"cannot step from terminal state {state}")
    next_state = int(rng.choice(mdp.n_states, p=mdp.transitions[state, action]))
    return next_state, float(mdp.rewards[state, action]), bool(mdp.terminal[next_state])


def rollout(
    mdp: TabularMdp, policy: TabularPolicy, rng: np.random.Generator, max_steps: int = 100
) -> Trajectory:
    if max_steps < 1:
        raise ParameterError("max_steps must be >= 1")
    traj = Trajectory()
    state = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    if mdp.terminal[state]:
        traj.terminated = True
        return traj
    for _ in range(max_steps):
        action = policy.sample(state, rng)
        next_state, reward, done = step(mdp, state, action, rng)
        traj.states.append(state)
        traj.actions.append(action)
        traj.rewards.append(reward)
        traj.next_states.append(next_state)
        state = next_state
        if done:
            traj.terminated = True
            break
    else:
        traj.truncated = True
    return traj
