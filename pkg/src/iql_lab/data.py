"""Offline datasets: generation, empirical behavior/support, batching, I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ParameterError, ParseError, ValidationError
from .mdp import TabularMdp, TabularPolicy, rollout
from .oracle import SupportMask, reachable_states

NO_ACTION = -1
FIELDS = ("s", "a", "r", "ns", "na", "done")


class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    next_action: Optional[int]
    done: bool


@dataclass(frozen=True)
class Batch:
    """Column view of sampled transitions; ``next_action`` uses -1 for absent."""

    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    next_action: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.state.size

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            na = int(self.next_action[i])
            yield Transition(
                int(self.state[i]),
                int(self.action[i]),
                float(self.reward[i]),
                int(self.next_state[i]),
                None if na == NO_ACTION else na,
                bool(self.done[i]),
            )

    def __getitem__(self, i):
        return list(self)[i]

    def take(self, idx) -> "Batch":
        return Batch(
            self.state[idx], self.action[idx], self.reward[idx],
            self.next_state[idx], self.next_action[idx], self.done[idx],
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered transitions with episode boundaries, stored column-wise."""

    columns: Batch
    episode_starts: tuple
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.columns)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return dumps(self) == dumps(other)

    @property
    def transitions(self) -> list:
        return list(self.columns)

    @classmethod
    def from_transitions(cls, transitions: Sequence, episode_starts=(0,), meta=None) -> "Dataset":
        ts = [Transition(*t) for t in transitions]
        cols = Batch(
            np.array([t.state for t in ts], dtype=np.int64),
            np.array([t.action for t in ts], dtype=np.int64),
            np.array([t.reward for t in ts], dtype=float),
            np.array([t.next_state for t in ts], dtype=np.int64),
            np.array([NO_ACTION if t.next_action is None else t.next_action for t in ts],
                     dtype=np.int64),
            np.array([t.done for t in ts], dtype=bool),
        )
        ds = cls(cols, tuple(int(e) for e in episode_starts), dict(meta or {}))
        violations = check(ds)
        if violations:
            raise ValidationError(violations)
        return ds


def check(ds: Dataset, n_states: Optional[int] = None, n_actions: Optional[int] = None) -> list:
    """Return a list of invariant violations (empty when ok)."""
    out = []
    c = ds.columns
    n = len(c)
    if n == 0:
        return ["dataset is empty"]
    starts = list(ds.episode_starts)
    if not starts or starts[0] != 0 or sorted(set(starts)) != starts or starts[-1] >= n:
        out.append(f"episode_starts {starts[:10]} must be strictly increasing from 0 and < {n}")
        return out
    for i in np.flatnonzero(c.done & (c.next_action != NO_ACTION)):
        out.append(f"transition {i}: done but next_action present")
    if np.any(c.state < 0) or np.any(c.next_state < 0) or np.any(c.action < 0):
        out.append("negative state or action index")
    if np.any(c.next_action < NO_ACTION):
        out.append("invalid next_action index")
    if n_states is not None and (c.state.max() >= n_states or c.next_state.max() >= n_states):
        out.append(f"state index out of range for {n_states} states")
    if n_actions is not None and (c.action.max() >= n_actions or c.next_action.max() >= n_actions):
        out.append(f"action index out of range for {n_actions} actions")
    if not np.all(np.isfinite(c.reward)):
        out.append("non-finite reward")
    boundary = np.zeros(n, dtype=bool)
    boundary[np.array(starts[1:], dtype=int)] = True
    cont = ~boundary[1:]
    for i in np.flatnonzero(cont & c.done[:-1]):
        out.append(f"transition {i} is done but the episode continues")
    for i in np.flatnonzero(cont & (c.next_state[:-1] != c.state[1:])):
        out.append(f"transition {i}: next_state does not match the following state")
    for i in np.flatnonzero(cont & (c.next_action[:-1] != c.action[1:])):
        out.append(f"transition {i}: next_action does not match the following action")
    return out


def generate_dataset(
    mdp: TabularMdp,
    mixture: Sequence,
    max_steps: int = 100,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> Dataset:
    """Roll out each ``(policy, n_trajectories)`` in order from one seeded stream.

    Episodes that hit ``max_steps`` keep a SARSA next action sampled from
    the same policy at the final next state.
    """
    if sum(int(k) for _, k in mixture) < 1:
        raise ParameterError("mixture must request at least one trajectory")
    rng = np.random.default_rng(seed)
    rows, starts = [], []
    for policy, count in mixture:
        for _ in range(int(count)):
            traj = rollout(mdp, policy, rng, max_steps)
            if len(traj) == 0:
                continue
            starts.append(len(rows))
            T = len(traj)
            for t in range(T):
                last = t == T - 1
                done = last and traj.terminated
                if not last:
                    na = traj.actions[t + 1]
                elif done:
                    na = None
                else:
                    na = policy.sample(traj.next_states[t], rng)
                rows.append(
                    Transition(traj.states[t], traj.actions[t], traj.rewards[t],
                               traj.next_states[t], na, done)
                )
    if names is None:
        names = [f"policy{i}" for i in range(len(mixture))]
    meta = {
        "mdp": mdp.name,
        "mdp_params": mdp.params,
        "mixture": [[str(nm), int(k)] for nm, (_, k) in zip(names, mixture)],
        "max_steps": int(max_steps),
        "seed": int(seed),
        "unvisited_behavior": "uniform",
    }
    return Dataset.from_transitions(rows, starts, meta)


def _counts(ds: Dataset, n_states: int, n_actions: int) -> np.ndarray:
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (ds.columns.state, ds.columns.action), 1.0)
    return counts


def empirical_support(ds: Dataset, n_states: int, n_actions: int) -> SupportMask:
    return SupportMask(_counts(ds, n_states, n_actions) > 0)


def empirical_behavior(
    ds: Dataset,
    n_states: int,
    n_actions: int,
    default: str = "uniform",
    mdp: Optional[TabularMdp] = None,
) -> TabularPolicy:
    """Action frequencies per state.

    Unvisited states get uniform rows, or with ``default="reject"`` raise
    when the state is a reachable non-terminal state of ``mdp`` (any
    unvisited state when no MDP is given).
    """
    if default not in ("uniform", "reject"):
        raise ParameterError(f"default must be 'uniform' or 'reject', got {default!r}")
    counts = _counts(ds, n_states, n_actions)
    visits = counts.sum(axis=1)
    unvisited = visits == 0
    if default == "reject":
        bad = unvisited
        if mdp is not None:
            bad = unvisited & reachable_states(mdp) & ~mdp.terminal
        if np.any(bad):
            raise ValidationError(f"unvisited states: {np.flatnonzero(bad).tolist()}")
    probs = np.where(
        unvisited[:, None], 1.0 / n_actions, counts / np.maximum(visits, 1.0)[:, None]
    )
    return TabularPolicy(probs)


def sample_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    return rng.integers(0, n, size=batch_size)


def sample_batch(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sampling with replacement."""
    return ds.columns.take(sample_indices(len(ds), batch_size, rng))


def _row(c: Batch, i: int) -> str:
    na = int(c.next_action[i])
    rec = {
        "s": int(c.state[i]),
        "a": int(c.action[i]),
        "r": float(c.reward[i]),
        "ns": int(c.next_state[i]),
        "na": None if na == NO_ACTION else na,
        "done": bool(c.done[i]),
    }
    return json.dumps(rec)


def dumps(ds: Dataset) -> str:
    header = json.dumps({"meta": ds.meta, "episode_starts": list(ds.episode_starts)},
                        sort_keys=True)
    lines = [header] + [_row(ds.columns, i) for i in range(len(ds))]
    return "\n".join(lines) + "\n"


def loads(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset file", line=1)
    try:
        header = json.loads(lines[0])
        meta, starts = header["meta"], header["episode_starts"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"bad header: {exc}", line=1) from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            if list(rec) != list(FIELDS):
                raise ValueError(f"expected keys {FIELDS}, got {tuple(rec)}")
            na = rec["na"]
            if not isinstance(rec["done"], bool):
                raise ValueError("done must be a boolean")
            rows.append(Transition(int(rec["s"]), int(rec["a"]), float(rec["r"]),
                                   int(rec["ns"]), None if na is None else int(na),
                                   rec["done"]))
        except (json.JSONDecodeError, ValueError, TypeError, AttributeError) as exc:
            raise ParseError(str(exc), line=lineno) from None
    return Dataset.from_transitions(rows, starts, meta)


def save(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(ds))


def load(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


class ReplayBuffer:
    """Growable transition store used for online finetuning.

    Seeded from an offline dataset; sampling matches :func:`sample_batch`.
    """

    def __init__(self, ds: Dataset):
        c = ds.columns
        n = len(c)
        cap = max(16, 2 * n)
        self._cols = {
            name: np.zeros(cap, dtype=getattr(c, name).dtype) for name in Batch.__annotations__
        }
        for name in self._cols:
            self._cols[name][:n] = getattr(c, name)
        self.size = n
        self.episode_starts = list(ds.episode_starts)
        self.meta = dict(ds.meta)

    def __len__(self):
        return self.size

    def _grow(self):
        for name, arr in self._cols.items():
            bigger = np.zeros(2 * arr.size, dtype=arr.dtype)
            bigger[: self.size] = arr[: self.size]
            self._cols[name] = bigger

    def add(self, t: Transition, new_episode: bool = False) -> None:
        if self.size == self._cols["state"].size:
            self._grow()
        if new_episode:
            self.episode_starts.append(self.size)
        i = self.size
        self._cols["state"][i] = t.state
        self._cols["action"][i] = t.action
        self._cols["reward"][i] = t.reward
        self._cols["next_state"][i] = t.next_state
        self._cols["next_action"][i] = NO_ACTION if t.next_action is None else t.next_action
        self._cols["done"][i] = t.done
        self.size += 1

    def set_next_action(self, index: int, action: int) -> None:
        self._cols["next_action"][index] = action

    def view(self) -> Batch:
        return Batch(**{k: v[: self.size] for k, v in self._cols.items()})

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self.view().take(sample_indices(self.size, batch_size, rng))

    def to_dataset(self) -> Dataset:
        cols = Batch(**{k: v[: self.size].copy() for k, v in self._cols.items()})
        return Dataset(cols, tuple(self.episode_starts), dict(self.meta))
