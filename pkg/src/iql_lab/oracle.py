"""Exact tabular dynamic programming used as ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivergenceError, InfeasibleSupportError, ParameterError
from .expectile import check_tau, expectile_rows
from .mdp import TabularMdp, TabularPolicy

__all__ = [
    "SupportMask",
    "TabularPolicy",
    "check_support",
    "expectile_fixed_point",
    "greedy_policy",
    "normalized_return",
    "policy_evaluation",
    "policy_return",
    "reachable_states",
    "support_value_iteration",
    "value_iteration",
]

MAX_ITERS = 1_000_000


@dataclass(frozen=True, eq=False)
class SupportMask:
    """``mask[s, a]`` is true when action ``a`` was observed in state ``s``."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool, copy=True)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    def __eq__(self, other):
        if not isinstance(other, SupportMask):
            return NotImplemented
        return np.array_equal(self.mask, other.mask)

    @classmethod
    def full(cls, n_states: int, n_actions: int) -> "SupportMask":
        return cls(np.ones((n_states, n_actions), dtype=bool))


def _next_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    return mdp.rewards + mdp.discount * (mdp.transitions @ v)


def reachable_states(mdp: TabularMdp, support: Optional[SupportMask] = None) -> np.ndarray:
    """States reachable from the initial distribution using only supported
    actions; states without any supported action are not expanded."""
    allowed = np.ones((mdp.n_states, mdp.n_actions), bool) if support is None else support.mask
    seen = mdp.initial_dist > 0
    frontier = np.flatnonzero(seen)
    while frontier.size:
        nxt = np.zeros(mdp.n_states, dtype=bool)
        for s in frontier:
            if mdp.terminal[s]:
                continue
            acts = np.flatnonzero(allowed[s])
            if acts.size:
                nxt |= (mdp.transitions[s, acts] > 0).any(axis=0)
        frontier = np.flatnonzero(nxt & ~seen)
        seen |= nxt
    return seen


def check_support(mdp: TabularMdp, support: SupportMask) -> None:
    if support.mask.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError(
            f"support shape {support.mask.shape} != ({mdp.n_states}, {mdp.n_actions})"
        )
    reach = reachable_states(mdp, support)
    bad = np.flatnonzero(reach & ~mdp.terminal & ~support.mask.any(axis=1))
    if bad.size:
        raise InfeasibleSupportError(
            f"reachable non-terminal states without a supported action: {bad.tolist()}"
        )


def _iterate(backup, q0, tol, cap=MAX_ITERS):
    q = q0
    for _ in range(cap):
        q_new = backup(q)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise DivergenceError(f"no convergence within {cap} sweeps")


def value_iteration(mdp: TabularMdp, tol: float = 1e-10):
    """Optimal ``(V*, Q*)``; stops once a sweep changes Q by less than
    ``tol * (1 - gamma) / gamma``."""
    return support_value_iteration(mdp, None, tol)


def support_value_iteration(mdp: TabularMdp, support: Optional[SupportMask], tol: float = 1e-10):
    """Optimal values when the max at each state ranges over supported actions.

    Q is still reported for unsupported pairs (one-step lookahead into the
    constrained V); states with no supported action get V = 0.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    nS, nA = mdp.n_states, mdp.n_actions
    if support is None:
        allowed = np.ones((nS, nA), dtype=bool)
    else:
        check_support(mdp, support)
        allowed = support.mask
    has_action = allowed.any(axis=1) & ~mdp.terminal
    gamma = mdp.discount
    stop = tol * (1.0 - gamma) / gamma if gamma > 0 else np.inf

    def v_of(q):
        v = np.where(allowed, q, -np.inf).max(axis=1)
        return np.where(has_action, v, 0.0)

    def backup(q):
        q_new = _next_values(mdp, v_of(q))
        q_new[mdp.terminal] = 0.0
        return q_new

    q = _iterate(backup, np.zeros((nS, nA)), stop)
    return v_of(q), q


def expectile_fixed_point(
    mdp: TabularMdp, behavior: TabularPolicy, tau: float, tol: float = 1e-10
):
    """Solve ``V(s) = E^tau_{a~mu}[Q(s,a)]``, ``Q = r + gamma * P V`` by
    synchronous sweeps, with each V(s) an exact weighted expectile."""
    tau = check_tau(tau)
    if tol <= 0:
        raise ParameterError("tol must be positive")
    mu = behavior.probs
    if mu.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError("behavior policy shape does not match the MDP")
    live = ~mdp.terminal
    # Bisection error must sit well below the sweep tolerance.
    inner_tol = tol * 1e-3

    def v_of(q):
        v = np.zeros(mdp.n_states)
        if live.any():
            v[live] = expectile_rows(q[live], mu[live], tau, inner_tol)
        return v

    def backup(q):
        q_new = _next_values(mdp, v_of(q))
        q_new[mdp.terminal] = 0.0
        return q_new

    q = _iterate(backup, np.zeros((mdp.n_states, mdp.n_actions)), tol)
    return v_of(q), q


def policy_evaluation(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-10):
    """``(V^pi, Q^pi)`` by iterating ``Q = r + gamma * P (pi . Q)``."""
    if tol <= 0:
        raise ParameterError("tol must be positive")
    pi = policy.probs
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError("policy shape does not match the MDP")

    def v_of(q):
        v = (pi * q).sum(axis=1)
        v[mdp.terminal] = 0.0
        return v

    def backup(q):
        q_new = _next_values(mdp, v_of(q))
        q_new[mdp.terminal] = 0.0
        return q_new

    q = _iterate(backup, np.zeros((mdp.n_states, mdp.n_actions)), tol)
    return v_of(q), q


def greedy_policy(
    q: np.ndarray,
    support: Optional[SupportMask] = None,
    terminal: Optional[np.ndarray] = None,
) -> TabularPolicy:
    """Point mass on the (supported) argmax, lowest index on ties.

    Rows without any supported action are an error unless ``terminal`` marks
    them, in which case the unconstrained argmax is used.
    """
    q = np.asarray(q, dtype=float)
    nS, nA = q.shape
    if support is None:
        masked = q
    else:
        allowed = support.mask
        if allowed.shape != q.shape:
            raise ParameterError("support shape does not match Q")
        empty = ~allowed.any(axis=1)
        term = np.zeros(nS, bool) if terminal is None else np.asarray(terminal, bool)
        if np.any(empty & ~term):
            raise InfeasibleSupportError(
                f"states without a supported action: {np.flatnonzero(empty & ~term).tolist()}"
            )
        allowed = allowed | empty[:, None]
        masked = np.where(allowed, q, -np.inf)
    return TabularPolicy.deterministic(np.argmax(masked, axis=1), nA)


def policy_return(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-12) -> float:
    """Exact expected discounted return from the initial distribution."""
    v, _ = policy_evaluation(mdp, policy, tol)
    return float(mdp.initial_dist @ v)


def normalized_return(j: float, j_uniform: float, j_best: float) -> float:
    """``(J - J_uniform) / (J_best - J_uniform)``."""
    if j_best == j_uniform:
        raise ParameterError("normalization undefined: best and uniform returns coincide")
    return (j - j_uniform) / (j_best - j_uniform)
