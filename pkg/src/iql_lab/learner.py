"""Implicit Q-learning on discrete state/action spaces.

Training alternates an expectile value step, a mean-squared Q step and a
Polyak target step; policy extraction is advantage-weighted regression on a
softmax head. Every Q evaluation goes through :func:`q_at`, which only ever
looks at (state, action) pairs handed to it by the caller and can record them.
"""

from __future__ import annotations

import dataclasses
import json
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import approx
from .data import Batch, Dataset, ReplayBuffer, Transition, empirical_support, sample_batch
from .errors import DivergenceError, ParameterError, ValidationError
from .expectile import asym_l1_grad, asym_l1_loss, asym_l2_grad, asym_l2_loss
from .mdp import TabularMdp, TabularPolicy, step as mdp_step
from .oracle import policy_return, support_value_iteration

LOSS_VARIANTS = ("expectile", "quantile")


@dataclass(frozen=True)
class IqlConfig:
    """Hyperparameters. Learning rates, Polyak rate and the advantage clip
    default to the values used for the large-scale benchmarks; see
    :func:`maze_config` for the tabular maze preset."""

    tau: float = 0.95
    beta: float = 10.0
    lr_v: float = 3e-4
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    polyak_rate: float = 0.005
    td_steps: int = 1000
    policy_steps: int = 1000
    batch_size: int = 256
    double_q: Optional[bool] = None
    loss_variant: str = "expectile"
    adv_clip: float = 100.0
    kind: str = "table"
    hidden: tuple = (256, 256)
    critic_schedule: str = "constant"
    log_every: int = 0
    max_episode_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ParameterError(f"tau must lie in (0, 1), got {self.tau}")
        if self.beta < 0:
            raise ParameterError(f"beta must be >= 0, got {self.beta}")
        if self.adv_clip <= 0:
            raise ParameterError(f"adv_clip must be positive, got {self.adv_clip}")
        for name in ("lr_v", "lr_q", "lr_pi"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 < self.polyak_rate <= 1.0:
            raise ParameterError(f"polyak_rate must lie in (0, 1], got {self.polyak_rate}")
        if self.td_steps < 0 or self.policy_steps < 0 or self.batch_size < 1:
            raise ParameterError("step counts must be >= 0 and batch_size >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ParameterError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.kind not in approx.KINDS:
            raise ParameterError(f"kind must be one of {approx.KINDS}")
        if self.critic_schedule not in approx.SCHEDULES:
            raise ParameterError(f"critic_schedule must be one of {approx.SCHEDULES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def use_double_q(self) -> bool:
        return self.kind == "mlp" if self.double_q is None else bool(self.double_q)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IqlConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def maze_config(**overrides) -> IqlConfig:
    """Tabular preset for the U-maze experiments."""
    base = dict(
        tau=0.95,
        beta=10.0,
        lr_v=0.05,
        lr_q=0.05,
        lr_pi=0.05,
        polyak_rate=0.05,
        td_steps=3000,
        policy_steps=1000,
        batch_size=256,
        critic_schedule="cosine",
        kind="table",
    )
    base.update(overrides)
    return IqlConfig(**base)


@dataclass(frozen=True, eq=False)
class LearnerState:
    n_states: int
    n_actions: int
    discount: float
    v: approx.Approximator
    q1: approx.Approximator
    q1_target: approx.Approximator
    pi: approx.Approximator
    opt_v: approx.OptimizerState
    opt_q1: approx.OptimizerState
    opt_pi: approx.OptimizerState
    q2: Optional[approx.Approximator] = None
    q2_target: Optional[approx.Approximator] = None
    opt_q2: Optional[approx.OptimizerState] = None
    td_updates: int = 0
    policy_updates: int = 0
    query_log: Optional[set] = field(default=None, compare=False)

    @property
    def double_q(self) -> bool:
        return self.q2 is not None

    def value_table(self) -> np.ndarray:
        return approx.evaluate(self.v, encode(self, np.arange(self.n_states)))[:, 0]

    def q_table(self, target: bool = False) -> np.ndarray:
        """Full Q table; diagnostics only, never used inside training."""
        models = [self.q1_target, self.q2_target] if target else [self.q1, self.q2]
        x = encode(self, np.arange(self.n_states))
        tables = [approx.evaluate(m, x) for m in models if m is not None]
        return np.minimum.reduce(tables)

    def policy_logits(self) -> np.ndarray:
        return approx.evaluate(self.pi, encode(self, np.arange(self.n_states)))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.policy_logits(), axis=1)

    def greedy_policy(self) -> TabularPolicy:
        return TabularPolicy.deterministic(self.greedy_actions(), self.n_actions)

    def policy_probs(self) -> np.ndarray:
        return _softmax(self.policy_logits())


def encode(learner: LearnerState, states) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    if learner.v.kind == "table":
        return states
    return np.eye(learner.n_states)[states]


def init_learner(config: IqlConfig, n_states: int, n_actions: int, discount: float) -> LearnerState:
    n_in = n_states
    seeds = np.random.SeedSequence([config.seed, 1]).generate_state(4)

    def make(n_out, k):
        return approx.init(config.kind, n_in, n_out, config.hidden, seed=int(seeds[k]))

    v, q1, pi = make(1, 0), make(n_actions, 1), make(n_actions, 3)
    sched = config.critic_schedule
    horizon = max(config.td_steps, 1)
    state = LearnerState(
        n_states=n_states,
        n_actions=n_actions,
        discount=float(discount),
        v=v,
        q1=q1,
        q1_target=q1,
        pi=pi,
        opt_v=approx.adam(v, config.lr_v, sched, horizon),
        opt_q1=approx.adam(q1, config.lr_q, sched, horizon),
        opt_pi=approx.adam(pi, config.lr_pi, "cosine", max(config.policy_steps, 1)),
    )
    if config.use_double_q:
        q2 = make(n_actions, 2)
        state = replace(state, q2=q2, q2_target=q2,
                        opt_q2=approx.adam(q2, config.lr_q, sched, horizon))
    return state


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def q_at(learner: LearnerState, model: approx.Approximator, states, actions) -> np.ndarray:
    """Q values at the given (state, action) pairs, recorded when the learner
    carries a query log."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    if learner.query_log is not None:
        learner.query_log.update(zip(states.tolist(), actions.tolist()))
    out = approx.evaluate(model, encode(learner, states))
    return out[np.arange(states.size), actions]


def target_q(learner: LearnerState, states, actions) -> np.ndarray:
    """Clipped double-Q: pointwise minimum of the target networks."""
    q = q_at(learner, learner.q1_target, states, actions)
    if learner.q2_target is not None:
        q = np.minimum(q, q_at(learner, learner.q2_target, states, actions))
    return q


def state_values(learner: LearnerState, states) -> np.ndarray:
    return approx.evaluate(learner.v, encode(learner, states))[:, 0]


def td_target(next_state, reward, done, learner: LearnerState, discount: float):
    """``r`` for terminal transitions, else ``r + discount * V(s')``."""
    next_state = np.asarray(next_state, dtype=np.int64)
    reward = np.asarray(reward, dtype=float)
    done = np.asarray(done, dtype=bool)
    scalar = next_state.ndim == 0
    v_next = state_values(learner, np.atleast_1d(next_state))
    out = np.atleast_1d(reward) + discount * np.where(np.atleast_1d(done), 0.0, v_next)
    return float(out[0]) if scalar else out


def _finite(value, what, step, config):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite {what}", step=step,
                              config=None if config is None else config.to_dict())


def value_loss_and_grad(learner: LearnerState, batch: Batch, config: IqlConfig):
    """Expectile (or quantile) regression of V(s) onto target Q(s, a)."""
    qt = target_q(learner, batch.state, batch.action)
    x = encode(learner, batch.state)
    v = approx.evaluate(learner.v, x)[:, 0]
    u = qt - v
    if config.loss_variant == "expectile":
        loss, dloss = asym_l2_loss(u, config.tau), asym_l2_grad(u, config.tau)
    else:
        loss, dloss = asym_l1_loss(u, config.tau), asym_l1_grad(u, config.tau)
    n = len(batch)
    cot = (-np.asarray(dloss) / n)[:, None]
    return float(np.mean(loss)), approx.grad(learner.v, x, cot)


def update_value(learner: LearnerState, batch: Batch, config: IqlConfig):
    loss, g = value_loss_and_grad(learner, batch, config)
    _finite(loss, "value loss", learner.td_updates, config)
    v, opt = approx.apply_update(learner.v, learner.opt_v, g)
    return replace(learner, v=v, opt_v=opt), loss


def q_loss_and_grad(learner: LearnerState, model: approx.Approximator, batch: Batch, targets):
    preds = q_at(learner, model, batch.state, batch.action)
    err = targets - preds
    n = len(batch)
    cot = np.zeros((n, learner.n_actions))
    cot[np.arange(n), batch.action] = -2.0 * err / n
    return float(np.mean(err * err)), approx.grad(model, encode(learner, batch.state), cot)


def _fit_q(learner: LearnerState, batch: Batch, targets, config: IqlConfig):
    loss1, g1 = q_loss_and_grad(learner, learner.q1, batch, targets)
    _finite(loss1, "q loss", learner.td_updates, config)
    q1, opt_q1 = approx.apply_update(learner.q1, learner.opt_q1, g1)
    changes = dict(q1=q1, opt_q1=opt_q1,
                   q1_target=approx.polyak_update(learner.q1_target, q1, config.polyak_rate))
    losses = [loss1]
    if learner.q2 is not None:
        loss2, g2 = q_loss_and_grad(learner, learner.q2, batch, targets)
        _finite(loss2, "q loss", learner.td_updates, config)
        q2, opt_q2 = approx.apply_update(learner.q2, learner.opt_q2, g2)
        changes.update(q2=q2, opt_q2=opt_q2,
                       q2_target=approx.polyak_update(learner.q2_target, q2, config.polyak_rate))
        losses.append(loss2)
    changes["td_updates"] = learner.td_updates + 1
    return replace(learner, **changes), float(np.mean(losses))


def update_q(learner: LearnerState, batch: Batch, config: IqlConfig, discount: Optional[float] = None):
    """MSE step towards ``r + gamma * V(s')`` followed by the Polyak step."""
    gamma = learner.discount if discount is None else discount
    targets = td_target(batch.next_state, batch.reward, batch.done, learner, gamma)
    return _fit_q(learner, batch, targets, config)


def sarsa_targets(learner: LearnerState, batch: Batch, discount: float) -> np.ndarray:
    """``r + gamma * Q_target(s', a')`` using the stored next action."""
    cont = ~batch.done & (batch.next_action >= 0)
    out = batch.reward.astype(float).copy()
    if np.any(cont):
        q_next = target_q(learner, batch.next_state[cont], batch.next_action[cont])
        out[cont] += discount * q_next
    return out


def awr_weights(learner: LearnerState, batch: Batch, config: IqlConfig):
    adv = target_q(learner, batch.state, batch.action) - state_values(learner, batch.state)
    cap = math.log(config.adv_clip)
    w = np.minimum(np.exp(np.minimum(config.beta * adv, cap + 1.0)), config.adv_clip)
    return w, adv


def policy_loss_and_grad(learner: LearnerState, batch: Batch, config: IqlConfig):
    """Negative advantage-weighted log-likelihood of the dataset actions."""
    w, adv = awr_weights(learner, batch, config)
    x = encode(learner, batch.state)
    logits = approx.evaluate(learner.pi, x)
    n = len(batch)
    z = logits - logits.max(axis=1, keepdims=True)
    logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = logp_all[np.arange(n), batch.action]
    loss = float(-np.mean(w * logp))
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), batch.action] = 1.0
    cot = -(w / n)[:, None] * (onehot - np.exp(logp_all))
    return loss, approx.grad(learner.pi, x, cot), w, adv


def update_policy(learner: LearnerState, batch: Batch, config: IqlConfig):
    loss, g, w, adv = policy_loss_and_grad(learner, batch, config)
    _finite(w, "advantage weights", learner.policy_updates, config)
    _finite(loss, "policy loss", learner.policy_updates, config)
    pi, opt = approx.apply_update(learner.pi, learner.opt_pi, g)
    new = replace(learner, pi=pi, opt_pi=opt, policy_updates=learner.policy_updates + 1)
    return new, loss, float(np.mean(adv))


@dataclass
class Metrics:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def log(self, **record):
        self.records.append(record)

    def to_jsonl(self, include_timing: bool = False) -> str:
        lines = []
        for rec in self.records:
            if not include_timing:
                rec = {k: v for k, v in rec.items() if k != "wall_clock"}
            lines.append(json.dumps(rec))
        return "".join(line + "\n" for line in lines)

    def last(self, key):
        for rec in reversed(self.records):
            if rec.get(key) is not None:
                return rec[key]
        return None


def _rng_pair(seed: int):
    critic_ss, policy_ss, online_ss = np.random.SeedSequence([seed, 2]).spawn(3)
    return (np.random.default_rng(critic_ss), np.random.default_rng(policy_ss),
            np.random.default_rng(online_ss))


def _should_log(config, t, total):
    return config.log_every > 0 and ((t + 1) % config.log_every == 0 or t + 1 == total)


def train_offline(
    config: IqlConfig,
    ds: Dataset,
    mdp: Optional[TabularMdp] = None,
    interleave: bool = False,
    query_log: Optional[set] = None,
    n_states: Optional[int] = None,
    n_actions: Optional[int] = None,
    discount: Optional[float] = None,
    sarsa: bool = False,
):
    """Run ``td_steps`` critic iterations, then ``policy_steps`` AWR steps.

    Critic and actor draw batches from separate random streams, so with
    ``interleave=True`` the critic trajectory is unchanged. ``mdp`` is only
    used to log exact returns and to supply sizes and the discount.
    """
    if len(ds) == 0:
        raise ValidationError("dataset is empty")
    nS = n_states if n_states is not None else mdp.n_states
    nA = n_actions if n_actions is not None else mdp.n_actions
    gamma = discount if discount is not None else mdp.discount
    learner = replace(init_learner(config, nS, nA, gamma), query_log=query_log)
    critic_rng, policy_rng, _ = _rng_pair(config.seed)
    metrics = Metrics(meta={"config": config.to_dict(), "algorithm": "onestep" if sarsa else "iql"})
    if sarsa:
        critic_cfg = replace(config, tau=0.5, loss_variant="expectile")
    else:
        critic_cfg = config
    t0 = time.perf_counter()

    def policy_step(learner, t):
        batch = sample_batch(ds, config.batch_size, policy_rng)
        learner, ploss, adv = update_policy(learner, batch, config)
        if _should_log(config, t, config.policy_steps):
            metrics.log(phase="policy", step=t + 1, policy_loss=ploss, mean_advantage=adv,
                        policy_return=_maybe_return(mdp, learner),
                        wall_clock=time.perf_counter() - t0)
        return learner

    p = 0
    for t in range(config.td_steps):
        batch = sample_batch(ds, config.batch_size, critic_rng)
        learner, vloss = update_value(learner, batch, critic_cfg)
        if sarsa:
            learner, qloss = _fit_q(learner, batch, sarsa_targets(learner, batch, gamma), config)
        else:
            learner, qloss = update_q(learner, batch, config, gamma)
        if _should_log(config, t, config.td_steps):
            metrics.log(phase="td", step=t + 1, value_loss=vloss, q_loss=qloss,
                        wall_clock=time.perf_counter() - t0)
        if interleave and p < config.policy_steps:
            learner = policy_step(learner, p)
            p += 1
    while p < config.policy_steps:
        learner = policy_step(learner, p)
        p += 1
    metrics.meta["final_return"] = _maybe_return(mdp, learner)
    return learner, metrics


def train_onestep_baseline(config: IqlConfig, ds: Dataset, mdp: Optional[TabularMdp] = None, **kw):
    """SARSA evaluation of the behavior policy plus the same AWR extraction."""
    return train_offline(config, ds, mdp, sarsa=True, **kw)


def _maybe_return(mdp, learner):
    if mdp is None:
        return None
    return policy_return(mdp, learner.greedy_policy())


def reference_returns(mdp: TabularMdp, ds: Dataset) -> dict:
    """Uniform-policy return and the best return achievable on the data support."""
    support = empirical_support(ds, mdp.n_states, mdp.n_actions)
    v_supp, _ = support_value_iteration(mdp, support)
    j_uniform = policy_return(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions))
    return {"j_uniform": j_uniform, "j_support_opt": float(mdp.initial_dist @ v_supp),
            "v_support_opt": v_supp}


def normalized(j: float, refs: dict) -> float:
    return (j - refs["j_uniform"]) / (refs["j_support_opt"] - refs["j_uniform"])


def _act(learner: LearnerState, state: int, eps: float, rng: np.random.Generator) -> int:
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(learner.n_actions))
    logits = approx.evaluate(learner.pi, encode(learner, np.array([state])))[0]
    return int(np.argmax(logits))


def finetune_online(
    learner: LearnerState,
    config: IqlConfig,
    mdp: TabularMdp,
    ds: Dataset,
    env_steps: int,
    exploration_eps: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    log_every: int = 0,
):
    """Collect ``env_steps`` transitions with an epsilon-greedy policy and
    run one full update cycle after each.

    The replay buffer starts as the offline dataset. Learning-rate schedules
    restart with a horizon of ``env_steps``; Adam moments carry over.
    """
    if env_steps < 1:
        raise ParameterError("env_steps must be >= 1")
    if not 0.0 <= exploration_eps <= 1.0:
        raise ParameterError("exploration_eps must lie in [0, 1]")
    if rng is None:
        rng = _rng_pair(config.seed)[2]
    critic_rng = np.random.default_rng(rng.integers(2**63))
    buffer = ReplayBuffer(ds)
    restarted = {
        name: replace(getattr(learner, name), horizon=env_steps,
                      schedule_start=getattr(learner, name).step)
        for name in ("opt_v", "opt_q1", "opt_q2", "opt_pi")
        if getattr(learner, name) is not None
    }
    learner = replace(learner, **restarted)
    before = policy_return(mdp, learner.greedy_policy())
    metrics = Metrics(meta={"config": config.to_dict(), "algorithm": "finetune",
                            "env_steps": env_steps, "exploration_eps": exploration_eps,
                            "return_before": before,
                            "td_updates_before": learner.td_updates,
                            "policy_updates_before": learner.policy_updates})
    state, ep_len, last_idx = None, 0, None
    t0 = time.perf_counter()
    for t in range(env_steps):
        new_episode = state is None
        if new_episode:
            state = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
            ep_len, last_idx = 0, None
        action = _act(learner, state, exploration_eps, rng)
        if last_idx is not None:
            buffer.set_next_action(last_idx, action)
        next_state, reward, done = mdp_step(mdp, state, action, rng)
        buffer.add(Transition(state, action, reward, next_state, None, done),
                   new_episode=new_episode)
        last_idx = len(buffer) - 1
        ep_len += 1
        if done:
            state = None
        elif ep_len >= config.max_episode_steps:
            buffer.set_next_action(last_idx, _act(learner, next_state, exploration_eps, rng))
            state = None
        else:
            state = next_state

        batch = buffer.sample(config.batch_size, critic_rng)
        learner, vloss = update_value(learner, batch, config)
        learner, qloss = update_q(learner, batch, config)
        learner, ploss, adv = update_policy(learner, batch, config)
        if log_every and ((t + 1) % log_every == 0 or t + 1 == env_steps):
            metrics.log(phase="online", step=t + 1, value_loss=vloss, q_loss=qloss,
                        policy_loss=ploss, mean_advantage=adv,
                        policy_return=policy_return(mdp, learner.greedy_policy()),
                        buffer_size=len(buffer), wall_clock=time.perf_counter() - t0)
    # Transitions whose successor action never got chosen keep next_action = None.
    metrics.meta["return_after"] = policy_return(mdp, learner.greedy_policy())
    metrics.meta["buffer_size"] = len(buffer)
    return learner, metrics, buffer


def sweep_tau(
    template: IqlConfig,
    taus: Sequence[float],
    ds: Dataset,
    mdp: TabularMdp,
    seeds: Sequence[int],
) -> list:
    """Exact and normalized returns per tau, aggregated over seeds."""
    if not taus or not seeds:
        raise ParameterError("taus and seeds must be nonempty")
    refs = reference_returns(mdp, ds)
    rows = []
    for tau in taus:
        returns = []
        for seed in seeds:
            cfg = replace(template, tau=float(tau), seed=int(seed))
            learner, _ = train_offline(cfg, ds, mdp)
            returns.append(policy_return(mdp, learner.greedy_policy()))
        norm = [normalized(j, refs) for j in returns]
        n = len(returns)
        rows.append({
            "tau": float(tau),
            "n_seeds": n,
            "mean_return": statistics.fmean(returns),
            "std_return": statistics.pstdev(returns) if n > 1 else 0.0,
            "mean_normalized": statistics.fmean(norm),
            "std_normalized": statistics.pstdev(norm) if n > 1 else 0.0,
            "se_normalized": (statistics.stdev(norm) / math.sqrt(n)) if n > 1 else 0.0,
        })
    return rows


def checkpoint_dict(learner: LearnerState, config: IqlConfig) -> dict:
    models = {name: getattr(learner, name).to_dict()
              for name in ("v", "q1", "q1_target", "pi", "q2", "q2_target")
              if getattr(learner, name) is not None}
    opts = {name: getattr(learner, name).to_dict()
            for name in ("opt_v", "opt_q1", "opt_pi", "opt_q2")
            if getattr(learner, name) is not None}
    return {
        "format": "iql-lab-checkpoint/1",
        "config": config.to_dict(),
        "n_states": learner.n_states,
        "n_actions": learner.n_actions,
        "discount": learner.discount,
        "td_updates": learner.td_updates,
        "policy_updates": learner.policy_updates,
        "models": models,
        "optimizers": opts,
    }


def learner_from_dict(d: dict):
    models = {k: approx.Approximator.from_dict(v) for k, v in d["models"].items()}
    opts = {k: approx.OptimizerState.from_dict(v) for k, v in d["optimizers"].items()}
    learner = LearnerState(
        n_states=int(d["n_states"]),
        n_actions=int(d["n_actions"]),
        discount=float(d["discount"]),
        td_updates=int(d["td_updates"]),
        policy_updates=int(d["policy_updates"]),
        **models,
        **opts,
    )
    return learner, IqlConfig.from_dict(d["config"])


def save_checkpoint(learner: LearnerState, config: IqlConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(checkpoint_dict(learner, config)))
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return learner_from_dict(json.loads(fh.read()))
