"""Parametric function approximators with hand-written gradients, plus Adam.

Three kinds share one contract:

* ``table``  - input is an integer index, output is the stored row.
* ``linear`` - input is a feature vector, output is ``W @ x``.
* ``mlp``    - two rectifier hidden layers followed by a linear head.

All functions accept either a single input or a leading batch dimension.
Parameters live in one flat vector so that Polyak averaging, Adam and
checkpointing do not care about the kind.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError, ShapeError

KINDS = ("table", "linear", "mlp")
SCHEDULES = ("constant", "cosine")

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class Approximator:
    kind: str
    n_in: int
    n_out: int
    params: np.ndarray
    hidden: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown approximator kind {self.kind!r}")
        expected = param_count(self.kind, self.n_in, self.n_out, self.hidden)
        if self.params.shape != (expected,):
            raise ShapeError(
                f"{self.kind} with n_in={self.n_in}, n_out={self.n_out}, "
                f"hidden={self.hidden} needs {expected} parameters, got {self.params.shape}"
            )
        if not np.all(np.isfinite(self.params)):
            raise ParameterError("approximator parameters must be finite")

    def __eq__(self, other):
        if not isinstance(other, Approximator):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.n_in == other.n_in
            and self.n_out == other.n_out
            and tuple(self.hidden) == tuple(other.hidden)
            and np.array_equal(self.params, other.params)
        )

    def with_params(self, params: np.ndarray) -> "Approximator":
        return replace(self, params=params)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "hidden": list(self.hidden),
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Approximator":
        return cls(
            kind=d["kind"],
            n_in=int(d["n_in"]),
            n_out=int(d["n_out"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            params=np.asarray(d["params"], dtype=float),
        )


def param_count(kind: str, n_in: int, n_out: int, hidden=()) -> int:
    if kind in ("table", "linear"):
        return n_in * n_out
    if kind == "mlp":
        if len(hidden) != 2:
            raise ShapeError("mlp needs exactly two hidden widths")
        h1, h2 = hidden
        return h1 * n_in + h1 + h2 * h1 + h2 + n_out * h2 + n_out
    raise ParameterError(f"unknown approximator kind {kind!r}")


def _mlp_views(model: Approximator):
    h1, h2 = model.hidden
    p = model.params
    shapes = [(h1, model.n_in), (h1,), (h2, h1), (h2,), (model.n_out, h2), (model.n_out,)]
    views, i = [], 0
    for shape in shapes:
        size = math.prod(shape)
        views.append(p[i:i + size].reshape(shape))
        i += size
    return views


def init(kind: str, n_in: int, n_out: int, hidden=(256, 256), seed: int = 0) -> Approximator:
    """Zero-output initialization: tables and linear maps start at zero, an
    mlp gets fan-in scaled uniform hidden layers and a zero head."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("n_in and n_out must be positive")
    if kind != "mlp":
        hidden = ()
        return Approximator(kind, n_in, n_out, np.zeros(n_in * n_out), ())
    hidden = tuple(int(h) for h in hidden)
    if len(hidden) != 2 or min(hidden) < 1:
        raise ShapeError(f"mlp needs two positive hidden widths, got {hidden}")
    rng = np.random.default_rng(seed)
    h1, h2 = hidden
    b1 = 1.0 / math.sqrt(n_in)
    b2 = 1.0 / math.sqrt(h1)
    parts = [
        rng.uniform(-b1, b1, size=h1 * n_in),
        rng.uniform(-b1, b1, size=h1),
        rng.uniform(-b2, b2, size=h2 * h1),
        rng.uniform(-b2, b2, size=h2),
        np.zeros(n_out * h2),
        np.zeros(n_out),
    ]
    return Approximator(kind, n_in, n_out, np.concatenate(parts), hidden)


def _check_input(model: Approximator, x):
    if model.kind == "table":
        idx = np.asarray(x)
        if not np.issubdtype(idx.dtype, np.integer):
            raise ShapeError("table approximators take integer indices")
        if idx.ndim > 1:
            raise ShapeError(f"table input must be an index or 1-D index batch, got {idx.shape}")
        if np.any(idx < 0) or np.any(idx >= model.n_in):
            raise ShapeError(f"table index out of range [0, {model.n_in})")
        return idx
    feats = np.asarray(x, dtype=float)
    if feats.ndim not in (1, 2) or feats.shape[-1] != model.n_in:
        raise ShapeError(f"expected features with trailing size {model.n_in}, got {feats.shape}")
    return feats


def _mlp_forward(model, feats):
    W1, b1, W2, b2, W3, b3 = _mlp_views(model)
    z1 = feats @ W1.T + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ W2.T + b2
    a2 = np.maximum(z2, 0.0)
    return (z1, a1, z2, a2), a2 @ W3.T + b3


def evaluate(model: Approximator, x) -> np.ndarray:
    """Output row(s) for input ``x``; batch in, batch out."""
    x = _check_input(model, x)
    if model.kind == "table":
        return model.params.reshape(model.n_in, model.n_out)[x]
    if model.kind == "linear":
        return x @ model.params.reshape(model.n_out, model.n_in).T
    return _mlp_forward(model, x)[1]


def grad(model: Approximator, x, cotangent) -> np.ndarray:
    """Gradient of ``sum(cotangent * evaluate(model, x))`` w.r.t. the flat
    parameters. Batched inputs are summed over the batch."""
    x = _check_input(model, x)
    ct = np.asarray(cotangent, dtype=float)
    single = (x.ndim == 0) if model.kind == "table" else (x.ndim == 1)
    expected = (model.n_out,) if single else (x.shape[0], model.n_out)
    if ct.shape != expected:
        raise ShapeError(f"cotangent shape {ct.shape} != output shape {expected}")
    if single:
        x = x[None] if model.kind == "table" else x[None, :]
        ct = ct[None, :]
    if model.kind == "table":
        g = np.zeros((model.n_in, model.n_out))
        np.add.at(g, x, ct)
        return g.ravel()
    if model.kind == "linear":
        return (ct.T @ x).ravel()
    W1, b1, W2, b2, W3, b3 = _mlp_views(model)
    (z1, a1, z2, a2), _ = _mlp_forward(model, x)
    gW3 = ct.T @ a2
    gb3 = ct.sum(axis=0)
    d2 = (ct @ W3) * (z2 > 0)
    gW2 = d2.T @ a1
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ W2) * (z1 > 0)
    gW1 = d1.T @ x
    gb1 = d1.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Adam moments plus a learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    step: int = 0
    schedule: str = "constant"
    horizon: int = 0
    schedule_start: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.horizon < 1:
            raise ParameterError("cosine schedule needs a positive horizon")
        if self.m.shape != self.v.shape:
            raise ShapeError("moment accumulators must have equal length")

    def __eq__(self, other):
        if not isinstance(other, OptimizerState):
            return NotImplemented
        return (
            self.lr == other.lr
            and self.step == other.step
            and self.schedule == other.schedule
            and self.horizon == other.horizon
            and self.schedule_start == other.schedule_start
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.v, other.v)
        )

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "step": self.step,
            "schedule": self.schedule,
            "horizon": self.horizon,
            "schedule_start": self.schedule_start,
            "m": self.m.tolist(),
            "v": self.v.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(
            m=np.asarray(d["m"], dtype=float),
            v=np.asarray(d["v"], dtype=float),
            lr=float(d["lr"]),
            step=int(d["step"]),
            schedule=d["schedule"],
            horizon=int(d["horizon"]),
            schedule_start=int(d.get("schedule_start", 0)),
        )


def adam(model: Approximator, lr: float = 3e-4, schedule: str = "constant",
         horizon: int = 0) -> OptimizerState:
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    n = model.params.size
    return OptimizerState(np.zeros(n), np.zeros(n), float(lr), 0, schedule, int(horizon))


def scheduled_lr(opt: OptimizerState, step: int | None = None) -> float:
    """Learning rate used for update number ``step`` (0-based, counted from
    ``schedule_start``)."""
    t = (opt.step if step is None else step) - opt.schedule_start
    if opt.schedule == "constant":
        return opt.lr
    frac = min(max(t, 0), opt.horizon) / opt.horizon
    return opt.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def apply_update(model: Approximator, opt: OptimizerState, gradient):
    """One bias-corrected Adam step; returns ``(model', opt')``."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != model.params.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {model.params.shape}")
    if not np.all(np.isfinite(g)):
        raise ParameterError("gradient contains non-finite entries")
    lr = scheduled_lr(opt)
    t = opt.step + 1
    m = ADAM_B1 * opt.m + (1.0 - ADAM_B1) * g
    v = ADAM_B2 * opt.v + (1.0 - ADAM_B2) * g * g
    m_hat = m / (1.0 - ADAM_B1**t)
    v_hat = v / (1.0 - ADAM_B2**t)
    params = model.params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return model.with_params(params), replace(opt, m=m, v=v, step=t)


def polyak_update(target: Approximator, online: Approximator, rate: float) -> Approximator:
    if not 0.0 < rate <= 1.0:
        raise ParameterError(f"polyak rate must lie in (0, 1], got {rate}")
    if target.params.shape != online.params.shape or target.kind != online.kind:
        raise ShapeError("target and online approximators differ in shape")
    if rate == 1.0:
        return target.with_params(online.params.copy())
    return target.with_params((1.0 - rate) * target.params + rate * online.params)


def save_checkpoint(model: Approximator, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(model.to_dict()))
        fh.write("\n")


def load_checkpoint(path) -> Approximator:
    with open(path, encoding="utf-8") as fh:
        return Approximator.from_dict(json.loads(fh.read()))
