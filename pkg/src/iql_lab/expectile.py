"""Asymmetric losses and expectile estimation."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import approx
from .errors import DivergenceError, ParameterError

DEFAULT_TOL = 1e-10
_MAX_BISECTIONS = 400


class WeightedSample(NamedTuple):
    value: float
    weight: float


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"tau must lie in the open interval (0, 1), got {tau}")
    return tau


def asym_l2_loss(u, tau: float):
    """``|tau - 1(u < 0)| * u**2``; works on scalars and arrays."""
    u = np.asarray(u, dtype=float)
    out = np.where(u >= 0, tau, 1.0 - tau) * u * u
    return float(out) if out.ndim == 0 else out


def asym_l2_grad(u, tau: float):
    u = np.asarray(u, dtype=float)
    out = 2.0 * np.where(u >= 0, tau, 1.0 - tau) * u
    return float(out) if out.ndim == 0 else out


def asym_l1_loss(u, tau: float):
    """Quantile (pinball) loss."""
    u = np.asarray(u, dtype=float)
    out = np.where(u >= 0, tau * u, (1.0 - tau) * -u)
    return float(out) if out.ndim == 0 else out


def asym_l1_grad(u, tau: float):
    u = np.asarray(u, dtype=float)
    out = np.where(u > 0, tau, np.where(u < 0, tau - 1.0, 0.0))
    return float(out) if out.ndim == 0 else out


def first_order_condition(values, weights, m, tau: float) -> float:
    """``tau*E[(X-m)+] - (1-tau)*E[(m-X)+]``; zero at the expectile."""
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    above = np.maximum(values - m, 0.0)
    below = np.maximum(m - values, 0.0)
    return float(tau * (w @ above) - (1.0 - tau) * (w @ below))


def expectile_rows(values, weights, tau: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Row-wise weighted expectiles by simultaneous bisection.

    ``values`` and ``weights`` are ``(n, k)`` arrays; each row with positive
    total weight yields ``m`` with ``|first_order_condition| <= tol``.
    """
    tau = check_tau(tau)
    if tol <= 0:
        raise ParameterError("tol must be positive")
    values = np.atleast_2d(np.asarray(values, dtype=float))
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if values.shape != w.shape:
        raise ParameterError("values and weights must have the same shape")
    if np.any(w < 0):
        raise ParameterError("sample weights must be nonnegative")
    total = w.sum(axis=1)
    if np.any(total <= 0):
        raise ParameterError("every sample set needs positive total weight")
    w = w / total[:, None]
    live = w > 0
    lo = np.where(live, values, np.inf).min(axis=1)
    hi = np.where(live, values, -np.inf).max(axis=1)
    m = 0.5 * (lo + hi)
    for _ in range(_MAX_BISECTIONS):
        diff = values - m[:, None]
        f = tau * (w * np.maximum(diff, 0.0)).sum(axis=1) - (1.0 - tau) * (
            w * np.maximum(-diff, 0.0)
        ).sum(axis=1)
        done = np.abs(f) <= tol
        if np.all(done):
            break
        # f is decreasing in m: positive means the root lies above.
        lo = np.where(~done & (f > 0), m, lo)
        hi = np.where(~done & (f < 0), m, hi)
        m = np.where(done, m, 0.5 * (lo + hi))
        if np.all(done | (hi - lo <= 0)):
            break
    return m


def scalar_expectile(samples: Sequence, tau: float, tol: float = DEFAULT_TOL) -> float:
    """Expectile of a finite weighted sample set.

    ``samples`` holds :class:`WeightedSample` items, ``(value, weight)``
    pairs, or bare numbers (unit weight).
    """
    if len(samples) == 0:
        raise ParameterError("scalar_expectile needs at least one sample")
    vals, wts = [], []
    for s in samples:
        if isinstance(s, (tuple, list)):
            vals.append(float(s[0]))
            wts.append(float(s[1]))
        else:
            vals.append(float(s))
            wts.append(1.0)
    return float(expectile_rows(np.array([vals]), np.array([wts]), tau, tol)[0])


def fit_conditional_expectile(
    pairs,
    tau: float,
    model: approx.Approximator,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> approx.Approximator:
    """Fit ``m(x)`` minimizing ``E[L2_tau(y - m(x))]`` by minibatch Adam.

    ``pairs`` is a sequence of ``(input, target)``; inputs are indices for a
    table model and feature vectors otherwise. The model must have a single
    output.
    """
    tau = check_tau(tau)
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if lr <= 0:
        raise ParameterError("lr must be positive")
    if model.n_out != 1:
        raise ParameterError("conditional expectile models need exactly one output")
    inputs = [p[0] for p in pairs]
    xs = np.asarray(inputs, dtype=int if model.kind == "table" else float)
    ys = np.asarray([p[1] for p in pairs], dtype=float)
    opt = approx.adam(model, lr)
    n = ys.size
    for t in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        x, y = xs[idx], ys[idx]
        pred = approx.evaluate(model, x)[:, 0]
        u = y - pred
        loss = float(np.mean(asym_l2_loss(u, tau)))
        if not np.isfinite(loss):
            raise DivergenceError("non-finite expectile loss", step=t)
        cot = (-asym_l2_grad(u, tau) / idx.size)[:, None]
        model, opt = approx.apply_update(model, opt, approx.grad(model, x, cot))
    return model
