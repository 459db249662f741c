"""Noise schedule, forward noising, and v-parameterization helpers.

The schedule is a linear beta ramp whose cumulative signal level is rescaled
so the terminal step carries zero signal: sqrt(alpha_bar) is shifted and
scaled to end exactly at 0 while keeping its first entry unchanged. Sampling
then must start from pure noise, which the v-parameterization handles (at
zero signal the model output is -x0).

All schedule arrays are float64; data-space operations cast to the data dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray           # effective per-step beta after rescaling
    alpha_bar: np.ndarray      # cumulative product of (1 - beta)
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus: np.ndarray


def build_schedule(timesteps=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    """Linear beta schedule with the zero-terminal-signal rescale applied."""
    if timesteps < 2:
        raise UsageError("schedule needs at least 2 timesteps")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise UsageError(f"bad beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    sqrt_ab = np.sqrt(alpha_bar)

    # Shift so the last entry is zero, rescale so the first keeps its value.
    s0, sT = sqrt_ab[0], sqrt_ab[-1]
    sqrt_ab = (sqrt_ab - sT) * (s0 / (s0 - sT))
    sqrt_ab[0] = s0
    sqrt_ab[-1] = 0.0

    alpha_bar = sqrt_ab ** 2
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(prev > 0, alpha_bar / prev, 0.0)
    beta_eff = 1.0 - alpha
    return NoiseSchedule(
        timesteps=timesteps,
        beta=beta_eff,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=sqrt_ab,
        sqrt_one_minus=np.sqrt(1.0 - alpha_bar),
    )


def _coeffs(sched, t, x0):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.timesteps):
        raise UsageError(f"timestep out of [0, {sched.timesteps})")
    extra = (1,) * (x0.ndim - 1)
    a = sched.sqrt_alpha_bar[t].reshape(t.shape + extra)
    b = sched.sqrt_one_minus[t].reshape(t.shape + extra)
    return a.astype(x0.dtype), b.astype(x0.dtype)


def q_sample(sched, x0, t, eps):
    """Noise clean data to timestep t: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise UsageError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    a, b = _coeffs(sched, t, x0)
    return a * x0 + b * eps


def v_target(sched, x0, t, eps):
    """Velocity target: sqrt(ab)*eps - sqrt(1-ab)*x0."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    a, b = _coeffs(sched, t, x0)
    return a * eps - b * x0


def predict_from_v(sched, x_t, t, v):
    """Invert the v-parameterization: returns (x0_hat, eps_hat)."""
    x_t = np.asarray(x_t)
    v = np.asarray(v)
    a, b = _coeffs(sched, t, x_t)
    x0_hat = a * x_t - b * v
    eps_hat = b * x_t + a * v
    return x0_hat, eps_hat


def select_timesteps(timesteps, count):
    """Evenly spaced sampling subset, descending, always starting at T-1.

    Indices round down; with count == 1 the subset is just [T-1].
    """
    if count < 1 or count > timesteps:
        raise UsageError(f"subset size {count} out of [1, {timesteps}]")
    if count == 1:
        return np.array([timesteps - 1], dtype=np.int64)
    grid = np.linspace(timesteps - 1, 0, count)
    steps = np.floor(grid).astype(np.int64)
    if len(np.unique(steps)) != count:
        raise UsageError(f"subset size {count} collapses duplicate timesteps")
    return steps
