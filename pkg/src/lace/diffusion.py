"""Noise schedules, forward corruption and the DDPM / DDIM reverse kernels.

All functions work on plain arrays of any shape; a leading batch axis is
allowed everywhere. Timesteps index ``1..T``; index 0 stands for clean data.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep: position 0 holds the t=0 convention."""

    betas: np.ndarray  # (T + 1,), betas[0] = 0

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ScheduleError("schedule needs at least one step")
        if b[0] != 0.0:
            b = np.concatenate([[0.0], b])
        if np.any(b[1:] <= 0) or np.any(b[1:] >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        post = np.zeros_like(b)
        post[1:] = (1.0 - prev[1:]) / (1.0 - alpha_bars[1:]) * b[1:]
        for name, arr in (("alphas", alphas), ("alpha_bars", alpha_bars), ("posterior_vars", post)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.betas.size - 1

    def to_json(self) -> dict:
        return {"T": self.T, "betas": self.betas[1:].tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        betas = np.asarray(obj["betas"], dtype=np.float64)
        if betas.size != int(obj["T"]):
            raise ScheduleError(f"T={obj['T']} but {betas.size} betas given")
        return cls(betas)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def make_constant_schedule(T: int, beta: float) -> NoiseSchedule:
    return make_linear_schedule(T, beta, beta)


def _coef(arr: np.ndarray, t, ndim: int) -> np.ndarray:
    """Gather per-timestep coefficients and shape them for broadcasting."""
    c = arr[np.asarray(t)]
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def _check_t(t, schedule: NoiseSchedule, low: int = 1) -> None:
    t = np.asarray(t)
    if np.any(t < low) or np.any(t > schedule.T):
        raise ScheduleError(f"timestep out of range [{low}, {schedule.T}]")


def q_sample(x0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward corruption ``sqrt(abar) x0 + sqrt(1 - abar) noise``.

    ``t`` is a scalar or one step per leading batch item.
    """
    _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = _coef(schedule.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def q_step(x_prev: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Single forward transition ``q(x_t | x_{t-1})``."""
    _check_t(t, schedule)
    b = schedule.betas[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    _check_t(t, schedule)
    ab = _coef(schedule.alpha_bars, t, np.ndim(x_t))
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def predict_x0_grad_scale(t, schedule: NoiseSchedule) -> np.ndarray:
    """d predict_x0 / d eps_hat (a scalar multiple of the identity)."""
    ab = schedule.alpha_bars[np.asarray(t)]
    return -np.sqrt(1.0 - ab) / np.sqrt(ab)


def posterior_mean(x_t: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    nd = np.ndim(x_t)
    a = _coef(schedule.alphas, t, nd)
    b = _coef(schedule.betas, t, nd)
    ab = _coef(schedule.alpha_bars, t, nd)
    return (x_t - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)


def ddpm_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    noise_draw: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; the last step (t = 1) adds no noise."""
    _check_t(t, schedule)
    mean = posterior_mean(x_t, eps_hat, t, schedule)
    if t == 1 or noise_draw is None:
        return mean
    return mean + np.sqrt(schedule.posterior_vars[t]) * noise_draw


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Decreasing sub-sequence ``T, T - s, ...`` with stride ``s = T // num_steps``.

    The final entry is forced to 1 so the sampler always finishes on the
    least-noisy step.
    """
    if not 1 <= num_steps <= T:
        raise ScheduleError(f"num_steps must be in [1, {T}], got {num_steps}")
    stride = T // num_steps
    seq = T - stride * np.arange(num_steps)
    seq[-1] = 1
    return seq


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 100
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ScheduleError("num_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError("eta must be in [0, 1]")


def apply_condition(mask: np.ndarray | None, x0_known: np.ndarray | None, x_t: np.ndarray) -> np.ndarray:
    if mask is None:
        return x_t
    return np.where(mask != 0, x0_known, x_t)


def ddim_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    shape: tuple[int, ...] | None = None,
    condition: tuple[np.ndarray, np.ndarray] | None = None,
    x_start: np.ndarray | None = None,
    t_start: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run the DDIM reverse process and return the clean state.

    Args:
        denoiser: callable ``(x[B, L, D], t[B]) -> eps_hat[B, L, D]``.
        shape: ``(B, L, D)`` of the initial Gaussian state; taken from the
            condition or ``x_start`` when omitted.
        condition: ``(mask, x0_known)`` broadcastable to ``shape``. Masked
            entries are clamped to ``x0_known`` before every denoiser call
            and in the returned sample.
        x_start, t_start: start a partial reverse process from a given state
            at step ``t_start`` instead of pure noise at ``T`` (refinement).
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if condition is not None:
        mask, x0_known = (np.asarray(a, dtype=np.float64) for a in condition)
        if mask.shape != x0_known.shape:
            raise ValueError(f"condition mask {mask.shape} and values {x0_known.shape} differ")
        if shape is None:
            shape = x0_known.shape
        if mask.shape[-2:] != tuple(shape[-2:]):
            raise ValueError(f"condition shape {mask.shape} does not match state {shape}")
    else:
        mask = x0_known = None

    if x_start is not None:
        x = np.array(x_start, dtype=np.float64)
        t_hi = schedule.T if t_start is None else int(t_start)
        _check_t(t_hi, schedule)
        n = max(1, min(config.num_steps, t_hi))
        seq = ddim_timesteps(t_hi, n)
    else:
        if shape is None:
            raise ValueError("shape is required for unconditional sampling")
        x = rng.standard_normal(shape)
        seq = ddim_timesteps(schedule.T, config.num_steps)

    batch = x.shape[0] if x.ndim == 3 else 1
    ab = schedule.alpha_bars
    for k, t in enumerate(seq):
        t_next = int(seq[k + 1]) if k + 1 < len(seq) else 0
        x_hat = apply_condition(mask, x0_known, x)
        eps = denoiser(x_hat, np.full(batch, t, dtype=np.int64))
        if eps.shape != x_hat.shape:
            raise ValueError(f"denoiser returned {eps.shape}, expected {x_hat.shape}")
        x0_pred = (x_hat - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        if t_next == 0:
            x = x0_pred
            break
        sigma = 0.0
        if config.eta > 0:
            sigma = config.eta * np.sqrt((1 - ab[t_next]) / (1 - ab[t]) * (1 - ab[t] / ab[t_next]))
        x = np.sqrt(ab[t_next]) * x0_pred + np.sqrt(1.0 - ab[t_next] - sigma**2) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return apply_condition(mask, x0_known, x)


def ddpm_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    condition: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Full ancestral sampling over all ``T`` steps."""
    mask, x0_known = condition if condition is not None else (None, None)
    x = rng.standard_normal(shape)
    batch = shape[0] if len(shape) == 3 else 1
    for t in range(schedule.T, 0, -1):
        x_hat = apply_condition(mask, x0_known, x)
        eps = denoiser(x_hat, np.full(batch, t, dtype=np.int64))
        x = ddpm_step(x_hat, eps, t, schedule, rng.standard_normal(shape) if t > 1 else None)
    return apply_condition(mask, x0_known, x)


def schedule_hash(schedule: NoiseSchedule) -> str:
    return hashlib.sha256(json.dumps(schedule.to_json()).encode()).hexdigest()[:16]
