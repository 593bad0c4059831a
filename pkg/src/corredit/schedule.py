"""Noise schedule, forward noising and deterministic DDIM (eta = 0).

``alpha_bar[t]`` is the cumulative product of ``1 - beta``: the clean signal
is scaled by ``sqrt(alpha_bar)`` and the noise by ``sqrt(1 - alpha_bar)``.
Timestep ``-1`` (:data:`TERMINAL`) denotes the clean end point with
``alpha_bar = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ParameterError, ScheduleError, ShapeError

TERMINAL = -1

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def num_train_steps(self) -> int:
        return len(self.alpha_bar)

    def abar(self, t: int) -> float:
        if t == TERMINAL:
            return 1.0
        if not 0 <= t < len(self.alpha_bar):
            raise ScheduleError(f"timestep {t} outside [0, {len(self.alpha_bar)})")
        return float(self.alpha_bar[t])


def make_schedule(num_train_steps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ParameterError(f"unsupported schedule kind {kind!r}")
    if num_train_steps < 2:
        raise ParameterError("num_train_steps must be >= 2")
    # beta_start = 0 is accepted so the degenerate all-ones schedule is expressible.
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bar, beta_start, beta_end)


def add_noise(x0: np.ndarray, z: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    if np.shape(x0) != np.shape(z):
        raise ShapeError(f"x0 shape {np.shape(x0)} != noise shape {np.shape(z)}")
    a = schedule.abar(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * z


def timestep_subsequence(schedule: NoiseSchedule, num_inference_steps: int) -> list[int]:
    """Evenly strided descending timesteps ending at 0."""
    n = schedule.num_train_steps
    if num_inference_steps <= 0:
        raise ParameterError("num_inference_steps must be positive")
    if num_inference_steps > n:
        raise ParameterError(f"num_inference_steps {num_inference_steps} > train steps {n}")
    stride = n // num_inference_steps
    return [int(t) for t in (np.arange(num_inference_steps) * stride)[::-1]]


def predict_x0(x_t: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule.abar(t)
    if a <= 0.0:
        raise ScheduleError(f"alpha_bar[{t}] is zero; cannot recover x0")
    return (x_t - np.sqrt(1.0 - a) * eps) / np.sqrt(a)


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic DDIM update from ``t`` to ``t_prev``."""
    if np.shape(x_t) != np.shape(eps):
        raise ShapeError(f"x_t shape {np.shape(x_t)} != eps shape {np.shape(eps)}")
    x0_hat = predict_x0(x_t, eps, t, schedule)
    a_prev = schedule.abar(t_prev)
    return np.sqrt(a_prev) * x0_hat + np.sqrt(1.0 - a_prev) * eps


def step_pairs(timesteps: list[int]) -> list[tuple[int, int]]:
    """Consecutive ``(t, t_prev)`` pairs of a descending list, closed by TERMINAL."""
    return list(zip(timesteps, list(timesteps[1:]) + [TERMINAL]))


def ddim_sample(x_T: np.ndarray, eps_fn: EpsFn, schedule: NoiseSchedule,
                num_steps: int) -> np.ndarray:
    x = x_T
    for t, t_prev in step_pairs(timestep_subsequence(schedule, num_steps)):
        x = ddim_step(x, eps_fn(x, t), t, t_prev, schedule)
    return x


def ddim_invert(x0: np.ndarray, eps_fn: EpsFn, schedule: NoiseSchedule, num_steps: int,
                fixed_point_iters: int = 10, tol: float = 1e-12,
                return_trajectory: bool = False):
    """Run the DDIM recurrence forward from ``x0`` to the noisiest timestep.

    Each step solves ``ddim_step(x_t, eps_fn(x_t, t), t, t_prev) == x_prev``
    for ``x_t`` by fixed-point iteration, so sampling back with the same
    ``eps_fn`` retraces the path; iteration stops once an update moves less
    than ``tol`` (max-abs). ``fixed_point_iters=0`` is the plain
    one-shot inversion that evaluates eps at the previous latent.

    With ``return_trajectory`` the latents are also returned keyed by timestep.
    """
    pairs = step_pairs(timestep_subsequence(schedule, num_steps))[::-1]
    x = np.asarray(x0, dtype=np.float64)
    traj = {TERMINAL: x}
    for t, t_prev in pairs:
        a, a_prev = schedule.abar(t), schedule.abar(t_prev)
        eps = eps_fn(x, t)
        x_prev = x
        x_t = np.sqrt(a) * (x_prev - np.sqrt(1 - a_prev) * eps) / np.sqrt(a_prev) + np.sqrt(1 - a) * eps
        for _ in range(fixed_point_iters):
            eps = eps_fn(x_t, t)
            x_new = np.sqrt(a) * (x_prev - np.sqrt(1 - a_prev) * eps) / np.sqrt(a_prev) + np.sqrt(1 - a) * eps
            moved = np.max(np.abs(x_new - x_t)) if x_new.size else 0.0
            x_t = x_new
            if moved < tol:
                break
        x = x_t
        traj[t] = x
    if return_trajectory:
        return x, traj
    return x
