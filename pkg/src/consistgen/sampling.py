"""Noise schedule, DDIM/DDPM updates and classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

T_MAX = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule on integer times 1..T; time 0 is the clean latent."""

    n_train_steps: int = T_MAX
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @cached_property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.n_train_steps, dtype=np.float64)

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        # index t holds alpha_bar(t); alpha_bar(0) = 1
        out = np.empty(self.n_train_steps + 1, dtype=np.float64)
        out[0] = 1.0
        out[1:] = np.cumprod(1.0 - self.betas)
        return out

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.n_train_steps:
            raise ValueError(f"timestep {t} outside schedule range [0, {self.n_train_steps}]")
        return float(self.alpha_bars[t])

    def add_noise(self, z0, noise, t: int) -> np.ndarray:
        ab = self.alpha_bar(t)
        return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1.0 - ab) * np.asarray(noise)

    def timesteps(self, n_steps: int) -> list[int]:
        """Descending sampler grid T, T - T/n, ..., T/n (the last step lands on 0)."""
        if n_steps < 1 or self.n_train_steps % n_steps:
            raise ValueError(f"step count {n_steps} must divide {self.n_train_steps}")
        stride = self.n_train_steps // n_steps
        return list(range(self.n_train_steps, 0, -stride))

    def step_pairs(self, n_steps: int) -> list[tuple[int, int]]:
        ts = self.timesteps(n_steps)
        return list(zip(ts, ts[1:] + [0]))


def predict_clean(z_t, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps)) / np.sqrt(ab)


def ddim_step(z_t, eps, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to ``t_prev`` (eta = 0)."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z0 = predict_clean(z_t, eps, t, schedule)
    if t_prev == 0:
        return z0
    ab_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * np.asarray(eps)


def ddpm_mean_std(z_t, eps, t: int, t_prev: int, schedule: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Posterior mean of the strided DDPM step and its noise scale.

    The scale uses the "fixed large" variance sigma^2 = 1 - a(t)/a(t_prev),
    which stays positive on the last step so noise maps are always defined.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    alpha = ab_t / ab_prev
    beta = 1.0 - alpha
    z0 = predict_clean(z_t, eps, t, schedule)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * z0 + ct * np.asarray(z_t), float(np.sqrt(beta))


def ddpm_step(z_t, eps, t: int, t_prev: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    mean, sigma = ddpm_mean_std(z_t, eps, t, t_prev, schedule)
    return mean + sigma * np.asarray(noise)


def cfg(eps_cond, eps_uncond, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    if scale == 1.0:
        return eps_cond.copy()
    if scale == 0.0:
        return eps_uncond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)
