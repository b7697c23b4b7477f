"""Denoising-diffusion machinery over flattened feature tensors.

Forward chain: q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I),
with the cumulative products precomputed so any x_t can be drawn in closed
form. The denoiser predicts the clean signal x0 directly and is trained
with mean squared error; the reverse sampler plugs the clamped prediction
into the standard forward-posterior mean/variance.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

X0_CLIP = 3.0  # latents are near unit scale; clamp keeps early samplers sane


class NoiseSchedule:
    """Linear beta schedule with alpha_bar[t] = prod_{i<=t} (1 - beta_i).

    ``alpha_bar`` has T+1 entries with alpha_bar[0] = 1 (no noise).
    ``one_minus_alpha_bar`` is accumulated by the cancellation-free
    recurrence oma[t] = oma[t-1] + alpha_bar[t-1] * beta_t, so oma[1] equals
    beta_1 bit-exactly and the one-step kernel agrees with the closed form.
    """

    def __init__(self, steps: int, beta_start=1e-4, beta_end=0.02):
        if steps < 1:
            raise ValueError("need at least one step")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError("betas must satisfy 0 < start <= end < 1")
        self.steps = int(steps)
        if steps == 1:
            self.beta = np.array([beta_start])
        else:
            self.beta = np.linspace(beta_start, beta_end, steps)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.beta)])
        oma = np.zeros(steps + 1)
        for t in range(1, steps + 1):
            oma[t] = oma[t - 1] + self.alpha_bar[t - 1] * self.beta[t - 1]
        self.one_minus_alpha_bar = oma

    def __repr__(self):
        return f"NoiseSchedule(steps={self.steps}, beta=[{self.beta[0]}, {self.beta[-1]}])"


def make_schedule(steps: int, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    return NoiseSchedule(steps, beta_start, beta_end)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noisy sample at step ``t`` given the noise draw ``eps``."""
    if not (0 <= t <= schedule.steps):
        raise ValueError(f"t={t} outside 0..{schedule.steps}")
    if eps.shape != x0.shape:
        raise ValueError("noise must match the signal shape")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(schedule.one_minus_alpha_bar[t]) * eps


def iterate_forward(x0: np.ndarray, t: int, rng: np.random.Generator, schedule: NoiseSchedule) -> np.ndarray:
    """t sequential applications of the one-step forward kernel."""
    if not (0 <= t <= schedule.steps):
        raise ValueError(f"t={t} outside 0..{schedule.steps}")
    x = x0
    for i in range(t):
        b = schedule.beta[i]
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(x0.shape)
    return x


def training_loss(model, x0: np.ndarray, t: int, eps: np.ndarray, cond, schedule: NoiseSchedule) -> T.Tensor:
    """MSE between the model's clean-signal prediction and x0."""
    x_t = q_sample(x0, t, eps, schedule)
    pred = model(T.tensor(x_t), t, cond)
    if pred.shape != x0.shape:
        raise ValueError(f"model output {pred.shape} != target {x0.shape}")
    diff = pred - T.tensor(x0)
    return (diff * diff).mean()


def posterior_mean_var(x_t: np.ndarray, x0_hat: np.ndarray, t: int, schedule: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0_hat)."""
    ab_prev = schedule.alpha_bar[t - 1]
    beta_t = schedule.beta[t - 1]
    alpha_t = 1.0 - beta_t
    denom = schedule.one_minus_alpha_bar[t]
    oma_prev = schedule.one_minus_alpha_bar[t - 1]
    mean = (np.sqrt(ab_prev) * beta_t / denom) * x0_hat + (
        np.sqrt(alpha_t) * oma_prev / denom
    ) * x_t
    var = oma_prev / denom * beta_t
    return mean, var


def reverse_step(model, x_t: np.ndarray, t: int, cond, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One denoising step x_t -> x_{t-1}; no noise is added at t = 1."""
    if not (1 <= t <= schedule.steps):
        raise ValueError(f"t={t} outside 1..{schedule.steps}")
    with T.no_grad():
        pred = model(T.tensor(x_t), t, cond)
    x0_hat = np.clip(pred.data, -X0_CLIP, X0_CLIP)
    mean, var = posterior_mean_var(x_t, x0_hat, t, schedule)
    if t == 1:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(x_t.shape)


def sample(model, shape, cond, schedule: NoiseSchedule, seed: int, t_start: int | None = None, x_init: np.ndarray | None = None) -> np.ndarray:
    """Run the reverse chain from pure noise (or from ``x_init`` at ``t_start``).

    Deterministic in (model parameters, cond, seed).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0xD1FF)))
    t0 = schedule.steps if t_start is None else int(t_start)
    if not (1 <= t0 <= schedule.steps):
        raise ValueError(f"t_start={t0} outside 1..{schedule.steps}")
    if x_init is None:
        x = rng.standard_normal(shape)
    else:
        if x_init.shape != tuple(shape):
            raise ValueError("x_init shape mismatch")
        x = x_init
    for t in range(t0, 0, -1):
        x = reverse_step(model, x, t, cond, schedule, rng)
    return x


def renoise(x0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Push a clean signal back to noise level ``t`` with a fresh draw."""
    return q_sample(x0, t, rng.standard_normal(x0.shape), schedule)
