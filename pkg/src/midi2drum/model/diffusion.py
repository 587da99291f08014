"""Noise schedule, v-objective, guidance and samplers."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np


def noise_schedule(t: float | np.ndarray):
    """Cosine schedule on the unit circle: alpha = cos(pi t / 2), sigma = sin(pi t / 2)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    alpha = np.cos(0.5 * np.pi * t)
    sigma = np.sin(0.5 * np.pi * t)
    # pin the endpoints, cos(pi/2) is 6e-17 in floating point
    alpha = np.where(t == 1.0, 0.0, alpha)
    sigma = np.where(t == 1.0, 1.0, sigma)
    if alpha.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def forward_diffusion(z0: np.ndarray, z1: np.ndarray, t: float):
    """Return (z_t, v_target) with z_t = a z0 + s z1 and v = a z1 - s z0."""
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    a, s = noise_schedule(t)
    return a * z0 + s * z1, a * z1 - s * z0


def v_loss(v_hat: np.ndarray, v_target: np.ndarray) -> float:
    v_hat = np.asarray(v_hat)
    v_target = np.asarray(v_target)
    if v_hat.shape != v_target.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {v_target.shape}")
    return float(np.mean((v_hat - v_target) ** 2))


def cfg_combine(v_cond, v_uncond, scale: float):
    return v_uncond + scale * (v_cond - v_uncond)


def v_to_x0_eps(z_t, v, t):
    a, s = noise_schedule(t)
    return a * z_t - s * v, s * z_t + a * v


SAMPLERS = ("ddim", "dpmpp_2m")


def sample(
    predict_v: Callable[[np.ndarray, float, bool], np.ndarray],
    shape: tuple[int, ...],
    steps: int = 10,
    guidance_scale: float = 1.0,
    sampler: str = "dpmpp_2m",
    seed: int = 0,
    dtype=np.float64,
) -> np.ndarray:
    """Integrate from pure noise at t=1 down to t=0.

    ``predict_v(z_t, t, blank)`` returns the model's v estimate; ``blank``
    asks for the unconditional (reference-blanked) prediction.  With
    ``guidance_scale == 1`` the unconditional branch is never evaluated.
    The result is the clean estimate x0 from the final model call.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape).astype(dtype)
    ts = np.linspace(1.0, 0.0, steps + 1)
    prev_x0 = None
    prev_lambda = None
    x0 = z
    for i in range(steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        v = predict_v(z, t, False)
        if guidance_scale != 1.0:
            v = cfg_combine(v, predict_v(z, t, True), guidance_scale)
        x0, eps = v_to_x0_eps(z, v, t)
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(eps))):
            raise FloatingPointError(f"non-finite sampler state at step {i}")
        if i == steps - 1:
            break
        a, s = noise_schedule(t)
        a_n, s_n = noise_schedule(t_next)
        lam = math.log(a / s) if a > 0 else -math.inf
        lam_next = math.log(a_n / s_n)
        if sampler == "ddim" or prev_x0 is None or not math.isfinite(prev_lambda):
            z = a_n * x0 + s_n * eps
        else:
            h = lam_next - lam
            r = (lam - prev_lambda) / h
            d = (1.0 + 0.5 / r) * x0 - (0.5 / r) * prev_x0
            z = (s_n / s) * z - a_n * math.expm1(-h) * d
        prev_x0, prev_lambda = x0, lam
    return x0
