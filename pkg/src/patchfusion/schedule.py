"""Noise schedules, forward diffusion, deterministic DDIM steps, guidance,
and the scaled-cosine decay curves that weight the fusion terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Latent, RngStream, validate_latent

DEFAULT_T_TRAIN = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012
DEFAULT_INFERENCE_STEPS = 50
DEFAULT_GUIDANCE_SCALE = 7.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule plus the inference-time timestep subsequence.

    ``alpha_bars[t]`` is the cumulative signal fraction at training step t,
    with ``alpha_bars[0] == 1``. ``timestep_sequence`` is strictly
    decreasing, uniformly strided over [1, T_train].
    """

    T_train: int
    betas: np.ndarray        # float64, shape (T_train,), betas[i] is beta_{i+1}
    alpha_bars: np.ndarray   # float64, shape (T_train + 1,)
    inference_steps: int
    timestep_sequence: tuple[int, ...]

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T_train:
            raise ValueError(f"timestep {t} outside [0, {self.T_train}]")
        return float(self.alpha_bars[t])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T_train:
            raise ValueError(f"timestep {t} outside [1, {self.T_train}]")
        return float(self.betas[t - 1])


@dataclass(frozen=True)
class DecayParams:
    """Exponents and sigma range for the three scaled-cosine decay curves."""

    alpha1: float = 3.0   # skip-residual blend exponent
    alpha2: float = 1.0   # global/local fusion exponent
    alpha3: float = 1.0   # blur-sigma exponent
    sigma1: float = 1.0
    sigma2: float = 0.01

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "sigma1", "sigma2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.sigma2 < self.sigma1:
            raise ValueError("sigma2 must be smaller than sigma1")


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance scale plus the opaque conditioning tokens."""

    scale: float = DEFAULT_GUIDANCE_SCALE
    conditioning_id: str = ""
    unconditional_id: str = ""

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be nonnegative")


def build_schedule(T_train: int = DEFAULT_T_TRAIN,
                   beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END,
                   inference_steps: int = DEFAULT_INFERENCE_STEPS) -> NoiseSchedule:
    """Scaled-linear beta law (linear in sqrt space), cumulative-product
    alpha-bars, and a uniformly strided descending timestep subsequence."""
    if T_train < 1:
        raise ValueError("T_train must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= inference_steps <= T_train:
        raise ValueError(f"inference_steps must be in [1, T_train], got {inference_steps}")

    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T_train,
                        dtype=np.float64) ** 2
    alpha_bars = np.concatenate(([1.0], np.cumprod(1.0 - betas)))

    stride = T_train / inference_steps
    timesteps = tuple(T_train - int(math.floor(k * stride + 0.5))
                      for k in range(inference_steps))
    return NoiseSchedule(T_train=T_train, betas=betas, alpha_bars=alpha_bars,
                         inference_steps=inference_steps,
                         timestep_sequence=timesteps)


def diffuse_trajectory(z0: Latent, schedule: NoiseSchedule,
                       rng: RngStream) -> list[tuple[int, Latent]]:
    """One stochastic noising trajectory of ``z0``.

    Runs the full per-step recursion z_t = sqrt(1-beta_t) z_{t-1} +
    sqrt(beta_t) eps_t with fresh noise per step, so entries are correlated
    along t (a single path, not independent redraws). Only the states at
    t = 0 and at the inference timesteps are retained.
    """
    validate_latent(z0, "z0")
    retain = set(schedule.timestep_sequence)
    kept: dict[int, Latent] = {0: z0.copy()}
    z = z0
    for t in range(1, schedule.T_train + 1):
        beta = float(schedule.betas[t - 1])
        eps = rng.standard_normal(z.shape)
        z = math.sqrt(1.0 - beta) * z + math.sqrt(beta) * eps
        if t in retain:
            kept[t] = z.copy()
    return sorted(kept.items())


def diffuse_closed_form(z0: Latent, t: int, eps: Latent,
                        schedule: NoiseSchedule) -> Latent:
    """Jump straight to step t: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    validate_latent(z0, "z0")
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    a = schedule.alpha_bar(t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def ddim_step(z_t: Latent, eps_hat: Latent, t: int, t_prev: int,
              schedule: NoiseSchedule) -> Latent:
    """Deterministic denoising update from step t to t_prev (eta = 0)."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if eps_hat.shape != z_t.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != z_t shape {z_t.shape}")
    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar(t_prev)
    x0_pred = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0_pred + math.sqrt(1.0 - a_prev) * eps_hat


def cfg_combine(eps_uncond: Latent, eps_cond: Latent, g: float) -> Latent:
    """Classifier-free guidance: uncond + g * (cond - uncond).

    g = 0 and g = 1 return the respective input exactly (no arithmetic).
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} != {eps_cond.shape}")
    if g == 0.0:
        return eps_uncond.copy()
    if g == 1.0:
        return eps_cond.copy()
    return eps_uncond + g * (eps_cond - eps_uncond)


def cosine_decay(t: int, T: int, alpha: float) -> float:
    """((1 + cos((T - t)/T * pi)) / 2) ** alpha.

    Equals 1 at t = T (noisiest step) and 0 at t = 0 (cleanest); t is the
    training-timestep value attached to the current inference step.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return ((1.0 + math.cos((T - t) / T * math.pi)) / 2.0) ** alpha


def sigma_at(t: int, T: int, params: DecayParams) -> float:
    """Blur sigma for the current step: decays from sigma1 to sigma2."""
    c3 = cosine_decay(t, T, params.alpha3)
    return c3 * (params.sigma1 - params.sigma2) + params.sigma2
