"""Noise schedule, forward diffusion, and samplers.

Timesteps are 1-based: ``t`` ranges over ``1..T`` and index 0 is reserved for
the clean latent. All closed-form relations used here:

    forward:   z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
    recover:   z0_hat = (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
    ancestral: z_{t-1} = (z_t - (1 - a_t)/sqrt(1 - abar_t) * eps_hat) / sqrt(a_t)
                         + sigma_t * noise

with ``abar_t`` the cumulative product of the per-step scaling factors
``a_1..a_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, NumericalError, RangeError, ShapeError

# Below this alpha_bar the 1/sqrt(abar) factor in recover_z0 amplifies the
# noise estimate by >1e4; we refuse rather than return garbage silently.
ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion constants: per-step alphas, their cumulative products, and
    the sampler noise scales.

    ``alphas``, ``alpha_bars`` and ``sigmas`` are float64 arrays of length T,
    indexed so that position ``i`` holds the value for timestep ``t = i + 1``.
    """

    timesteps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        T = self.timesteps
        if T < 1:
            raise ConfigurationError(f"timesteps must be >= 1, got {T}")
        for name in ("alphas", "alpha_bars", "sigmas"):
            arr = getattr(self, name)
            if arr.shape != (T,):
                raise ShapeError(f"{name} must have shape ({T},), got {arr.shape}")
        if not np.all((self.alphas > 0) & (self.alphas < 1)):
            raise ConfigurationError("alphas must lie in (0, 1)")
        if not np.all((self.alpha_bars > 0) & (self.alpha_bars < 1)):
            raise ConfigurationError("alpha_bars must lie in (0, 1)")
        if T > 1 and not np.all(np.diff(self.alpha_bars) < 0):
            raise ConfigurationError("alpha_bars must be strictly decreasing")
        rel = np.abs(self.alpha_bars / np.cumprod(self.alphas) - 1.0)
        if rel.max() > 1e-12:
            raise ConfigurationError("alpha_bars is not the cumulative product of alphas")
        if np.any(self.sigmas < 0):
            raise ConfigurationError("sigmas must be non-negative")

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigmas[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.timesteps:
            raise RangeError(f"timestep {t} outside [1, {self.timesteps}]")

    @property
    def deterministic(self) -> bool:
        return bool(np.all(self.sigmas == 0))


def build_schedule(
    timesteps: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
    sigma_mode: str = "zero",
) -> NoiseSchedule:
    """Construct a noise schedule.

    ``kind`` selects how the per-step betas are laid out (``linear`` or
    ``cosine``; the cosine layout follows the squared-cosine alpha_bar curve).
    ``sigma_mode`` is ``zero`` for a deterministic sampler or ``ancestral``
    for the stochastic posterior noise scale.
    """
    if timesteps < 1:
        raise RangeError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise RangeError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )

    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        x = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        abar = np.cos((x + s) / (1 + s) * math.pi / 2) ** 2
        abar /= abar[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], beta_start, 0.999)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    if sigma_mode == "zero":
        sigmas = np.zeros(timesteps, dtype=np.float64)
    elif sigma_mode == "ancestral":
        abar_prev = np.concatenate(([1.0], alpha_bars[:-1]))
        sigmas = np.sqrt((1.0 - abar_prev) / (1.0 - alpha_bars) * betas)
    else:
        raise ConfigurationError(f"unknown sigma_mode {sigma_mode!r}")

    return NoiseSchedule(timesteps=timesteps, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, names: str):
    if a.shape != b.shape:
        raise ShapeError(f"{names}: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z0: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Noise a clean latent to timestep ``t``."""
    _check_same_shape(z0, eps, "z0 vs eps")
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def recover_z0(zt: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise estimate (predicted clean latent)."""
    _check_same_shape(zt, eps_hat, "zt vs eps_hat")
    abar = sched.alpha_bar(t)
    if abar < ALPHA_BAR_FLOOR:
        raise NumericalError(f"alpha_bar({t}) = {abar:.3e} below floor {ALPHA_BAR_FLOOR:.0e}")
    return (zt - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def ancestral_step(
    zt: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One adjacent reverse step t -> t-1 (stochastic when sigma_t > 0)."""
    _check_same_shape(zt, eps_hat, "zt vs eps_hat")
    a = sched.alpha(t)
    abar = sched.alpha_bar(t)
    mean = (zt - (1.0 - a) / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(a)
    sigma = sched.sigma(t)
    if sigma == 0.0:
        return mean
    if noise is None:
        raise ShapeError("noise tensor required when sigma_t > 0")
    _check_same_shape(zt, noise, "zt vs noise")
    return mean + sigma * noise


def sample_timesteps(T: int, steps: int) -> list[int]:
    """Strided timestep subsequence from T down, final step forced to 1."""
    if not 1 <= steps <= T:
        raise RangeError(f"steps must lie in [1, {T}], got {steps}")
    stride = T // steps
    ts = [T - i * stride for i in range(steps)]
    ts[-1] = 1
    return ts


def sample(
    denoise_fn,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    step_rule: str = "ddim",
    conditions: dict | None = None,
) -> torch.Tensor:
    """Run the reverse process from pure noise.

    ``denoise_fn(zt, t, conditions)`` must return a noise estimate with the
    shape of ``zt``. With ``sigma_mode='zero'`` the output is a deterministic
    function of the seed. The ``ancestral`` step rule applies the adjacent
    reverse step and therefore requires ``steps == T``; the default ``ddim``
    rule jumps along the strided subsequence via the predicted clean latent.
    """
    if step_rule not in ("ddim", "ancestral"):
        raise ConfigurationError(f"unknown step_rule {step_rule!r}")
    if step_rule == "ancestral" and steps != sched.timesteps:
        raise ConfigurationError("ancestral step rule requires steps == T (adjacent steps only)")

    gen = torch.Generator().manual_seed(seed)
    zt = torch.randn(shape, generator=gen)
    ts = sample_timesteps(sched.timesteps, steps)

    for i, t in enumerate(ts):
        eps_hat = denoise_fn(zt, t, conditions)
        if eps_hat.shape != zt.shape:
            raise ShapeError(f"denoise_fn returned shape {tuple(eps_hat.shape)}, expected {tuple(zt.shape)}")
        sigma = sched.sigma(t)
        noise = torch.randn(shape, generator=gen) if sigma > 0 else None
        if step_rule == "ancestral":
            zt = ancestral_step(zt, eps_hat, t, sched, noise)
        else:
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            abar_prev = sched.alpha_bar(t_prev) if t_prev > 0 else 1.0
            z0_hat = recover_z0(zt, eps_hat, t, sched)
            dir_coef = math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
            zt = math.sqrt(abar_prev) * z0_hat + dir_coef * eps_hat
            if sigma > 0:
                zt = zt + sigma * noise
    return zt


class LatentCodec:
    """Image <-> latent codec standing in for the VAE.

    ``identity-rescale`` mode is lossless: images in [0, 1] are mapped to
    [-1, 1] and spatially folded by ``factor`` via pixel-unshuffle, so
    ``decode(encode(x)) == x`` exactly. ``learned-autoencoder`` wraps a small
    conv autoencoder (see :class:`ConvAutoencoder`).
    """

    def __init__(self, factor: int = 8, mode: str = "identity-rescale", autoencoder=None):
        if mode not in ("identity-rescale", "learned-autoencoder"):
            raise ConfigurationError(f"unknown codec mode {mode!r}")
        if mode == "learned-autoencoder" and autoencoder is None:
            raise ConfigurationError("learned-autoencoder mode requires an autoencoder")
        self.factor = factor
        self.mode = mode
        self.autoencoder = autoencoder

    def latent_shape(self, image_size: int, channels: int = 3) -> tuple[int, int, int]:
        f = self.factor
        if image_size % f:
            raise ShapeError(f"image size {image_size} not divisible by codec factor {f}")
        if self.mode == "learned-autoencoder":
            return (self.autoencoder.latent_channels, image_size // f, image_size // f)
        return (channels * f * f, image_size // f, image_size // f)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(C, H, W) image in [0, 1] -> latent."""
        if image.dim() != 3:
            raise ShapeError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
        if image.shape[-1] % self.factor or image.shape[-2] % self.factor:
            raise ShapeError(f"image dims {tuple(image.shape)} not divisible by factor {self.factor}")
        x = image * 2.0 - 1.0
        if self.mode == "learned-autoencoder":
            return self.autoencoder.encode(x.unsqueeze(0)).squeeze(0)
        return torch.pixel_unshuffle(x, self.factor)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent -> (C, H, W) image, clamped to [0, 1]."""
        if self.mode == "learned-autoencoder":
            x = self.autoencoder.decode(latent.unsqueeze(0)).squeeze(0)
        else:
            x = torch.pixel_shuffle(latent, self.factor)
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


class ConvAutoencoder(torch.nn.Module):
    """Minimal convolutional autoencoder for the opt-in learned codec mode."""

    def __init__(self, factor: int = 4, latent_channels: int = 8, hidden: int = 32):
        super().__init__()
        if factor & (factor - 1):
            raise ConfigurationError("autoencoder factor must be a power of two")
        self.latent_channels = latent_channels
        enc, ch = [], 3
        f = factor
        while f > 1:
            out = hidden if f > 2 else latent_channels
            enc += [torch.nn.Conv2d(ch, out, 4, stride=2, padding=1), torch.nn.SiLU()]
            ch, f = out, f // 2
        self.enc = torch.nn.Sequential(*enc[:-1])
        dec, ch = [], latent_channels
        f = factor
        while f > 1:
            out = hidden if f > 2 else 3
            dec += [torch.nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1), torch.nn.SiLU()]
            ch, f = out, f // 2
        self.dec = torch.nn.Sequential(*dec[:-1])

    def encode(self, x):
        return self.enc(x)

    def decode(self, z):
        return self.dec(z)
