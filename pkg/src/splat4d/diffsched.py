"""Diffusion-schedule math behind a pluggable denoiser interface.

A linear-beta schedule supplies the per-timestep scalars:

    alpha_bar_t = prod_{k<=t} (1 - beta_k)        (alpha_bar_0 = 1)
    alpha_t     = sqrt(alpha_bar_t)               (signal)
    sigma_t     = sqrt(1 - alpha_bar_t)           (noise scale)
    beta_cond_t = beta_cond_max * t / T           (first-frame anneal)

Frames after the first are noised with the standard forward process; the
first (conditioning) frame receives the separately annealed additive noise.
The denoiser itself is out of scope and appears only as an opaque callable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .core import Camera
from .errors import DegenerateSignal, InvalidRange, ShapeMismatch

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "diffusion_loss",
    "sds_loss",
    "LatentVideo",
    "Conditioning",
    "DenoiserOracle",
    "CheatingDenoiser",
    "ZeroDenoiser",
    "LinearDenoiser",
    "encode_latent",
    "encode_latent_backward",
    "schedule_csv",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule scalars, indexed by timestep t in [0, T]."""

    T: int
    beta_ddpm: np.ndarray  # (T+1,), entry 0 unused (set to 0)
    alpha_bar: np.ndarray  # (T+1,)
    alpha: np.ndarray  # (T+1,) sqrt(alpha_bar)
    sigma: np.ndarray  # (T+1,) sqrt(1 - alpha_bar)
    beta_cond: np.ndarray  # (T+1,)

    def forward_diffuse(self, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """Noised latent sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
        z0 = np.asarray(z0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if z0.shape != eps.shape:
            raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
        return self.alpha[t] * z0 + self.sigma[t] * eps

    def condition_noise(self, z0_first: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """First-frame latent z0 + beta_cond_t * eps."""
        z0_first = np.asarray(z0_first, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if z0_first.shape != eps.shape:
            raise ShapeMismatch(f"z0 {z0_first.shape} vs eps {eps.shape}")
        return z0_first + self.beta_cond[t] * eps

    def z0_estimate(self, z_t: np.ndarray, eps_pred: np.ndarray, t: int) -> np.ndarray:
        """Clean-latent estimate (z_t - sigma_t * eps_pred) / alpha_t."""
        z_t = np.asarray(z_t, dtype=np.float64)
        eps_pred = np.asarray(eps_pred, dtype=np.float64)
        if z_t.shape != eps_pred.shape:
            raise ShapeMismatch(f"z_t {z_t.shape} vs eps_pred {eps_pred.shape}")
        a = self.alpha[t]
        if a <= 1e-8:
            raise DegenerateSignal(f"alpha_{t} = {a:g} too small to invert")
        return (z_t - self.sigma[t] * eps_pred) / a


def build_schedule(
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    beta_cond_max: float = 0.1,
) -> NoiseSchedule:
    """Linear-beta schedule with a linearly annealed conditioning noise."""
    if T < 1:
        raise InvalidRange("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidRange("need 0 < beta_min <= beta_max < 1")
    if beta_cond_max < 0:
        raise InvalidRange("beta_cond_max must be >= 0")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.cumprod(1.0 - betas)
    ts = np.arange(T + 1, dtype=np.float64)
    return NoiseSchedule(
        T=T,
        beta_ddpm=betas,
        alpha_bar=alpha_bar,
        alpha=np.sqrt(alpha_bar),
        sigma=np.sqrt(1.0 - alpha_bar),
        beta_cond=beta_cond_max * ts / T,
    )


def diffusion_loss(eps: np.ndarray, eps_pred: np.ndarray) -> float:
    """Mean squared error between true and predicted noise."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps.shape != eps_pred.shape:
        raise ShapeMismatch(f"eps {eps.shape} vs eps_pred {eps_pred.shape}")
    return float(np.mean((eps - eps_pred) ** 2))


def sds_loss(z: np.ndarray, z0_hat: np.ndarray) -> float:
    """Mean squared error between a rendered latent and the clean estimate."""
    z = np.asarray(z, dtype=np.float64)
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    if z.shape != z0_hat.shape:
        raise ShapeMismatch(f"z {z.shape} vs z0_hat {z0_hat.shape}")
    return float(np.mean((z - z0_hat) ** 2))


@dataclass(frozen=True)
class LatentVideo:
    """Latent tensor indexed [view][frame][channel][H][W]."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 5:
            raise ValueError("latent tensor must be 5-dimensional (n, f, C, H, W)")
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite latent entries")
        object.__setattr__(self, "z", z)

    @property
    def views(self) -> int:
        return self.z.shape[0]

    @property
    def frames(self) -> int:
        return self.z.shape[1]

    def first_frame(self) -> np.ndarray:
        return self.z[:, 0]

    def rest_frames(self) -> np.ndarray:
        return self.z[:, 1:]


@dataclass(frozen=True)
class Conditioning:
    """Opaque text embedding plus per-view camera parameters."""

    text_embedding: np.ndarray
    cameras: tuple[Camera, ...] = field(default_factory=tuple)

    def __post_init__(self):
        emb = np.asarray(self.text_embedding, dtype=np.float64)
        object.__setattr__(self, "text_embedding", emb)
        object.__setattr__(self, "cameras", tuple(self.cameras))


class DenoiserOracle(Protocol):
    """Noise-prediction interface: (z_cond, z_t, t, cond) -> eps of z_t's shape."""

    def __call__(
        self, z_cond: np.ndarray, z_t: np.ndarray, t: int, cond: Conditioning | None
    ) -> np.ndarray: ...


class CheatingDenoiser:
    """Returns a stored noise tensor, broadcast/narrowed to z_t's shape."""

    def __init__(self, eps: np.ndarray):
        self.eps = np.asarray(eps, dtype=np.float64)

    def __call__(self, z_cond, z_t, t, cond=None) -> np.ndarray:
        if self.eps.shape != np.shape(z_t):
            raise ShapeMismatch(f"stored eps {self.eps.shape} vs z_t {np.shape(z_t)}")
        return self.eps


class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    def __call__(self, z_cond, z_t, t, cond=None) -> np.ndarray:
        return np.zeros_like(np.asarray(z_t, dtype=np.float64))


class LinearDenoiser:
    """Fixed seeded elementwise-affine map of z_t; for gradient plumbing tests."""

    def __init__(self, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.weight = rng.uniform(-0.5, 0.5)
        self.bias = rng.uniform(-0.1, 0.1)

    def __call__(self, z_cond, z_t, t, cond=None) -> np.ndarray:
        return self.weight * np.asarray(z_t, dtype=np.float64) + self.bias


def encode_latent(rgb: np.ndarray, alpha: np.ndarray, factor: int = 8) -> np.ndarray:
    """Identity 'encoder': 8x average-pooled rgb plus alpha as 4th channel.

    Input rgb (H, W, 3) and alpha (H, W); output (4, H/factor, W/factor).
    H and W must be divisible by ``factor``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    H, W = alpha.shape
    if H % factor or W % factor:
        raise ShapeMismatch(f"image {H}x{W} not divisible by {factor}")
    stacked = np.concatenate([rgb, alpha[:, :, None]], axis=2)  # (H, W, 4)
    pooled = stacked.reshape(H // factor, factor, W // factor, factor, 4).mean(axis=(1, 3))
    return np.moveaxis(pooled, -1, 0)


def encode_latent_backward(grad_latent: np.ndarray, factor: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of :func:`encode_latent`: spread pooled grads back to pixels."""
    g = np.moveaxis(np.asarray(grad_latent, dtype=np.float64), 0, -1)  # (h, w, 4)
    h, w, _ = g.shape
    spread = np.repeat(np.repeat(g, factor, axis=0), factor, axis=1) / (factor * factor)
    return spread[:, :, :3], spread[:, :, 3]


def schedule_csv(sched: NoiseSchedule) -> str:
    """CSV dump with columns t, beta_ddpm, alpha_bar, alpha, sigma, beta_cond."""
    lines = ["t,beta_ddpm,alpha_bar,alpha,sigma,beta_cond"]
    for t in range(sched.T + 1):
        cols = (
            sched.beta_ddpm[t],
            sched.alpha_bar[t],
            sched.alpha[t],
            sched.sigma[t],
            sched.beta_cond[t],
        )
        lines.append(str(t) + "," + ",".join(repr(float(c)) for c in cols))
    return "\n".join(lines) + "\n"
