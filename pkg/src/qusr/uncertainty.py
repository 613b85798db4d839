"""Uncertainty estimation and uncertainty-guided noise injection.

Chain, per image::

    U   = UEM(x_lq_up)                     pixel-space error scale, unbounded
    U_l = k * E(U)                         latent uncertainty (frozen codec encoder)
    U_f = m + (1 - m) * U_l                noise floor
    sigma = sqrt(|U_f| + delta)
    z_g = z_lq + eps * sigma * p,  eps ~ N(0, 1)
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import AdaptiveNoiseConfig, UEMConfig
from .errors import ConfigError, ShapeError


class UEM(nn.Module):
    """Three 3x3 conv + ELU layers, mirrored by a decoder without the final ELU.

    Convolutions reflect-pad so image borders do not read as a dark frame.
    """

    def __init__(self, cfg: UEMConfig = UEMConfig()):
        super().__init__()
        c, k = cfg.channels, cfg.kernel
        pad = dict(padding=k // 2, padding_mode="reflect")
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, k, **pad), nn.ELU(),
            nn.Conv2d(c, c, k, **pad), nn.ELU(),
            nn.Conv2d(c, c, k, **pad), nn.ELU(),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c, c, k, **pad), nn.ELU(),
            nn.Conv2d(c, c, k, **pad), nn.ELU(),
            nn.Conv2d(c, 1, k, **pad),
        )

    def forward(self, x_lq: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x_lq))


def estimate(x_lq: torch.Tensor, uem: UEM) -> torch.Tensor:
    """Raw uncertainty map (B, 1, H, W) for an upsampled LQ batch (B, 3, H, W)."""
    return uem(x_lq)


def to_latent(u: torch.Tensor, codec, k: float) -> torch.Tensor:
    """``k * E(U)`` with the single channel replicated to an RGB image."""
    if u.dim() != 4 or u.shape[1] != 1:
        raise ShapeError(f"uncertainty map must be (B, 1, H, W), got {tuple(u.shape)}")
    return k * codec.encode(u.expand(-1, 3, -1, -1))


def noise_floor(u_l: torch.Tensor, m: float) -> torch.Tensor:
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"noise floor m must lie in [0, 1], got {m}")
    return m + (1.0 - m) * u_l


def noise_std(u_f: torch.Tensor, delta: float) -> torch.Tensor:
    if not delta > 0:
        raise ConfigError(f"delta must be > 0, got {delta}")
    return torch.sqrt(u_f.abs() + delta)


def gaussian_like(z: torch.Tensor, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(z.shape, generator=gen, dtype=z.dtype)


def perturb(z_lq: torch.Tensor, sigma: torch.Tensor, p: float, seed: int) -> torch.Tensor:
    """``z_lq + eps * sigma * p`` with ``eps`` drawn from a generator seeded by ``seed``.

    ``p == 0`` returns ``z_lq`` itself so the identity is exact.
    """
    if sigma.shape != z_lq.shape:
        raise ShapeError(f"sigma shape {tuple(sigma.shape)} != latent shape {tuple(z_lq.shape)}")
    if p == 0:
        return z_lq
    return z_lq + gaussian_like(z_lq, seed) * sigma * p


def normalize_map(u: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-image min-max normalisation to [0, 1]; constant maps become zeros."""
    flat = u.flatten(1)
    lo = flat.min(dim=1).values.view(-1, *([1] * (u.dim() - 1)))
    hi = flat.max(dim=1).values.view(-1, *([1] * (u.dim() - 1)))
    return (u - lo) / (hi - lo + eps)


def adaptive_sigma(u: torch.Tensor, codec, cfg: AdaptiveNoiseConfig) -> torch.Tensor:
    """U -> sigma_eps in latent space."""
    u_l = to_latent(u, codec, cfg.k)
    return noise_std(noise_floor(u_l, cfg.m), cfg.delta)
