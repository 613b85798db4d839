"""Small VAE mapping images in [0, 1] to a C_l x H/f x W/f latent.

The latent is a low-pass image plus learned detail. A fixed antialiased bicubic
downsample fills the first min(3, C_l) latent channels and the decoder's fixed
bicubic upsample reads them back; learned networks add a residual on both sides.
Both learned halves work at latent resolution: the encoder starts with a
space-to-depth rearrangement (f x f pixel blocks become channels) and the decoder
ends with the inverse depth-to-space, keeping CPU pretraining affordable.
"""

from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecConfig
from .errors import ShapeError, TrainingError

log = logging.getLogger(__name__)

LOGVAR_INIT = -8.0


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w, c, f = cfg.base_width, cfg.latent_channels, cfg.scale_factor
        self.encoder = nn.Sequential(
            nn.PixelUnshuffle(f),
            nn.Conv2d(3 * f * f, w, 3, padding=1),
            ResBlock(w),
            nn.SiLU(),
            nn.Conv2d(w, 2 * c, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c, w, 3, padding=1),
            ResBlock(w),
            nn.SiLU(),
            nn.Conv2d(w, 3 * f * f, 3, padding=1),
            nn.PixelShuffle(f),
        )
        # start the posterior narrow so sampling does not swamp the low-pass channels
        head = self.encoder[-1]
        with torch.no_grad():
            head.weight[c:].zero_()
            head.bias[c:].fill_(LOGVAR_INIT)

    @property
    def scale_factor(self) -> int:
        return self.cfg.scale_factor

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    def _base(self, x: torch.Tensor) -> torch.Tensor:
        """Low-pass latent channels: bicubic downsample, zero-padded to C_l."""
        f, c = self.cfg.scale_factor, self.cfg.latent_channels
        low = F.interpolate(x, scale_factor=1.0 / f, mode="bicubic", antialias=True, align_corners=False)
        if c >= 3:
            return F.pad(low, (0, 0, 0, 0, 0, c - 3))
        return low.mean(dim=1, keepdim=True).expand(-1, c, -1, -1)

    def _base_up(self, z: torch.Tensor) -> torch.Tensor:
        low = z[:, :3] if self.cfg.latent_channels >= 3 else z[:, :1].expand(-1, 3, -1, -1)
        return F.interpolate(low, scale_factor=self.cfg.scale_factor, mode="bicubic", align_corners=False)

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and log-variance of q(z|x) for ``x`` of shape (B, 3, H, W) in [0, 1]."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"codec expects (B, 3, H, W), got {tuple(x.shape)}")
        f = self.cfg.scale_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ShapeError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {f}")
        x = x * 2.0 - 1.0
        detail, logvar = self.encoder(x).chunk(2, dim=1)
        return self._base(x) + detail, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic encoding: the posterior mean, never a sample."""
        return self.posterior(x)[0]

    def decode(self, z: torch.Tensor, clip: bool = True) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"latent must be (B, {self.cfg.latent_channels}, h, w), got {tuple(z.shape)}")
        x = (self._reconstruct(z) + 1.0) * 0.5
        return x.clamp(0.0, 1.0) if clip else x

    def _reconstruct(self, z: torch.Tensor) -> torch.Tensor:
        return self._base_up(z) + self.decoder(z)

    def loss(self, x: torch.Tensor, generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Reconstruction MSE (in [-1, 1] units) and mean KL to N(0, I)."""
        mean, logvar = self.posterior(x)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        rec = F.mse_loss(self._reconstruct(z), x * 2.0 - 1.0)
        kl = 0.5 * torch.mean(mean.pow(2) + logvar.exp() - 1.0 - logvar)
        return rec, kl


def pretrain_codec(codec: Codec, hq: torch.Tensor, steps: int, batch_size: int, lr: float,
                   seed: int, betas=(0.9, 0.999), log_fn=None) -> list[float]:
    """Fit the codec on HQ patches ``(N, 3, H, W)``; returns the per-step loss.

    The loss is ``recon + kl_weight * kl``; with ``kl_weight == 0`` the KL term is
    left out of the graph entirely. A non-finite loss restores the last good
    weights and raises :class:`TrainingError`.
    """
    if len(hq) == 0:
        raise TrainingError("codec pretraining needs a non-empty dataset")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr, betas=tuple(betas))
    kl_weight = codec.cfg.kl_weight
    history: list[float] = []
    last_good = {k: v.clone() for k, v in codec.state_dict().items()}
    codec.train()
    for step in range(steps):
        idx = torch.randint(len(hq), (batch_size,), generator=gen)
        rec, kl = codec.loss(hq[idx], generator=gen)
        loss = rec + kl_weight * kl if kl_weight else rec
        if not torch.isfinite(loss):
            codec.load_state_dict(last_good)
            raise TrainingError(f"codec loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_fn is not None:
            log_fn({"stage": "codec", "step": step, "total": loss.item(),
                    "recon": rec.item(), "kl": kl.item(), "lr": lr})
        if step % 50 == 49:
            last_good = {k: v.clone() for k, v in codec.state_dict().items()}
    codec.eval()
    return history
