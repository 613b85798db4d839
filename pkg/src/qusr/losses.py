"""Training objective: pixel L2, perceptual proxy, classifier score distillation and
the uncertainty-weighted L1, combined with fixed weights."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossConfig
from .errors import ConfigError, ShapeError

TERMS = ("l2", "perceptual", "csd", "uncertainty")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l2_loss(x_hq: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    _same_shape(x_hq, x_gt)
    return (x_hq - x_gt).pow(2).mean()


class PerceptualProxy(nn.Module):
    """Feature-space distance under a fixed, seeded random conv stack.

    Stand-in for LPIPS: channel-normalised activations of three conv+ReLU layers,
    squared difference summed over channels and averaged over positions and layers.
    Weights never train.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, c_in = [], 3
        for i, c_out in enumerate(widths):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            bound = (6.0 / (c_in * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.copy_((torch.rand(c_out, generator=gen) * 2 - 1) * bound)
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats, h = [], x * 2.0 - 1.0
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h / (h.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt())
        return feats

    def forward(self, x_hq: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
        _same_shape(x_hq, x_gt)
        fa, fb = self.features(x_hq), self.features(x_gt)
        dists = [(a - b).pow(2).sum(dim=1).mean() for a, b in zip(fa, fb)]
        return torch.stack(dists).mean()


def perceptual_loss(x_hq: torch.Tensor, x_gt: torch.Tensor, feat_net: PerceptualProxy) -> torch.Tensor:
    return feat_net(x_hq, x_gt)


def uncertainty_loss(x_hq: torch.Tensor, x_gt: torch.Tensor, u_n: torch.Tensor, alpha: float) -> torch.Tensor:
    """``L1(x_hq * exp(-U_n), x_gt * exp(-U_n)) + alpha * mean(U_n)``.

    ``u_n`` is (B, 1, H, W) and broadcasts over the colour channels. It is not
    detached: this loss is what trains the uncertainty estimator.
    """
    _same_shape(x_hq, x_gt)
    if u_n.dim() != 4 or u_n.shape[1] != 1 or u_n.shape[0] != x_hq.shape[0] or u_n.shape[2:] != x_hq.shape[2:]:
        raise ShapeError(f"U_n {tuple(u_n.shape)} does not broadcast to {tuple(x_hq.shape)}")
    w = torch.exp(-u_n)
    return (x_hq * w - x_gt * w).abs().mean() + alpha * u_n.mean()


# ---------------------------------------------------------------------------
# score distillation
# ---------------------------------------------------------------------------

def cosine_alpha_bar(timesteps: int, s: float = 0.008) -> torch.Tensor:
    """Cumulative signal level for t = 0..T (index 0 is the clean sample)."""
    t = torch.arange(timesteps + 1, dtype=torch.float64) / timesteps
    f = torch.cos((t + s) / (1 + s) * torch.pi / 2) ** 2
    return (f / f[0]).clamp(min=1e-5).float()


def add_noise(z0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
    ab = alpha_bar[t].view(-1, 1, 1, 1)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def csd_loss(x_hq: torch.Tensor, cond: torch.Tensor, cond_mask: Optional[torch.Tensor],
             null: torch.Tensor, null_mask: Optional[torch.Tensor], teacher, codec,
             alpha_bar: torch.Tensor, cfg_scale: float, seed: int,
             t_range: tuple[int, int] = (1, 50)) -> torch.Tensor:
    """Classifier score distillation through a frozen teacher.

    ``x_hq`` is re-encoded by the frozen codec, noised at a seeded timestep, and the
    teacher's guidance direction ``cfg_scale * (eps(z_t, c) - eps(z_t, null))`` is
    computed without gradient. The returned scalar's value is ``mean(d**2)``
    (monitoring), while its gradient w.r.t. the latent is ``d / numel``, i.e. the
    direction pulled back through the encoder with mean reduction.
    """
    if teacher is None:
        raise ConfigError("CSD requires a teacher checkpoint")
    if cfg_scale < 0:
        raise ConfigError("cfg_scale must be >= 0")
    z = codec.encode(x_hq)
    gen = torch.Generator().manual_seed(int(seed))
    lo, hi = t_range
    t = torch.randint(lo, hi + 1, (z.shape[0],), generator=gen)
    noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
    with torch.no_grad():
        z_t = add_noise(z.detach(), noise, t, alpha_bar)
        eps_c = teacher(z_t, t, cond, cond_mask)
        eps_u = teacher(z_t, t, null, null_mask)
        direction = cfg_scale * (eps_c - eps_u)
    value = direction.pow(2).mean()
    surrogate = (z * direction).sum() / z.numel()
    return surrogate - surrogate.detach() + value


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    l2: float
    perceptual: float
    csd: float
    uncertainty: float

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(terms: dict[str, torch.Tensor], cfg: LossConfig) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the four terms. A zero weight drops its term from the graph;
    missing terms count as zero."""
    weights = dict(zip(TERMS, cfg.weights))
    total = torch.zeros(())
    values = {}
    for name in TERMS:
        term = terms.get(name)
        values[name] = float(term.detach()) if term is not None else 0.0
        if term is not None and weights[name] != 0:
            total = total + weights[name] * term
    return total, LossReport(total=float(total.detach()), **values)
