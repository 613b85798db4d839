"""Conditional UNet noise-residual predictor with cross-attention and LoRA adapters.

The same network class serves two roles: the single-step QUSR denoiser (timestep
fixed at 1) and the multi-timestep teacher used for score distillation.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DenoiserConfig
from .errors import ConfigError, ShapeError


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def scaled_dot_attention(q, k, v, mask: Optional[torch.Tensor] = None):
    """softmax(q k^T / sqrt(L)) v for (B, heads, N, L) queries and (B, heads, T, L) keys.

    ``mask`` is (B, T) with True marking real tokens. Returns (output, weights).
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    weights = scores.softmax(dim=-1)
    return weights @ v, weights


class CrossAttention(nn.Module):
    """Queries from a feature map, keys/values from a token sequence; residual output."""

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(min(8, dim), dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.view(b, n, self.heads, c // self.heads).transpose(1, 2)

    def attend(self, feats: torch.Tensor, context: torch.Tensor, mask=None):
        """Pre-projection attention output (B, N, C) and weights (B, heads, N, T).

        ``feats`` is (B, N, C) with positions flattened.
        """
        if context.shape[-1] != self.to_k.in_features:
            raise ShapeError(f"context width {context.shape[-1]} != {self.to_k.in_features}")
        q = self._split(self.to_q(feats))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        out, weights = scaled_dot_attention(q, k, v, mask)
        b, h, n, d = out.shape
        return out.transpose(1, 2).reshape(b, n, h * d), weights

    def forward(self, x: torch.Tensor, context: torch.Tensor, mask=None) -> torch.Tensor:
        b, c, h, w = x.shape
        feats = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attend(feats, context, mask)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


class TimeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Two-level UNet with one cross-attention block per resolution."""

    def __init__(self, latent_channels: int, context_dim: int, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        if len(cfg.widths) != 2:
            raise ConfigError("denoiser.widths must list exactly two levels")
        w0, w1 = cfg.widths
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
                                      nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(latent_channels, w0, 3, padding=1)
        self.down_res = TimeResBlock(w0, w0, cfg.time_dim)
        self.down_attn = CrossAttention(w0, context_dim, cfg.heads)
        self.downsample = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.mid_res = TimeResBlock(w0, w1, cfg.time_dim)
        self.mid_attn = CrossAttention(w1, context_dim, cfg.heads)
        self.upsample = nn.Conv2d(w1, w0, 3, padding=1)
        self.up_res = TimeResBlock(2 * w0, w0, cfg.time_dim)
        self.norm_out = nn.GroupNorm(min(8, w0), w0)
        self.conv_out = nn.Conv2d(w0, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t, context: torch.Tensor, mask=None) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"expected (B, {self.latent_channels}, h, w) latent, got {tuple(z.shape)}")
        if z.shape[-1] % 2 or z.shape[-2] % 2:
            raise ShapeError("latent spatial dims must be even")
        if not torch.is_tensor(t):
            t = torch.full((z.shape[0],), float(t))
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h0 = self.conv_in(z)
        h0 = self.down_attn(self.down_res(h0, temb), context, mask)
        h1 = self.mid_attn(self.mid_res(self.downsample(h0), temb), context, mask)
        up = self.upsample(F.interpolate(h1, scale_factor=2, mode="nearest"))
        h = self.up_res(torch.cat([up, h0], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_residual(unet: UNet, z_g: torch.Tensor, context: torch.Tensor, mask=None) -> torch.Tensor:
    """Single forward at the fixed timestep t = 1."""
    return unet(z_g, unet.cfg.timestep, context, mask)


def restore(z_lq: torch.Tensor, eps_g: torch.Tensor) -> torch.Tensor:
    if z_lq.shape != eps_g.shape:
        raise ShapeError(f"residual shape {tuple(eps_g.shape)} != latent shape {tuple(z_lq.shape)}")
    return z_lq - eps_g


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__()
        if rank < 1 or rank > min(base.in_features, base.out_features):
            raise ConfigError(f"LoRA rank {rank} invalid for {base.in_features}->{base.out_features}")
        self.base = base
        self.rank, self.scaling = rank, scaling
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * self.lora_B @ self.lora_A)
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scaling: float):
        super().__init__()
        fan_in = base.in_channels * base.kernel_size[0] * base.kernel_size[1] // base.groups
        if base.groups != 1:
            raise ConfigError("LoRA on grouped convolutions is not supported")
        if rank < 1 or rank > min(fan_in, base.out_channels):
            raise ConfigError(f"LoRA rank {rank} invalid for conv {fan_in}->{base.out_channels}")
        self.base = base
        self.rank, self.scaling = rank, scaling
        self.lora_A = nn.Parameter(torch.empty(rank, fan_in))
        self.lora_B = nn.Parameter(torch.zeros(base.out_channels, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        b = self.base
        a = self.lora_A.view(self.rank, b.in_channels, *b.kernel_size)
        low = F.conv2d(x, a, None, b.stride, b.padding, b.dilation)
        return b(x) + self.scaling * F.conv2d(low, self.lora_B[:, :, None, None])

    def merged(self) -> nn.Conv2d:
        b = self.base
        out = nn.Conv2d(b.in_channels, b.out_channels, b.kernel_size, b.stride, b.padding,
                        b.dilation, bias=b.bias is not None)
        with torch.no_grad():
            delta = (self.lora_B @ self.lora_A).view_as(b.weight)
            out.weight.copy_(b.weight + self.scaling * delta)
            if b.bias is not None:
                out.bias.copy_(b.bias)
        return out


ATTENTION_TARGETS = ("to_q", "to_k", "to_v", "to_out")


def _replace(model: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, leaf = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, leaf, module)


def attach_lora(model: nn.Module, rank: int = 4, scaling: float = 1.0,
                conv_targets: Iterable[str] = ()) -> list[str]:
    """Freeze ``model`` and wrap every attention projection plus the named convs.

    Returns the names of the adapted submodules. Only LoRA A/B stay trainable.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    conv_targets = set(conv_targets)
    targets = []
    for name, mod in model.named_modules():
        leaf = name.rpartition(".")[2]
        if isinstance(mod, nn.Linear) and leaf in ATTENTION_TARGETS:
            targets.append((name, LoRALinear(mod, rank, scaling)))
        elif isinstance(mod, nn.Conv2d) and name in conv_targets:
            targets.append((name, LoRAConv2d(mod, rank, scaling)))
            conv_targets.discard(name)
    if conv_targets:
        raise ConfigError(f"unknown LoRA conv targets: {sorted(conv_targets)}")
    for name, wrapped in targets:
        _replace(model, name, wrapped)
    return [name for name, _ in targets]


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold every adapter into a dense layer, in place."""
    adapted = [(n, m) for n, m in model.named_modules() if isinstance(m, (LoRALinear, LoRAConv2d))]
    for name, mod in adapted:
        _replace(model, name, mod.merged())
    return model


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in model.named_parameters() if n.rpartition(".")[2] in ("lora_A", "lora_B")]
