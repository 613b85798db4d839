"""
Uncertainty-guided noise injection
==================================

Follows one LQ image through the noise path: uncertainty map, latent noise
level, and the perturbed latent the denoiser sees. Uses untrained weights, so
the numbers show the mechanics rather than a learned map.

    python demos/uncertainty_guided_noise.py
"""

import torch

from qusr.codec import Codec
from qusr.config import AdaptiveNoiseConfig, CodecConfig
from qusr.fixtures import half_flat_checker
from qusr.imaging import DegradationParams, degrade, upsample_lq
from qusr.pipeline import to_nchw
from qusr.uncertainty import UEM, adaptive_sigma, normalize_map, perturb

torch.manual_seed(0)

hq = half_flat_checker(128)
lq = degrade(hq, DegradationParams(blur_sigma=1.5, noise_sigma=0.02, compression_quality=None, seed=0))
x = to_nchw(upsample_lq(lq)[None])          # (1, 3, 128, 128), the tensor codec and UEM share

codec = Codec(CodecConfig(base_width=16)).eval()
uem = UEM()
cfg = AdaptiveNoiseConfig()                  # k=1, m=0.2, delta=1e-4, p=0.1

with torch.no_grad():
    z_lq = codec.encode(x)                   # (1, 4, 32, 32)
    u = uem(x)                               # (1, 1, 128, 128)
    sigma = adaptive_sigma(u, codec, cfg)    # same shape as z_lq
    z_g = perturb(z_lq, sigma, cfg.p, seed=0)

print("latent", tuple(z_lq.shape), "uncertainty", tuple(u.shape))
# sigma never drops below sqrt(delta) = 0.01
print(f"sigma range {sigma.min().item():.4f} .. {sigma.max().item():.4f}")
print(f"mean |z_g - z_lq| = {(z_g - z_lq).abs().mean().item():.5f}")

# p = 0 switches injection off exactly
print("p=0 leaves the latent untouched:", torch.equal(perturb(z_lq, sigma, 0.0, seed=0), z_lq))

# U_n is what the uncertainty loss weights; it is normalised per image to [0, 1]
u_n = normalize_map(u)
print(f"U_n flat half {u_n[..., :64].mean().item():.3f}, textured half {u_n[..., 64:].mean().item():.3f}")
