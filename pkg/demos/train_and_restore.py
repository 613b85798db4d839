"""
Three training stages and one restoration
=========================================

Trains a deliberately small codec, teacher and restorer on the bundled
fixture, then restores one LQ patch and compares it with bicubic
upsampling. Takes a few minutes on one CPU core.

    python demos/train_and_restore.py
"""

import tempfile
from pathlib import Path

import torch

from qusr import pipeline as P
from qusr.config import RunConfig
from qusr.fixtures import write_fixture
from qusr.imaging import build_pairs
from qusr.metrics import psnr

torch.set_num_threads(1)
out = Path(tempfile.mkdtemp(prefix="qusr-demo-"))

# small widths and short stages so the demo stays quick
config = RunConfig().with_overrides([
    "data.patches_per_image=1",
    "codec.base_width=32",
    "denoiser.widths=[32, 64]",
    "train.steps=300",
    "train.codec_steps=300",
    "train.teacher_steps=200",
    "optim.lr=2e-4",
]).validate()

write_fixture(out / "hq", n_images=8, size=128)
build_pairs(out / "hq", out / "pairs", config)
data = P.load_training_data(out / "pairs" / "manifest.jsonl")

codec, codec_loss = P.run_pretrain_codec(config, data)
print(f"codec      loss {codec_loss[0]:.4f} -> {codec_loss[-1]:.4f}")
teacher, teacher_loss = P.run_pretrain_teacher(config, data, codec)
print(f"teacher    loss {teacher_loss[0]:.4f} -> {teacher_loss[-1]:.4f}")
result = P.train(config, data, codec, teacher, ckpt_dir=out / "ckpt")
print(f"restorer   loss {result.history[0]['total']:.4f} -> {result.history[-1]['total']:.4f}")

# single denoiser pass at inference; the prompt is the patch's cached caption
i = 1
restored = P.infer(result.model, P.to_hwc(data.lq[i]), seed=0, prompt=data.prompts[i])
hq = P.to_hwc(data.hq[i])
print("prompt:", data.prompts[i])
print(f"PSNR restored {psnr(restored['x_hq'], hq):.2f} dB, bicubic {psnr(P.to_hwc(data.lq_up[i]), hq):.2f} dB")

# the checkpoint carries its configuration, so reloading needs nothing else
model, _ = P.load_qusr(result.checkpoint)
again = P.infer(model, P.to_hwc(data.lq[i]), seed=0, prompt=data.prompts[i])["x_hq"]
print("reloaded model reproduces the output:", (again == restored["x_hq"]).all())
