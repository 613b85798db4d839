"""
Synthetic LQ/HQ pairs and their quality captions
================================================

Builds a small pair set from the procedural fixture images and prints the
stub caption each LQ patch gets. Run from the repository root:

    python demos/degradation_and_prompts.py
"""

import tempfile
from pathlib import Path

import numpy as np

from qusr.config import RunConfig
from qusr.conditioning import stub_text
from qusr.fixtures import write_fixture
from qusr.imaging import build_pairs, load_image

out = Path(tempfile.mkdtemp(prefix="qusr-demo-"))

# four 128x128 HQ images; the first is half flat gray, half checkerboard
write_fixture(out / "hq", n_images=4, size=128)

# two random 128px HQ crops per image, each degraded to a 32px LQ patch
config = RunConfig().with_overrides(["data.patches_per_image=2"])
pairs = build_pairs(out / "hq", out / "pairs", config)
print(f"{len(pairs)} pairs in {out / 'pairs'}")

for rec in pairs.records[:4]:
    lq = load_image(out / "pairs" / rec.lq_path)
    hq = load_image(out / "pairs" / rec.hq_path)
    print(f"{rec.lq_path}  lq {lq.shape}  hq {hq.shape}  blur {rec.blur_sigma:.2f}  "
          f"noise {rec.noise_sigma:.3f}  jpeg {rec.compression_quality}")
    print("   ", stub_text(rec.params))

# the manifest is plain JSON lines, so the same seed rebuilds it byte for byte
again = build_pairs(out / "hq", out / "pairs2", config)
same = (out / "pairs" / "manifest.jsonl").read_bytes() == (out / "pairs2" / "manifest.jsonl").read_bytes()
print("rebuild identical:", same)

# LQ patches are noticeably softer than their HQ source
lq = load_image(out / "pairs" / pairs.records[0].lq_path)
print("LQ pixel std", float(np.std(lq)))
