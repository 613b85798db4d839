"""Shared fixtures: a tiny model configuration for fast pipeline tests, and the
full-size overfit experiment that several acceptance checks reuse."""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

from qusr import pipeline as P
from qusr.config import RunConfig
from qusr.fixtures import write_fixture
from qusr.imaging import build_pairs

torch.set_num_threads(1)

BUNDLED_HQ = Path(__file__).parent / "fixtures" / "hq"

TINY = [
    "codec.base_width=16",
    "denoiser.widths=[16, 32]",
    "denoiser.time_dim=32",
    "text.d=32",
    "text.layers=1",
    "uem.channels=4",
    "train.batch_size=2",
    "train.steps=6",
    "train.checkpoint_every=3",
    "optim.lr=1e-3",
    "data.patches_per_image=1",
]

# stage lengths, batch, lr and loss weights stay at their defaults
OVERFIT = ["data.patches_per_image=1"]


def tiny_config(*extra: str) -> RunConfig:
    return RunConfig().with_overrides(TINY + list(extra)).validate()


def make_pairs(root: Path, config: RunConfig, n_images: int) -> Path:
    write_fixture(root / "hq", n_images=n_images, size=128)
    build_pairs(root / "hq", root / "pairs", config)
    return root / "pairs" / "manifest.jsonl"


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return make_pairs(tmp_path_factory.mktemp("tiny"), tiny_config(), n_images=4)


@pytest.fixture(scope="session")
def tiny_data(tiny_manifest):
    return P.load_training_data(tiny_manifest)


@pytest.fixture(scope="session")
def tiny_stages(tiny_data):
    config = tiny_config()
    codec, _ = P.run_pretrain_codec(config, tiny_data, steps=20)
    teacher, _ = P.run_pretrain_teacher(config, tiny_data, codec, steps=10)
    return config, codec, teacher


@dataclass
class OverfitRun:
    config: RunConfig
    data: P.TrainingData
    manifest: Path
    codec: object
    teacher: object
    codec_history: list
    teacher_history: list
    initial: object
    final: object
    result: P.TrainResult
    untrained: object
    timings: dict = field(default_factory=dict)


def run_overfit(root: Path, *extra: str, codec=None, teacher=None, stages=None) -> OverfitRun:
    """Three-stage training on the 8-patch fixture. Pass ``stages`` to reuse a
    trained codec and teacher from an earlier run."""
    config = RunConfig().with_overrides(OVERFIT + list(extra)).validate()
    manifest = root / "pairs" / "manifest.jsonl"
    if not manifest.exists():
        manifest = make_pairs(root, config, n_images=8)
    data = P.load_training_data(manifest)
    timings = {}
    t0 = time.perf_counter()
    if stages is None:
        codec, codec_hist = P.run_pretrain_codec(config, data)
        timings["codec"] = time.perf_counter() - t0
        teacher, teacher_hist = P.run_pretrain_teacher(config, data, codec)
        timings["teacher"] = time.perf_counter() - t0 - timings["codec"]
    else:
        codec, teacher = stages.codec, stages.teacher
        codec_hist, teacher_hist = stages.codec_history, stages.teacher_history
    t1 = time.perf_counter()
    torch.manual_seed(P.derive_seed(config.seed, 30))
    untrained = P.QUSR(config, codec=codec, text_encoder=teacher.text_encoder)
    initial = P.evaluate_objective(untrained, teacher, data, seed=123)
    result = P.train(config, data, codec, teacher)
    final = P.evaluate_objective(result.model, teacher, data, seed=123)
    timings["qusr"] = time.perf_counter() - t1
    return OverfitRun(config, data, manifest, codec, teacher, codec_hist, teacher_hist, initial, final,
                      result, untrained, timings)


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    return run_overfit(tmp_path_factory.mktemp("overfit"))


def mean_psnr_gain(run: OverfitRun) -> tuple[float, float]:
    from qusr.metrics import psnr
    model_psnr, base_psnr = [], []
    for i in range(len(run.data)):
        hq = P.to_hwc(run.data.hq[i])
        out = P.infer(run.result.model, P.to_hwc(run.data.lq[i]), seed=0, prompt=run.data.prompts[i])
        model_psnr.append(psnr(out["x_hq"], hq))
        base_psnr.append(psnr(P.to_hwc(run.data.lq_up[i]), hq))
    return float(np.mean(model_psnr)), float(np.mean(base_psnr))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
