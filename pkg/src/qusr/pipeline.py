"""Stage orchestration: codec pretraining, teacher pretraining, QUSR training,
single-step inference and PSNR/SSIM evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .codec import Codec, pretrain_codec
from .conditioning import PromptCache, TextEncoder, stub_text
from .config import RunConfig
from .denoiser import UNet, attach_lora, lora_parameters, predict_residual, restore
from .errors import ConfigError, DataError, ImageFormatError, ImageIOError, TrainingError
from .imaging import PairDataset, PairRecord, content_key, load_image, save_image, upsample_lq
from .losses import (PerceptualProxy, LossReport, add_noise, cosine_alpha_bar, csd_loss, l2_loss,
                     total_loss, uncertainty_loss)
from .metrics import PSNR_CAP, psnr, ssim
from .uncertainty import UEM, adaptive_sigma, normalize_map, perturb

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def to_nchw(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) numpy -> (N, 3, H, W) float32 tensor."""
    arr = images if images.ndim == 4 else images[None]
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(1, 2, 0).cpu().numpy()


class JsonlLog:
    def __init__(self, path: Optional[str | Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    records: list[PairRecord]
    prompts: list[str]
    lq: torch.Tensor      # (N, 3, S, S)
    lq_up: torch.Tensor   # (N, 3, 4S, 4S), the tensor the codec and UEM see
    hq: torch.Tensor      # (N, 3, 4S, 4S)

    def __len__(self):
        return len(self.records)


def prompt_for(record: PairRecord, cache: Optional[PromptCache]) -> str:
    if cache is not None:
        hit = cache.get(record.prompt_cache_key)
        if hit is not None:
            return hit
    return stub_text(record.params)


def load_training_data(manifest: str | Path, cache_dir: Optional[str | Path] = None) -> TrainingData:
    ds = PairDataset.from_manifest(manifest)
    if len(ds) == 0:
        raise DataError(f"manifest {manifest} lists no pairs")
    lq, hq = ds.arrays()
    up = np.stack([upsample_lq(x) for x in lq])
    cache = PromptCache(cache_dir) if cache_dir else None
    prompts = [prompt_for(r, cache) for r in ds.records]
    return TrainingData(ds.records, prompts, to_nchw(lq), to_nchw(up), to_nchw(hq))


def manifest_path(config: RunConfig) -> Path:
    if config.data.manifest:
        return Path(config.data.manifest)
    if config.data.pairs_dir:
        return Path(config.data.pairs_dir) / "manifest.jsonl"
    raise ConfigError("set data.manifest or data.pairs_dir")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    for p in module.parameters():
        p.grad = None
    return module.eval()


class Teacher(nn.Module):
    """Multi-timestep conditional noise predictor plus its own text encoder."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.text_encoder = TextEncoder(config.text)
        self.unet = UNet(config.codec.latent_channels, config.text.d, config.denoiser)
        self.register_buffer("alpha_bar", cosine_alpha_bar(config.teacher.timesteps))

    def forward(self, z_t, t, context, mask=None):
        return self.unet(z_t, t, context, mask)


class QUSR(nn.Module):
    """Codec (frozen), uncertainty estimator, text encoder and single-step denoiser."""

    def __init__(self, config: RunConfig, codec: Optional[Codec] = None,
                 text_encoder: Optional[TextEncoder] = None):
        super().__init__()
        self.config = config
        self.codec = freeze(codec if codec is not None else Codec(config.codec))
        self.uem = UEM(config.uem)
        self.text_encoder = TextEncoder(config.text)
        if text_encoder is not None:
            self.text_encoder.load_state_dict(text_encoder.state_dict())
        if config.text.freeze:
            self.text_encoder.requires_grad_(False)
        self.denoiser = UNet(config.codec.latent_channels, config.text.d, config.denoiser)
        if config.denoiser.lora:
            attach_lora(self.denoiser, config.denoiser.lora_rank, config.denoiser.lora_scaling,
                        config.denoiser.lora_convs)

    def train(self, mode: bool = True):
        super().train(mode)
        self.codec.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = lora_parameters(self.denoiser) if self.config.denoiser.lora else list(self.denoiser.parameters())
        params += list(self.uem.parameters())
        if not self.config.text.freeze:
            params += list(self.text_encoder.parameters())
        return params

    def condition(self, prompts: Sequence[Optional[str]]):
        if self.config.ablation.use_qap:
            return self.text_encoder.encode_batch(prompts)
        return self.text_encoder.null_batch(len(prompts))

    def encode_lq(self, lq_up: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.codec.encode(lq_up)

    def forward(self, lq_up: torch.Tensor, context, mask, seed: int,
                z_lq: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
        """One restoration pass. Returns every intermediate of the chain."""
        cfg = self.config
        if z_lq is None:
            z_lq = self.encode_lq(lq_up)
        out: dict[str, torch.Tensor] = {"z_lq": z_lq}
        if cfg.ablation.use_ung:
            u = self.uem(lq_up)
            sigma = adaptive_sigma(u, self.codec, cfg.noise)
            z_g = perturb(z_lq, sigma, cfg.noise.p, seed)
            out.update(u=u, u_n=normalize_map(u), sigma=sigma)
        else:
            z_g = z_lq
        eps = predict_residual(self.denoiser, z_g, context, mask)
        z_hq = restore(z_lq, eps)
        out.update(z_g=z_g, eps=eps, z_hq=z_hq, x_hq=self.codec.decode(z_hq))
        return out


def objective(model: QUSR, teacher: Optional[Teacher], feat_net: PerceptualProxy,
              lq_up, z_lq, hq, prompts, seed: int) -> tuple[torch.Tensor, LossReport, dict]:
    """Composite loss on one batch, with the ablation invariants asserted."""
    cfg = model.config
    context, mask = model.condition(prompts)
    if not cfg.ablation.use_qap:
        null = model.text_encoder.null_embedding()
        assert mask.shape[1] == 1 and torch.equal(context, null.expand_as(context)), "w/o QAP must use the null token"
    out = model(lq_up, context, mask, derive_seed(seed, 1), z_lq=z_lq)
    if not cfg.ablation.use_ung:
        assert torch.equal(out["z_g"], out["z_lq"]), "w/o UNG must leave z_g == z_lq"
    x_hq = out["x_hq"]
    terms = {"l2": l2_loss(x_hq, hq)}
    if cfg.loss.lambda2:
        terms["perceptual"] = feat_net(x_hq, hq)
    if cfg.loss.lambda3:
        if teacher is None:
            raise ConfigError("loss.lambda3 > 0 requires a teacher checkpoint")
        with torch.no_grad():
            if cfg.ablation.use_qap:
                t_ctx, t_mask = teacher.text_encoder.encode_batch(prompts)
            else:
                t_ctx, t_mask = teacher.text_encoder.null_batch(len(prompts))
            n_ctx, n_mask = teacher.text_encoder.null_batch(len(prompts))
        terms["csd"] = csd_loss(x_hq, t_ctx, t_mask, n_ctx, n_mask, teacher, model.codec,
                                teacher.alpha_bar, cfg.loss.cfg_scale, derive_seed(seed, 2),
                                cfg.loss.t_range)
    if cfg.ablation.use_ung and cfg.loss.lambda4:
        terms["uncertainty"] = uncertainty_loss(x_hq, hq, out["u_n"], cfg.loss.alpha)
    total, report = total_loss(terms, cfg.loss)
    out["null_condition"] = not cfg.ablation.use_qap
    return total, report, out


# ---------------------------------------------------------------------------
# checkpoint helpers
# ---------------------------------------------------------------------------

def _meta(kind: str, config: RunConfig, step: int, **extra) -> dict:
    return {"kind": kind, "config": config.to_dict(), "step": step, **extra}


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"optim.{idx}.{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], groups: list) -> None:
    state: dict[int, dict] = {}
    for name, value in ckpt.section(tensors, "optim").items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value.clone()
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_codec(path, codec: Codec, config: RunConfig, step: int) -> None:
    ckpt.save_checkpoint(path, ckpt.prefixed(codec.state_dict(), "codec"), _meta("codec", config, step))


def load_codec(path) -> tuple[Codec, RunConfig]:
    tensors, meta = ckpt.load_checkpoint(path)
    config = RunConfig.from_dict(meta["config"])
    codec = Codec(config.codec)
    codec.load_state_dict(ckpt.section(tensors, "codec"))
    return freeze(codec), config


def save_teacher(path, teacher: Teacher, config: RunConfig, step: int) -> None:
    ckpt.save_checkpoint(path, ckpt.prefixed(teacher.state_dict(), "teacher"), _meta("teacher", config, step))


def load_teacher(path) -> tuple[Teacher, RunConfig]:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise ConfigError(f"{path} is a {meta.get('kind')} checkpoint, expected teacher")
    config = RunConfig.from_dict(meta["config"])
    teacher = Teacher(config)
    teacher.load_state_dict(ckpt.section(tensors, "teacher"))
    return freeze(teacher), config


def save_qusr(path, model: QUSR, step: int, opt: Optional[torch.optim.Optimizer] = None,
              gen: Optional[torch.Generator] = None) -> None:
    tensors = ckpt.prefixed(model.state_dict(), "model")
    extra = {}
    if opt is not None:
        opt_tensors, groups = _optimizer_tensors(opt)
        tensors.update(opt_tensors)
        extra["param_groups"] = groups
    if gen is not None:
        tensors["rng.batches"] = gen.get_state()
    ckpt.save_checkpoint(path, tensors, _meta("qusr", model.config, step, **extra))


def load_qusr(path) -> tuple[QUSR, dict]:
    """Rebuild a trained model. Returns the model and the raw checkpoint contents."""
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "qusr":
        raise ConfigError(f"{path} is a {meta.get('kind')} checkpoint, expected qusr")
    config = RunConfig.from_dict(meta["config"])
    model = QUSR(config)
    model.load_state_dict(ckpt.section(tensors, "model"))
    model.eval()
    return model, {"tensors": tensors, "meta": meta}


def param_bytes(module: nn.Module) -> bytes:
    return b"".join(t.detach().cpu().numpy().tobytes() for _, t in sorted(module.state_dict().items()))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_pretrain_codec(config: RunConfig, data: TrainingData, out_path=None, log_path=None,
                       steps: Optional[int] = None) -> tuple[Codec, list[float]]:
    torch.manual_seed(derive_seed(config.seed, 10))
    codec = Codec(config.codec)
    history = pretrain_codec(codec, data.hq, steps if steps is not None else config.train.codec_steps,
                             config.train.batch_size, config.optim.lr, derive_seed(config.seed, 11),
                             config.optim.betas, log_fn=JsonlLog(log_path))
    freeze(codec)
    if out_path:
        save_codec(out_path, codec, config, len(history))
    return codec, history


def dropout_mask(gen: torch.Generator, batch: int, p: float) -> torch.Tensor:
    """True where the condition is replaced by the null token."""
    return torch.rand(batch, generator=gen) < p


def run_pretrain_teacher(config: RunConfig, data: TrainingData, codec: Codec, out_path=None,
                         log_path=None, steps: Optional[int] = None) -> tuple[Teacher, list[float]]:
    """Noise-prediction training over T timesteps with condition dropout for CFG."""
    torch.manual_seed(derive_seed(config.seed, 20))
    teacher = Teacher(config)
    steps = steps if steps is not None else config.train.teacher_steps
    with torch.no_grad():
        z0_all = codec.encode(data.hq)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, 21))
    opt = torch.optim.Adam(teacher.parameters(), lr=config.optim.lr, betas=tuple(config.optim.betas))
    logger = JsonlLog(log_path)
    history: list[float] = []
    last_good = {k: v.clone() for k, v in teacher.state_dict().items()}
    n_steps = config.teacher.timesteps
    teacher.train()
    for step in range(steps):
        idx = torch.randint(len(data), (config.train.batch_size,), generator=gen)
        drop = dropout_mask(gen, len(idx), config.teacher.cond_dropout)
        t = torch.randint(1, n_steps + 1, (len(idx),), generator=gen)
        noise = torch.randn(z0_all[idx].shape, generator=gen)
        z_t = add_noise(z0_all[idx], noise, t, teacher.alpha_bar)
        prompts = [None if d else data.prompts[i] for i, d in zip(idx.tolist(), drop.tolist())]
        context, mask = teacher.text_encoder.encode_batch(prompts)
        loss = F.mse_loss(teacher(z_t, t, context, mask), noise)
        if not torch.isfinite(loss):
            teacher.load_state_dict(last_good)
            raise TrainingError(f"teacher loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        logger({"stage": "teacher", "step": step, "total": loss.item(),
                "null_fraction": drop.float().mean().item(), "lr": config.optim.lr})
        if step % 50 == 49:
            last_good = {k: v.clone() for k, v in teacher.state_dict().items()}
    freeze(teacher)
    if out_path:
        save_teacher(out_path, teacher, config, steps)
    return teacher, history


@dataclass
class TrainResult:
    model: QUSR
    history: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train(config: RunConfig, data: TrainingData, codec: Codec, teacher: Optional[Teacher] = None,
          ckpt_dir: Optional[str | Path] = None, log_path=None, resume: Optional[str | Path] = None,
          stop_at: Optional[int] = None, on_step: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Main QUSR training with Adam over the trainable parameter set.

    The codec and teacher stay frozen. Batch order comes from a generator whose
    state is checkpointed; per-step noise seeds are pure functions of
    ``(config.seed, step)``, so resuming reproduces the uninterrupted run.
    ``stop_at`` ends the loop early (after that many total steps) and saves.
    """
    config.validate()
    if config.loss.lambda3 and teacher is None:
        raise ConfigError("loss.lambda3 > 0 requires a teacher; set loss.lambda3=0 to train without CSD")
    torch.manual_seed(derive_seed(config.seed, 30))
    text_init = teacher.text_encoder if teacher is not None else None
    model = QUSR(config, codec=codec, text_encoder=text_init)
    feat_net = PerceptualProxy(seed=derive_seed(config.seed, 31) % (2 ** 31))
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.optim.lr, betas=tuple(config.optim.betas))
    gen = torch.Generator().manual_seed(derive_seed(config.seed, 32))
    start = 0
    if resume is not None:
        tensors, meta = ckpt.load_checkpoint(resume)
        model.load_state_dict(ckpt.section(tensors, "model"))
        _restore_optimizer(opt, tensors, meta["param_groups"])
        gen.set_state(tensors["rng.batches"])
        start = meta["step"]
    z_lq_all = model.encode_lq(data.lq_up)
    logger = JsonlLog(log_path)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
    end = config.train.steps if stop_at is None else min(stop_at, config.train.steps)
    history: list[dict] = []
    last_path: Optional[Path] = None
    model.train()
    for step in range(start, end):
        idx = torch.randint(len(data), (config.train.batch_size,), generator=gen)
        prompts = [data.prompts[i] for i in idx.tolist()]
        total, report, out = objective(model, teacher, feat_net, data.lq_up[idx], z_lq_all[idx],
                                       data.hq[idx], prompts, derive_seed(config.seed, step))
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint: {last_path}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        record = {"stage": "qusr", "step": step, "lr": config.optim.lr, **report.as_dict(),
                  "null_condition": out["null_condition"],
                  "z_g_is_z_lq": bool(torch.equal(out["z_g"], out["z_lq"]))}
        history.append(record)
        logger(record)
        if on_step is not None:
            on_step(step, out)
        done = step + 1
        if ckpt_dir and (done % config.train.checkpoint_every == 0 or done == end):
            last_path = ckpt_dir / f"qusr_step{done:06d}.qusr"
            save_qusr(last_path, model, done, opt, gen)
    model.eval()
    final = None
    if ckpt_dir:
        final = ckpt_dir / "qusr.qusr"
        save_qusr(final, model, end, opt, gen)
    return TrainResult(model, history, final)


def evaluate_objective(model: QUSR, teacher: Optional[Teacher], data: TrainingData, seed: int) -> LossReport:
    """Objective over the whole dataset at a fixed seed, without gradients."""
    feat_net = PerceptualProxy(seed=derive_seed(model.config.seed, 31) % (2 ** 31))
    with torch.no_grad():
        z_lq = model.encode_lq(data.lq_up)
        _, report, _ = objective(model, teacher, feat_net, data.lq_up, z_lq, data.hq, data.prompts, seed)
    return report


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def infer(model: QUSR, x_lq: np.ndarray, seed: int = 0, prompt: Optional[str] = None) -> dict[str, np.ndarray]:
    """Restore one LQ image ``(h, w, 3)`` to ``(4h, 4w, 3)`` with a single denoiser pass.

    Without a prompt the null condition is used.
    """
    model.eval()
    lq_up = to_nchw(upsample_lq(x_lq))
    with torch.no_grad():
        context, mask = model.condition([prompt])
        out = model(lq_up, context, mask, derive_seed(seed, 1))
    result = {"x_hq": to_hwc(out["x_hq"][0])}
    if "u" in out:
        result["u"] = out["u"][0, 0].numpy()
        result["u_n"] = out["u_n"][0, 0].numpy()
    return result


def infer_file(model: QUSR, lq_path: str | Path, out_path: str | Path, seed: int = 0,
               prompt: Optional[str] = None, cache_dir: Optional[str | Path] = None,
               dump_uncertainty: bool = False) -> dict[str, np.ndarray]:
    x_lq = load_image(lq_path)
    if prompt is None and cache_dir:
        prompt = PromptCache(cache_dir).get(content_key(lq_path))
    if prompt is None and model.config.ablation.use_qap:
        log.warning("no caption for %s; using the null condition", lq_path)
    result = infer(model, x_lq, seed, prompt)
    out_path = Path(out_path)
    save_image(result["x_hq"], out_path)
    if dump_uncertainty and "u" in result:
        stem = out_path.with_suffix("")
        np.save(f"{stem}_U.npy", result["u"])
        save_image(np.clip(result["u"], 0.0, 1.0), f"{stem}_U.png")
        save_image(result["u_n"], f"{stem}_Un.png")
    return result


def evaluate(manifest: str | Path, model: QUSR, seed: int = 0, cache_dir=None,
             report_path: Optional[str | Path] = None) -> dict:
    """Per-image and mean PSNR/SSIM of the model and of the bicubic baseline."""
    ds = PairDataset.from_manifest(manifest)
    cache = PromptCache(cache_dir) if cache_dir else None
    rows, missing = [], []
    for i, rec in enumerate(ds.records):
        try:
            lq, hq = ds.load_pair(i)
        except (ImageIOError, ImageFormatError) as exc:
            missing.append({"index": i, "lq_path": rec.lq_path, "error": str(exc)})
            continue
        prompt = prompt_for(rec, cache)
        x_hq = infer(model, lq, seed, prompt)["x_hq"]
        base = upsample_lq(lq)
        rows.append({"index": i, "lq_path": rec.lq_path, "hq_path": rec.hq_path,
                     "psnr": psnr(x_hq, hq), "ssim": ssim(x_hq, hq),
                     "bicubic_psnr": psnr(base, hq), "bicubic_ssim": ssim(base, hq)})
    if not rows:
        raise DataError(f"no evaluable pairs in {manifest} ({len(missing)} missing)")
    summary = {k: float(np.mean([r[k] for r in rows]))
               for k in ("psnr", "ssim", "bicubic_psnr", "bicubic_ssim")}
    report = {"header": {"metrics": ["psnr", "ssim"], "psnr_cap_db": PSNR_CAP, "data_range": 1.0,
                         "seed": seed, "manifest": str(manifest)},
              "rows": rows, "missing": missing, "summary": {**summary, "count": len(rows)}}
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(report, indent=2))
    return report
