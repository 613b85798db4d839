"""Run configuration: nested dataclasses, file loading and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    hq_dir: str = ""
    pairs_dir: str = ""
    manifest: str = ""
    cache_dir: str = ""
    patch_size: int = 32
    patches_per_image: int = 10
    codec_ckpt: str = ""
    teacher_ckpt: str = ""


@dataclass
class DegradationConfig:
    """Ranges the per-record degradation parameters are drawn from."""

    # first-order RealESRGAN ranges; noise 1..30 on the 0-255 scale
    blur_sigma: tuple[float, float] = (0.2, 3.0)
    noise_sigma: tuple[float, float] = (1 / 255, 30 / 255)
    jpeg_quality: tuple[int, int] = (30, 95)
    jpeg_prob: float = 0.5
    scale: int = 4


@dataclass
class CodecConfig:
    latent_channels: int = 4
    scale_factor: int = 4
    base_width: int = 64
    kl_weight: float = 1e-6

    def validate(self) -> None:
        f = self.scale_factor
        if f < 1 or f & (f - 1):
            raise ConfigError(f"codec.scale_factor must be a power of 2, got {f}")
        if self.latent_channels < 1:
            raise ConfigError("codec.latent_channels must be >= 1")
        if self.kl_weight < 0:
            raise ConfigError("codec.kl_weight must be >= 0")


@dataclass
class UEMConfig:
    channels: int = 8
    kernel: int = 3


@dataclass
class DenoiserConfig:
    widths: tuple[int, ...] = (32, 64)
    heads: int = 4
    time_dim: int = 64
    timestep: int = 1
    lora: bool = False
    lora_rank: int = 4
    lora_scaling: float = 1.0
    lora_convs: tuple[str, ...] = ()


@dataclass
class TextEncoderConfig:
    vocab_buckets: int = 4096
    d: int = 64
    layers: int = 2
    heads: int = 4
    max_tokens: int = 77
    freeze: bool = False

    def validate(self) -> None:
        if self.vocab_buckets < 256:
            raise ConfigError("text.vocab_buckets must be >= 256")
        if self.d % self.heads:
            raise ConfigError("text.d must be divisible by text.heads")


@dataclass
class AdaptiveNoiseConfig:
    k: float = 1.0
    m: float = 0.2
    delta: float = 1e-4
    p: float = 0.1

    def validate(self) -> None:
        if not self.k > 0:
            raise ConfigError(f"noise.k must be > 0, got {self.k}")
        if not 0.0 <= self.m <= 1.0:
            raise ConfigError(f"noise.m must lie in [0, 1], got {self.m}")
        if not self.delta > 0:
            raise ConfigError(f"noise.delta must be > 0, got {self.delta}")
        if self.p < 0:
            raise ConfigError(f"noise.p must be >= 0, got {self.p}")


@dataclass
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 2.0
    lambda3: float = 2.0
    lambda4: float = 0.3
    alpha: float = 0.01
    cfg_scale: float = 1.0
    t_range: tuple[int, int] = (1, 50)

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def validate(self) -> None:
        for name, w in zip(("lambda1", "lambda2", "lambda3", "lambda4", "alpha"),
                           (*self.weights, self.alpha)):
            if not (w >= 0 and w < float("inf")):
                raise ConfigError(f"loss.{name} must be finite and >= 0, got {w}")
        if self.cfg_scale < 0:
            raise ConfigError("loss.cfg_scale must be >= 0")


@dataclass
class TeacherConfig:
    timesteps: int = 50
    cond_dropout: float = 0.1


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 1500
    codec_steps: int = 500
    teacher_steps: int = 500
    checkpoint_every: int = 500


@dataclass
class AblationConfig:
    use_qap: bool = True
    use_ung: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    uem: UEMConfig = field(default_factory=UEMConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    noise: AdaptiveNoiseConfig = field(default_factory=AdaptiveNoiseConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        self.codec.validate()
        self.text.validate()
        self.noise.validate()
        self.loss.validate()
        if self.degradation.scale != 4:
            raise ConfigError("degradation.scale is fixed at 4")
        if self.denoiser.timestep != 1:
            raise ConfigError("denoiser.timestep is fixed at 1 (single-step)")
        if self.optim.name.lower() != "adam":
            raise ConfigError(f"unsupported optimizer {self.optim.name!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _build(cls, data, prefix="")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse config JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        data = self.to_dict()
        for item in overrides:
            key, value = parse_override(item)
            _set_dotted(data, key)
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                node = node[part]
            node[leaf] = value
        return RunConfig.from_dict(data)


def parse_override(item: str) -> tuple[str, Any]:
    """Split ``a.b=value``; the value is parsed as a YAML scalar."""
    if "=" not in item:
        raise ConfigError(f"malformed override {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"malformed override key {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {exc}") from None
    return key, value


def _set_dotted(data: dict, key: str) -> None:
    node: Any = data
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]


def _coerce(tp: Any, value: Any, name: str) -> Any:
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        args = tp.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, name) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{name}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, name) for a, v in zip(args, value))
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if tp is float:
        # YAML 1.1 reads exponent forms without a dot (3e-5) as strings
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if value is None:
            return ""
        return str(value)
    return value


def _build(cls: type, data: dict[str, Any], prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    fields = typing.get_type_hints(cls)
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        tp = fields[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, prefix + name + ".")
        else:
            kwargs[name] = _coerce(tp, value, prefix + name)
    return cls(**kwargs)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML/JSON config file (or defaults) and apply ``key=value`` overrides."""
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        cfg = RunConfig.from_dict(data)
    else:
        cfg = RunConfig()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()
