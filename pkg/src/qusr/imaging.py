"""Image I/O, first-order synthetic degradation and LQ/HQ patch datasets.

Images are ``float32`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ImageFormatError, ImageIOError, ShapeError

log = logging.getLogger(__name__)

SCALE = 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
MANIFEST_FORMAT = "qusr-manifest"
MANIFEST_VERSION = 1
COMPRESSION_BACKEND = "pil-jpeg"


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    compression_quality: Optional[int] = None  # None means compression OFF
    seed: int = 0
    scale: int = SCALE

    def __post_init__(self):
        if self.scale != SCALE:
            raise ConfigError(f"degradation scale is fixed at {SCALE}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur_sigma and noise_sigma must be >= 0")
        q = self.compression_quality
        if q is not None and not 10 <= q <= 100:
            raise ConfigError(f"compression_quality must be in [10, 100] or None, got {q}")

    @property
    def is_identity(self) -> bool:
        return self.blur_sigma == 0 and self.noise_sigma == 0 and self.compression_quality is None


@dataclass(frozen=True)
class PairRecord:
    lq_path: str
    hq_path: str
    blur_sigma: float
    noise_sigma: float
    compression_quality: Optional[int]
    seed: int
    prompt_cache_key: str

    @property
    def params(self) -> DegradationParams:
        return DegradationParams(self.blur_sigma, self.noise_sigma, self.compression_quality, self.seed)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to ``(H, W, 3)`` float32 in ``[0, 1]``.

    Grayscale rasters are replicated across the three channels; alpha is dropped.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("L", "LA", "I;16", "I", "F", "1"):
                arr = np.asarray(img.convert("F") if mode in ("I;16", "I", "F") else img.convert("L"),
                                 dtype=np.float32)
                if mode in ("I;16", "I"):
                    arr = arr / 65535.0
                elif mode != "F":
                    arr = arr / 255.0
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                try:
                    rgb = img.convert("RGB")
                except (ValueError, OSError) as exc:
                    raise ImageFormatError(f"{path}: cannot convert mode {mode} to RGB") from exc
                arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an ``(H, W, 3)`` or ``(H, W)`` image in ``[0, 1]`` as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {img.shape}")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    down = size[0] < img.shape[0]
    out = F.interpolate(t, size=size, mode="bicubic", align_corners=False, antialias=down)
    return out[0].permute(1, 2, 0).numpy()


def downsample(img: np.ndarray, factor: int = SCALE) -> np.ndarray:
    _check_image(img)
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ShapeError(f"image dims {h}x{w} not divisible by {factor}")
    return np.clip(_resize(img, (h // factor, w // factor)), 0.0, 1.0)


def upsample_lq(lq: np.ndarray, factor: int = SCALE) -> np.ndarray:
    """Bicubic upsampling to the HQ grid, clipped to ``[0, 1]``."""
    _check_image(lq)
    h, w = lq.shape[:2]
    return np.clip(_resize(lq, (h * factor, w * factor)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as dec:
        return np.asarray(dec.convert("RGB"), dtype=np.float32) / 255.0


def degrade(hq: np.ndarray, params: DegradationParams) -> np.ndarray:
    """blur -> bicubic x4 downsample -> Gaussian noise (clipped) -> optional JPEG."""
    _check_image(hq)
    h, w = hq.shape[:2]
    if h % params.scale or w % params.scale:
        raise ShapeError(f"HQ dims {h}x{w} not divisible by {params.scale}")
    out = hq.astype(np.float32)
    if params.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0), mode="reflect")
    out = downsample(out, params.scale)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape).astype(np.float32)
    out = np.clip(out, 0.0, 1.0)
    if params.compression_quality is not None:
        out = jpeg_roundtrip(out, params.compression_quality)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_params(cfg, seed: int) -> DegradationParams:
    """Draw one record's degradation parameters from the configured ranges."""
    rng = np.random.default_rng(seed)
    blur = float(rng.uniform(*cfg.blur_sigma))
    noise = float(rng.uniform(*cfg.noise_sigma))
    use_jpeg = rng.random() < cfg.jpeg_prob
    quality = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
    return DegradationParams(
        blur_sigma=round(blur, 4),
        noise_sigma=round(noise, 4),
        compression_quality=quality if use_jpeg else None,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# pair datasets
# ---------------------------------------------------------------------------

def content_key(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def build_pairs(hq_dir: str | Path, out_dir: str | Path, config) -> "PairDataset":
    """Crop seeded HQ patches, degrade them, and write PNG pairs plus a manifest.

    Record ``i`` uses seed ``config.seed ^ i`` for both the crop location and the
    degradation, so the result does not depend on processing order.
    """
    size = config.data.patch_size
    hq_size = size * SCALE
    n_per = config.data.patches_per_image
    images = list_images(hq_dir)
    if not images:
        raise ConfigError(f"no decodable images in {hq_dir}")
    out_dir = Path(out_dir)
    (out_dir / "lq").mkdir(parents=True, exist_ok=True)
    (out_dir / "hq").mkdir(parents=True, exist_ok=True)

    records: list[PairRecord] = []
    skipped = 0
    index = 0
    for path in images:
        try:
            img = load_image(path)
        except (ImageIOError, ImageFormatError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped += 1
            continue
        h, w = img.shape[:2]
        if h < hq_size or w < hq_size:
            log.warning("skipping %s: %dx%d is smaller than %d", path.name, h, w, hq_size)
            skipped += 1
            continue
        for _ in range(n_per):
            seed = config.seed ^ index
            rng = np.random.default_rng([seed, 1])
            y = int(rng.integers(0, h - hq_size + 1))
            x = int(rng.integers(0, w - hq_size + 1))
            hq = img[y:y + hq_size, x:x + hq_size]
            params = sample_params(config.degradation, seed)
            lq = degrade(hq, params)
            name = f"{index:06d}.png"
            save_image(hq, out_dir / "hq" / name)
            save_image(lq, out_dir / "lq" / name)
            records.append(PairRecord(
                lq_path=f"lq/{name}",
                hq_path=f"hq/{name}",
                blur_sigma=params.blur_sigma,
                noise_sigma=params.noise_sigma,
                compression_quality=params.compression_quality,
                seed=seed,
                prompt_cache_key=content_key(out_dir / "lq" / name),
            ))
            index += 1
    if not records:
        raise DataError(f"every image in {hq_dir} was skipped")
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_records": len(records),
        "skipped": skipped,
        "compression_backend": COMPRESSION_BACKEND,
        "patch_size": size,
        "scale": SCALE,
    }
    write_manifest(out_dir / "manifest.jsonl", header, records)
    return PairDataset(out_dir, records, header)


def write_manifest(path: Path, header: dict, records: list[PairRecord]) -> None:
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(asdict(r), sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + "\n")


class PairDataset:
    """LQ/HQ patch pairs listed in a manifest. Images load lazily."""

    def __init__(self, root: str | Path, records: list[PairRecord], header: Optional[dict] = None):
        self.root = Path(root)
        self.records = list(records)
        self.header = header or {}

    @classmethod
    def from_manifest(cls, path: str | Path) -> "PairDataset":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        header, records = {}, []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if row.get("format") == MANIFEST_FORMAT:
                    header = row
                    continue
                records.append(PairRecord(**row))
            except (ValueError, TypeError, AttributeError) as exc:
                raise DataError(f"{path}: malformed manifest line: {exc}") from None
        return cls(path.parent, records, header)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PairRecord]:
        return iter(self.records)

    def load_pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        rec = self.records[i]
        lq = load_image(self.root / rec.lq_path)
        hq = load_image(self.root / rec.hq_path)
        if hq.shape[0] != lq.shape[0] * SCALE or hq.shape[1] != lq.shape[1] * SCALE:
            raise ShapeError(f"record {i}: LQ {lq.shape} is not 1/{SCALE} of HQ {hq.shape}")
        return lq, hq

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All pairs stacked: ``(N, S, S, 3)`` LQ and ``(N, 4S, 4S, 3)`` HQ."""
        pairs = [self.load_pair(i) for i in range(len(self))]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
