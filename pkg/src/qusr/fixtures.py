"""Procedural HQ test images, so tests and demos need no external dataset."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import save_image


def half_flat_checker(size: int = 128, cell: int = 16, flat: float = 0.5) -> np.ndarray:
    """Left half constant gray, right half a black/white-ish checkerboard."""
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy // cell + xx // cell) % 2).astype(np.float32) * 0.8 + 0.1
    img = np.where(xx < size // 2, np.float32(flat), checker)
    return np.repeat(img[..., None], 3, axis=2).astype(np.float32)


def pattern_image(size: int, seed: int) -> np.ndarray:
    """Smooth colour gradients, a few soft discs and stripes; varies with ``seed``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    img = np.empty((size, size, 3), dtype=np.float32)
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.3 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.08, 0.2)
        color = rng.uniform(0.05, 0.95, 3).astype(np.float32)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        alpha = np.clip((r - d) * size / 2.0, 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + color * alpha
    period = rng.uniform(6, 14)
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) * size / period)
    band = (yy > 0.65).astype(np.float32)[..., None]
    img = img * (1 - 0.5 * band) + 0.5 * band * stripes[..., None]
    return np.clip(img, 0.0, 1.0)


def write_fixture(directory: str | Path, n_images: int = 4, size: int = 128, seed: int = 0,
                  include_checker: bool = True) -> list[Path]:
    """Write ``n_images`` PNGs; the first is the half-flat/half-checker image."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_images):
        img = half_flat_checker(size) if include_checker and i == 0 else pattern_image(size, seed + i)
        path = directory / f"img{i:02d}.png"
        save_image(img, path)
        paths.append(path)
    return paths
