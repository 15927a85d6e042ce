"""Procedural textured images used as a hermetic stand-in for DIV2K."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_image


def _pink_noise(rng: np.random.Generator, size: int, alpha: float) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    spec = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f ** alpha
    spec[0, 0] = 0.0
    field = np.fft.irfft2(spec, s=(size, size))
    field -= field.min()
    return field / max(field.max(), 1e-12)


def synthetic_image(seed: int, size: int = 96) -> np.ndarray:
    """An RGB image mixing 1/f texture, oriented gratings and hard-edged shapes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    base = rng.uniform(0.2, 0.8, size=3)
    img = np.empty((size, size, 3))
    tex = _pink_noise(rng, size, rng.uniform(0.9, 1.6))
    for c in range(3):
        img[:, :, c] = base[c] + rng.uniform(0.2, 0.45) * (tex - 0.5)

    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.2)
        g = amp * np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += g[:, :, None] * rng.uniform(0.5, 1.0, size=3)

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 12, size / 4)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.3, 1.0))
        fine = _pink_noise(rng, size, 0.6)
        img[mask] = color + 0.25 * (fine[mask, None] - 0.5)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_toy_images(out_dir, count: int, seed: int = 0, size: int = 96) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out_dir / f"toy_{i:03d}.png"
        save_image(p, synthetic_image(seed * 100_003 + i, size))
        paths.append(p)
    return paths
