"""LR/HR pair generation: MATLAB-style bicubic degradation, patch cropping,
HR noise injection and line-oriented dataset manifests.

Images on this side of the package are numpy arrays of shape (H, W, C) with
values in [0, 1].
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_HEADER = "# srfusion-manifest v1"

# 4/sqrt(3) on the 0-255 scale
DEFAULT_NOISE_SIGMA = 4.0 / math.sqrt(3.0)


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 4
    patch_size: int = 32
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    rng_seed: int = 0

    def __post_init__(self):
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")
        if self.patch_size % self.scale:
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by scale {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class ManifestEntry:
    hr_path: str
    lr_path: str
    y0: int
    x0: int
    seed: int


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    config: DegradationConfig
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def hr_file(self, i: int) -> Path:
        return self.root / self.entries[i].hr_path

    def lr_file(self, i: int) -> Path:
        return self.root / self.entries[i].lr_path

    def load_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return stacked (N, H, W, C) HR and (N, h, w, C) LR arrays."""
        hr = np.stack([load_image(self.hr_file(i)) for i in range(len(self))])
        lr = np.stack([load_image(self.lr_file(i)) for i in range(len(self))])
        return hr, lr


# ---------------------------------------------------------------------------
# image I/O


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


# ---------------------------------------------------------------------------
# bicubic resampling


def bicubic_kernel(offset, a: float = -0.5):
    """Cubic convolution kernel W(t) (Keys, a=-0.5 is the MATLAB choice)."""
    t = np.abs(np.asarray(offset, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    out = np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))
    return float(out) if out.ndim == 0 else out


def resize_matrix(in_len: int, scale: int, a: float = -0.5) -> np.ndarray:
    """Dense (in_len // scale, in_len) weight matrix of the antialiased
    MATLAB ``imresize`` bicubic downscaler along one axis.

    Boundary samples are mirrored (symmetric padding) and every row sums to one.
    """
    out_len = in_len // scale
    width = 4.0 * scale
    x = np.arange(1, out_len + 1, dtype=np.float64)
    # MATLAB maps output x to input u = x/s + 0.5(1 - 1/s) with s = 1/scale
    u = x * scale + 0.5 * (1.0 - scale)
    left = np.floor(u - width / 2.0)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = bicubic_kernel((u[:, None] - idx) / scale, a) / scale
    w = w / w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[(idx.astype(np.int64) - 1) % (2 * in_len)]
    mat = np.zeros((out_len, in_len), dtype=np.float64)
    for row in range(out_len):
        np.add.at(mat[row], src[row], w[row])
    return mat


def bicubic_downsample(img: np.ndarray, scale: int, a: float = -0.5) -> np.ndarray:
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"image size {h}x{w} not divisible by scale {scale}")
    mh = resize_matrix(h, scale, a)
    mw = resize_matrix(w, scale, a)
    out = np.einsum("ih,hwc,jw->ijc", mh, img.astype(np.float64), mw)
    out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    return out[:, :, 0] if squeeze else out


def bicubic_downsample_1d(signal: Sequence[float], scale: int, a: float = -0.5) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] % scale:
        raise ValueError("signal length not divisible by scale")
    return resize_matrix(signal.shape[0], scale, a) @ signal


# ---------------------------------------------------------------------------
# patches and noise


def patch_positions(height: int, width: int, patch_size: int, count: int,
                    seed: int) -> List[Tuple[int, int]]:
    if height < patch_size or width < patch_size:
        raise ValueError(
            f"image {height}x{width} smaller than patch size {patch_size}")
    rng = np.random.default_rng(seed)
    pos = []
    for _ in range(count):
        y0 = int(rng.integers(0, height - patch_size + 1))
        x0 = int(rng.integers(0, width - patch_size + 1))
        pos.append((y0, x0))
    return pos


def crop_patches(img: np.ndarray, cfg: DegradationConfig, count: int,
                 seed: int | None = None) -> List[np.ndarray]:
    """Crop ``count`` square patches at positions drawn from ``seed``
    (``cfg.rng_seed`` when omitted)."""
    seed = cfg.rng_seed if seed is None else seed
    p = cfg.patch_size
    pos = patch_positions(img.shape[0], img.shape[1], p, count, seed)
    return [img[y0:y0 + p, x0:x0 + p].copy() for y0, x0 in pos]


def add_hr_noise(patch: np.ndarray, sigma_255: float, seed: int) -> np.ndarray:
    if sigma_255 < 0:
        raise ValueError("sigma_255 must be non-negative")
    if sigma_255 == 0:
        return patch.copy()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(patch.shape) * (sigma_255 / 255.0)
    return np.clip(patch + noise, 0.0, 1.0).astype(patch.dtype)


def _derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# dataset building and manifests


def list_images(hr_dir) -> List[Path]:
    return sorted(p for p in Path(hr_dir).iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def build_dataset(hr_dir, cfg: DegradationConfig, out_dir, count: int = 4,
                  split: str = "train") -> DatasetManifest:
    """Crop, noise and downsample every image in ``hr_dir`` and write the pairs
    plus ``manifest.txt`` under ``out_dir``.

    The LR input is downsampled from the clean crop; noise only touches the
    stored HR target.
    """
    files = list_images(hr_dir)
    if not files:
        raise ValueError(f"no images found in {hr_dir}")
    out_dir = Path(out_dir)
    (out_dir / "hr").mkdir(parents=True, exist_ok=True)
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)

    entries = []
    decoded = 0
    for fi, path in enumerate(files):
        try:
            img = load_image(path)
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping undecodable image {path}: {exc}")
            continue
        decoded += 1
        pos_seed = _derive_seed(cfg.rng_seed, fi)
        positions = patch_positions(img.shape[0], img.shape[1], cfg.patch_size,
                                    count, pos_seed)
        p = cfg.patch_size
        for pi, (y0, x0) in enumerate(positions):
            clean = img[y0:y0 + p, x0:x0 + p]
            seed = _derive_seed(cfg.rng_seed, fi, pi)
            hr = add_hr_noise(clean, cfg.noise_sigma, seed)
            lr = bicubic_downsample(clean, cfg.scale)
            name = f"{path.stem}_p{pi:03d}.png"
            save_image(out_dir / "hr" / name, hr)
            save_image(out_dir / "lr" / name, lr)
            entries.append(ManifestEntry(f"hr/{name}", f"lr/{name}", y0, x0, seed))
    if decoded == 0:
        raise ValueError(f"no decodable images in {hr_dir}")

    manifest = DatasetManifest(entries, cfg, split, out_dir)
    write_manifest(out_dir / "manifest.txt", manifest)
    log.info("wrote %d pairs to %s", len(entries), out_dir)
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    """Header lines are ``# key=value``; each record line is
    ``hr_path<TAB>lr_path<TAB>y0<TAB>x0<TAB>seed`` with paths relative to the
    manifest's directory."""
    cfg = manifest.config
    lines = [
        MANIFEST_HEADER,
        f"# split={manifest.split}",
        f"# scale={cfg.scale}",
        f"# patch_size={cfg.patch_size}",
        f"# noise_sigma={cfg.noise_sigma!r}",
        f"# rng_seed={cfg.rng_seed}",
    ]
    for e in manifest.entries:
        lines.append(f"{e.hr_path}\t{e.lr_path}\t{e.y0}\t{e.x0}\t{e.seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    text = path.read_text().splitlines()
    if not text or text[0] != MANIFEST_HEADER:
        raise ValueError(f"{path} is not a dataset manifest")
    meta = {}
    entries = []
    for line in text[1:]:
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            continue
        hr, lr, y0, x0, seed = line.split("\t")
        entries.append(ManifestEntry(hr, lr, int(y0), int(x0), int(seed)))
    cfg = DegradationConfig(scale=int(meta["scale"]),
                            patch_size=int(meta["patch_size"]),
                            noise_sigma=float(meta["noise_sigma"]),
                            rng_seed=int(meta["rng_seed"]))
    return DatasetManifest(entries, cfg, meta.get("split", "train"), path.parent)
