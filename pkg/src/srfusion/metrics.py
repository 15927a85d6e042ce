"""Fidelity (PSNR, SSIM) and perceptual (LPIPS-form) image measures.

All functions take (C, H, W) tensors in [0, 1]; ``lpips`` also takes
batches and stays differentiable so it can serve as a training loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PSNR_CAP = 99.0
NORM_EPS = 1e-10


def _pair(a, b):
    a = torch.as_tensor(a).to(torch.float64)
    b = torch.as_tensor(b).to(torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """10 log10(peak^2 / MSE); identical inputs give ``cap``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-ax ** 2 / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, window: int = 11, sigma: float = 1.5, peak: float = 1.0) -> float:
    """Single-scale SSIM with a Gaussian window, valid filtering, averaged over
    positions and channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    c, h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} SSIM window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    k = gaussian_window(window, sigma).expand(c, 1, window, window)

    def filt(t):
        return F.conv2d(t[None], k, groups=c)[0]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# LPIPS-form perceptual distance


def normalize_channels(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Unit-normalize each spatial feature vector along channels (dim 1).
    Zero vectors stay zero."""
    norm = torch.linalg.vector_norm(f, dim=1, keepdim=True)
    return f / (norm + eps)


class PerceptualExtractor(nn.Module):
    """Frozen feature network ``F`` with per-layer channel weights ``w_l``.

    ``stages`` run in sequence and the output of each one is a tapped layer.
    """

    def __init__(self, stages: Sequence[nn.Module], layer_weights: Sequence[torch.Tensor],
                 provenance: str, shift=None, scale=None):
        super().__init__()
        if len(stages) != len(layer_weights):
            raise ValueError("one weight vector per tapped layer")
        self.stages = nn.ModuleList(stages)
        for i, w in enumerate(layer_weights):
            w = torch.as_tensor(w, dtype=torch.float32).flatten()
            if (w < 0).any():
                raise ValueError("layer weights must be nonnegative")
            self.register_buffer(f"w{i}", w)
        self.register_buffer("shift", torch.as_tensor(shift if shift is not None else [0.0]).view(1, -1, 1, 1).float())
        self.register_buffer("scale", torch.as_tensor(scale if scale is not None else [1.0]).view(1, -1, 1, 1).float())
        self.provenance = provenance
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def layer_weights(self) -> List[torch.Tensor]:
        return [getattr(self, f"w{i}") for i in range(len(self.stages))]

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = ((2.0 * x - 1.0) - self.shift.to(x.dtype)) / self.scale.to(x.dtype)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-image distance for (N, C, H, W) batches."""
        total = 0.0
        for fa, fb, w in zip(self.features(a), self.features(b), self.layer_weights):
            diff = normalize_channels(fa) - normalize_channels(fb)
            diff = diff * w.to(diff.dtype).view(1, -1, 1, 1)
            total = total + diff.pow(2).sum(1).mean(dim=(1, 2))
        return total

    def train(self, mode: bool = True):
        # frozen for good
        return super().train(False)


def random_extractor(seed: int = 0, channels: int = 3,
                     widths: Sequence[int] = (16, 32, 64)) -> PerceptualExtractor:
    """Deterministic random-weight conv extractor; the first stage keeps full
    resolution and each later one halves it."""
    g = torch.Generator().manual_seed(seed)
    stages = []
    weights = []
    cin = channels
    for i, cout in enumerate(widths):
        conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=g)
                              * math.sqrt(2.0 / (cin * 9)))
            conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=g))
        stages.append(nn.Sequential(conv, nn.ReLU()))
        weights.append(0.5 + torch.rand(cout, generator=g))
        cin = cout
    return PerceptualExtractor(stages, weights, provenance=f"random-fixed(seed={seed})")


# torchvision VGG16 `features` slice ends for relu1_2 .. relu5_3
_VGG_TAPS = (4, 9, 16, 23, 30)
_LPIPS_SHIFT = (-0.030, -0.088, -0.188)
_LPIPS_SCALE = (0.458, 0.448, 0.450)


def published_extractor() -> PerceptualExtractor:
    """VGG16 with the published LPIPS v0.1 calibration.

    Needs the ``lpips`` package (for the linear-layer weights) and cached
    torchvision VGG16 weights; raises ``RuntimeError`` when either is missing.
    The published linear layers weight squared differences, so the per-channel
    vector here is their square root.
    """
    try:
        import lpips as lpips_pkg
        import torchvision
    except ImportError as exc:
        raise RuntimeError("published LPIPS weights unavailable") from exc
    spec = torchvision.models.VGG16_Weights.IMAGENET1K_V1
    cached = Path(torch.hub.get_dir()) / "checkpoints" / Path(spec.url).name
    if not cached.exists():
        raise RuntimeError(f"VGG16 weights not cached at {cached}")
    vgg = torchvision.models.vgg16(weights=spec)
    lin_path = Path(lpips_pkg.__file__).parent / "weights" / "v0.1" / "vgg.pth"
    lin = torch.load(lin_path, map_location="cpu", weights_only=True)
    layers = list(vgg.features.children())
    stages, start = [], 0
    for end in _VGG_TAPS:
        stages.append(nn.Sequential(*layers[start:end]))
        start = end
    weights = [lin[f"lin{i}.model.1.weight"].flatten().clamp(min=0).sqrt() for i in range(5)]
    return PerceptualExtractor(stages, weights, "published-calibrated(lpips-vgg-v0.1)",
                               shift=_LPIPS_SHIFT, scale=_LPIPS_SCALE)


def default_extractor(seed: int = 0, prefer_published: bool = True) -> PerceptualExtractor:
    if prefer_published:
        try:
            return published_extractor()
        except RuntimeError:
            pass
    return random_extractor(seed)


def lpips(a, b, extractor: PerceptualExtractor):
    """Perceptual distance of two images (C, H, W) -> float, or of two batches
    (N, C, H, W) -> differentiable (N,) tensor.  Inputs are used at native size;
    they must survive the extractor's strided stages (>= 2**(stages-1) px)."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    min_size = 2 ** (len(extractor.stages) - 1)
    if a.shape[-1] < min_size or a.shape[-2] < min_size:
        raise ValueError(f"inputs must be at least {min_size}x{min_size}")
    if a.ndim == 3:
        dtype = extractor.w0.dtype
        with torch.no_grad():
            return float(extractor(a[None].to(dtype), b[None].to(dtype))[0])
    return extractor(a, b)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    method: str
    provenance: str
    image_ids: List[str] = field(default_factory=list)
    rows: List[dict] = field(default_factory=list)

    def add(self, image_id: str, pred, ref, extractor: PerceptualExtractor):
        self.image_ids.append(image_id)
        self.rows.append({"psnr_db": psnr(pred, ref), "ssim": ssim(pred, ref),
                          "lpips": lpips(pred, ref, extractor),
                          "mse": mse(pred, ref)})

    def mean(self, key: str) -> float:
        if not self.rows:
            raise ValueError("empty report")
        return float(np.mean([r[key] for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "psnr_db", "ssim", "lpips", "extractor_provenance"])
            for iid, r in zip(self.image_ids, self.rows):
                w.writerow([iid, f"{r['psnr_db']:.6f}", f"{r['ssim']:.6f}",
                            f"{r['lpips']:.6f}", self.provenance])
