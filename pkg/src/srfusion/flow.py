"""Conditional Glow-style normalizing flow for super-resolution.

The flow maps an HR image ``y`` to a latent ``z = f(y; x)`` conditioned on
features of the LR image ``x``.  Per level: squeeze, then ``steps`` x
(actnorm, invertible 1x1 channel mix, conditional affine coupling).  A
frozen regression head (LR encoder + pixel-shuffle upsampler) doubles as the
regressive baseline; when ``mean_shift`` is on, the flow models the residual
``y - baseline(x)``, a volume-preserving conditional shift.

Tensors are NCHW.  ``logdet`` is returned per batch element.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import ResBlock, ZeroConv2d, conv3x3

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    channels: int = 3
    scale: int = 4
    levels: int = 2
    steps: int = 4
    hidden: int = 64
    encoder_channels: int = 64
    encoder_blocks: int = 3
    mean_shift: bool = True
    # coupling scales live in (min_scale, 2); 0 gives the plain (0, 2) gate
    min_scale: float = 0.25
    seed: int = 0


@dataclass
class FlowTrainConfig:
    iterations: int = 2000
    encoder_iterations: int = 500
    batch_size: int = 16
    lr: float = 5e-4
    encoder_lr: float = 1e-3
    max_grad_norm: float = 50.0
    dequantize: bool = True
    seed: int = 0


# ---------------------------------------------------------------------------
# building blocks


class LREncoder(nn.Module):
    def __init__(self, channels: int, width: int, blocks: int):
        super().__init__()
        self.head = conv3x3(channels, width)
        self.body = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
        self.tail = conv3x3(width, width)

    def forward(self, x):
        h = self.head(x)
        return h + self.tail(self.body(h))


class UpsampleHead(nn.Module):
    """Regression head: bicubic upsampling plus a learned pixel-shuffle residual."""

    def __init__(self, width: int, channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv2d(width, channels * scale * scale, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, feats, x):
        up = F.interpolate(x, scale_factor=self.scale, mode="bicubic", align_corners=False)
        return up + F.pixel_shuffle(self.conv(feats), self.scale)


class ActNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.logs = nn.Parameter(torch.zeros(1, channels, 1, 1))

    @torch.no_grad()
    def initialize(self, h):
        mean = h.mean(dim=(0, 2, 3), keepdim=True)
        std = h.std(dim=(0, 2, 3), keepdim=True)
        self.loc.copy_(-mean)
        self.logs.copy_(-torch.log(std + 1e-6))

    def forward(self, h):
        ld = self.logs.sum() * h.shape[2] * h.shape[3]
        return (h + self.loc) * torch.exp(self.logs), ld.expand(h.shape[0])

    def reverse(self, h):
        return h * torch.exp(-self.logs) - self.loc


class InvConv1x1(nn.Module):
    def __init__(self, channels: int, generator: torch.Generator):
        super().__init__()
        w = torch.randn(channels, channels, generator=generator)
        q, _ = torch.linalg.qr(w)
        self.weight = nn.Parameter(q.contiguous())

    def forward(self, h):
        ld = torch.linalg.slogdet(self.weight)[1] * h.shape[2] * h.shape[3]
        return torch.einsum("ij,njhw->nihw", self.weight, h), ld.expand(h.shape[0])

    def reverse(self, h):
        inv = torch.linalg.inv(self.weight.double()).to(h.dtype)
        return torch.einsum("ij,njhw->nihw", inv, h)


class CondAffineCoupling(nn.Module):
    """Transforms the second channel half by a scale in (min_scale, 2) and a
    shift predicted from the first half and the LR features.  A zero subnet
    output gives scale 1, shift 0."""

    def __init__(self, channels: int, cond_channels: int, hidden: int, min_scale: float = 0.0):
        super().__init__()
        if not 0.0 <= min_scale < 1.0:
            raise ValueError("min_scale must lie in [0, 1)")
        self.ca = channels // 2
        self.cb = channels - self.ca
        self.min_scale = min_scale
        self.offset = math.log(1.0 - min_scale)
        self.net = nn.Sequential(
            conv3x3(self.ca + cond_channels, hidden), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1), nn.ReLU(),
            ZeroConv2d(hidden, 2 * self.cb),
        )

    def _params(self, ha, cond):
        out = self.net(torch.cat([ha, cond], dim=1))
        shift, raw = out[:, :self.cb], out[:, self.cb:]
        # lo + (2 - lo) * sigmoid(raw + b), written so raw == 0 gives exactly 1
        b = torch.tensor(self.offset, dtype=raw.dtype, device=raw.device)
        gate = torch.sigmoid(raw + b) - torch.sigmoid(b)
        return shift, 1.0 + (2.0 - self.min_scale) * gate

    def forward(self, h, cond):
        ha, hb = h[:, :self.ca], h[:, self.ca:]
        shift, scale = self._params(ha, cond)
        hb = hb * scale + shift
        ld = torch.log(scale).flatten(1).sum(1)
        return torch.cat([ha, hb], dim=1), ld

    def reverse(self, h, cond):
        ha, hb = h[:, :self.ca], h[:, self.ca:]
        shift, scale = self._params(ha, cond)
        return torch.cat([ha, (hb - shift) / scale], dim=1)


class FlowStep(nn.Module):
    def __init__(self, channels, cond_channels, hidden, generator, min_scale=0.0):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv1x1(channels, generator)
        self.coupling = CondAffineCoupling(channels, cond_channels, hidden, min_scale)

    def forward(self, h, cond):
        h, ld1 = self.actnorm(h)
        h, ld2 = self.invconv(h)
        h, ld3 = self.coupling(h, cond)
        return h, ld1 + ld2 + ld3

    def reverse(self, h, cond):
        h = self.coupling.reverse(h, cond)
        h = self.invconv.reverse(h)
        return self.actnorm.reverse(h)


# ---------------------------------------------------------------------------
# the flow


class ConditionalFlow(nn.Module):
    def __init__(self, cfg: FlowConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FlowConfig()
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = LREncoder(cfg.channels, cfg.encoder_channels, cfg.encoder_blocks)
            self.head = UpsampleHead(cfg.encoder_channels, cfg.channels, cfg.scale)
            self.levels = nn.ModuleList()
            c = cfg.channels
            for _ in range(cfg.levels):
                c *= 4
                self.levels.append(nn.ModuleList(
                    FlowStep(c, cfg.encoder_channels, cfg.hidden, gen, cfg.min_scale)
                    for _ in range(cfg.steps)))

    def flow_parameters(self):
        """Parameters of the invertible part (encoder and head excluded)."""
        return self.levels.parameters()

    def latent_shape(self, height: int, width: int):
        f = 2 ** self.cfg.levels
        return (self.cfg.channels * f * f, height // f, width // f)

    def _check_pair(self, y, x):
        s = self.cfg.scale
        if y.ndim != 4 or x.ndim != 4 or y.shape[0] != x.shape[0]:
            raise ValueError(f"expected batched NCHW pair, got {tuple(y.shape)} / {tuple(x.shape)}")
        if y.shape[1] != self.cfg.channels or x.shape[1] != self.cfg.channels:
            raise ValueError("channel count does not match flow config")
        if y.shape[2] != x.shape[2] * s or y.shape[3] != x.shape[3] * s:
            raise ValueError(f"HR {tuple(y.shape[2:])} is not LR {tuple(x.shape[2:])} x {s}")
        f = 2 ** self.cfg.levels
        if y.shape[2] % f or y.shape[3] % f:
            raise ValueError(f"HR size must be divisible by {f}")

    def _cond(self, feats, size):
        if feats.shape[-2:] == size:
            return feats
        return F.interpolate(feats, size=size, mode="bilinear", align_corners=False)

    def forward(self, y, x, init: bool = False):
        self._check_pair(y, x)
        if not torch.isfinite(y).all() or not torch.isfinite(x).all():
            raise ValueError("non-finite input to forward_flow")
        feats = self.encoder(x)
        h = y - self.head(feats, x) if self.cfg.mean_shift else y
        logdet = torch.zeros(y.shape[0], dtype=y.dtype, device=y.device)
        for steps in self.levels:
            h = F.pixel_unshuffle(h, 2)
            cond = self._cond(feats, h.shape[-2:])
            for step in steps:
                if init:
                    step.actnorm.initialize(h)
                h, ld = step(h, cond)
                logdet = logdet + ld
        return h, logdet

    def reverse(self, z, x):
        c, hh, ww = self.latent_shape(x.shape[2] * self.cfg.scale, x.shape[3] * self.cfg.scale)
        if z.ndim != 4 or tuple(z.shape[1:]) != (c, hh, ww) or z.shape[0] != x.shape[0]:
            raise ValueError(f"latent shape {tuple(z.shape)} does not fit LR {tuple(x.shape)}")
        feats = self.encoder(x)
        h = z
        for steps in reversed(self.levels):
            cond = self._cond(feats, h.shape[-2:])
            for step in reversed(steps):
                h = step.reverse(h, cond)
            h = F.pixel_shuffle(h, 2)
        return h + self.head(feats, x) if self.cfg.mean_shift else h

    def baseline(self, x):
        """Deterministic regressive SR prediction (encoder + upsampling head)."""
        return self.head(self.encoder(x), x)


# ---------------------------------------------------------------------------
# functional API over (C, H, W) or batched tensors


def _batched(t):
    return (t.unsqueeze(0), True) if t.ndim == 3 else (t, False)


def encode_lr(x, flow: ConditionalFlow):
    xb, single = _batched(x)
    if xb.shape[1] != flow.cfg.channels:
        raise ValueError(f"LR has {xb.shape[1]} channels, flow expects {flow.cfg.channels}")
    feats = flow.encoder(xb)
    return feats[0] if single else feats


def forward_flow(y, x, flow: ConditionalFlow):
    yb, single = _batched(y)
    xb, _ = _batched(x)
    z, logdet = flow(yb, xb)
    return (z[0], logdet[0]) if single else (z, logdet)


def inverse_flow(z, x, flow: ConditionalFlow):
    zb, single = _batched(z)
    xb, _ = _batched(x)
    y = flow.reverse(zb, xb)
    return y[0] if single else y


def nll_loss(y, x, flow: ConditionalFlow, reduction: str = "mean"):
    """-log p(y|x) = 0.5|z|^2 + 0.5 D log(2 pi) - logdet, in nats per image.

    ``reduction="mean"`` averages over the batch, ``"per_dim"`` additionally
    divides by D (used as the training objective).
    """
    yb, _ = _batched(y)
    xb, _ = _batched(x)
    z, logdet = flow(yb, xb)
    d = z[0].numel()
    nll = 0.5 * z.pow(2).flatten(1).sum(1) + 0.5 * d * LOG_2PI - logdet
    if reduction == "none":
        return nll
    if reduction == "per_dim":
        return nll.mean() / d
    return nll.mean()


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleStack:
    lr: torch.Tensor            # (C, h, w)
    samples: torch.Tensor       # (k, C, H, W)
    seeds: List[int]
    temperature: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples.ndim != 4 or self.samples.shape[0] < 1:
            raise ValueError("a stack needs at least one (C, H, W) sample")
        if len(self.seeds) != self.samples.shape[0]:
            raise ValueError("one seed per sample required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be pairwise distinct")

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    def head(self, k: int) -> "SampleStack":
        return SampleStack(self.lr, self.samples[:k], list(self.seeds[:k]),
                           self.temperature, dict(self.meta))


def latent_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)


@torch.no_grad()
def _sample_batch(x, temperature: float, seeds: Sequence[int], flow: ConditionalFlow):
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if x.ndim != 3:
        raise ValueError("expected a single (C, h, w) LR image")
    s = flow.cfg.scale
    shape = flow.latent_shape(x.shape[1] * s, x.shape[2] * s)
    dtype = next(flow.parameters()).dtype
    z = torch.stack([latent_noise(shape, sd, dtype) for sd in seeds]) * temperature
    xb = x.to(dtype).unsqueeze(0).expand(len(seeds), -1, -1, -1)
    return flow.reverse(z, xb).clamp(0.0, 1.0)


def sample(x, temperature: float, seed: int, flow: ConditionalFlow) -> torch.Tensor:
    """One SR image: ``inverse_flow(temperature * eps, x)`` with ``eps`` drawn
    from ``seed``, clamped to [0, 1] for export."""
    return _sample_batch(x, temperature, [seed], flow)[0]


def sample_stack(x, temperature: float, seeds: Sequence[int], flow: ConditionalFlow,
                 chunk: int = 25) -> SampleStack:
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds in sample_stack")
    parts = [_sample_batch(x, temperature, seeds[i:i + chunk], flow)
             for i in range(0, len(seeds), chunk)]
    return SampleStack(x, torch.cat(parts), seeds, float(temperature))


def parse_seeds(text: str) -> List[int]:
    """``"0..24"`` (inclusive) or ``"1,5,9"``."""
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


# ---------------------------------------------------------------------------
# training


def _as_tensors(data):
    from .data import DatasetManifest
    from .tensors import to_tensor
    if isinstance(data, DatasetManifest):
        if len(data) == 0:
            raise ValueError("empty manifest")
        hr, lr = data.load_pairs()
        return to_tensor(hr), to_tensor(lr)
    hr, lr = data
    if len(hr) == 0:
        raise ValueError("empty training set")
    return hr, lr


def _augment(hr, lr, g):
    if torch.rand((), generator=g) < 0.5:
        hr, lr = hr.flip(-1), lr.flip(-1)
    if torch.rand((), generator=g) < 0.5:
        hr, lr = hr.flip(-2), lr.flip(-2)
    if torch.rand((), generator=g) < 0.5:
        hr, lr = hr.transpose(-1, -2), lr.transpose(-1, -2)
    return hr, lr


def pretrain_encoder(flow: ConditionalFlow, hr, lr, cfg: FlowTrainConfig) -> List[float]:
    """L1 regression of encoder + head; leaves them frozen afterwards."""
    losses = []
    params = list(flow.encoder.parameters()) + list(flow.head.parameters())
    if cfg.encoder_iterations > 0:
        g = torch.Generator().manual_seed(cfg.seed + 1)
        opt = torch.optim.Adam(params, lr=cfg.encoder_lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.encoder_iterations)
        for it in range(cfg.encoder_iterations):
            idx = torch.randint(hr.shape[0], (cfg.batch_size,), generator=g)
            yb, xb = _augment(hr[idx], lr[idx], g)
            loss = (flow.baseline(xb) - yb).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
    for p in params:
        p.requires_grad_(False)
    return losses


def train_flow(data, cfg: FlowTrainConfig | None = None, flow_cfg: FlowConfig | None = None,
               flow: ConditionalFlow | None = None, log_path=None):
    """Pretrain the LR encoder (L1), then fit the flow by NLL.

    ``data`` is a :class:`DatasetManifest` or an ``(hr, lr)`` pair of NCHW
    tensors.  Returns ``(flow, log)`` where ``log`` holds per-step losses;
    written as TSV to ``log_path`` when given.
    """
    cfg = cfg or FlowTrainConfig()
    hr, lr = _as_tensors(data)
    if flow is None:
        flow_cfg = flow_cfg or FlowConfig(channels=hr.shape[1], scale=hr.shape[2] // lr.shape[2])
        flow = ConditionalFlow(flow_cfg)
    dtype = next(flow.parameters()).dtype
    hr, lr = hr.to(dtype), lr.to(dtype)
    torch.manual_seed(cfg.seed)

    enc_losses = pretrain_encoder(flow, hr, lr, cfg)
    nll_curve = []
    if cfg.iterations > 0:
        g = torch.Generator().manual_seed(cfg.seed + 2)

        def batch():
            idx = torch.randint(hr.shape[0], (cfg.batch_size,), generator=g)
            yb, xb = _augment(hr[idx], lr[idx], g)
            if cfg.dequantize:
                yb = yb + (torch.rand(yb.shape, generator=g, dtype=torch.float64).to(dtype) - 0.5) / 255.0
            return yb, xb

        with torch.no_grad():
            flow(*batch(), init=True)
        params = list(flow.flow_parameters())
        opt = torch.optim.Adam(params, lr=cfg.lr)
        for it in range(cfg.iterations):
            yb, xb = batch()
            loss = nll_loss(yb, xb, flow, reduction="per_dim")
            if not torch.isfinite(loss):
                raise FloatingPointError(f"flow NLL diverged at step {it}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            opt.step()
            nll_curve.append(loss.item())
            if it % 250 == 0:
                log.info("flow step %d nll/dim %.4f", it, loss.item())

    train_log = {"encoder_l1": enc_losses, "nll_per_dim": nll_curve}
    if log_path is not None:
        write_train_log(log_path, train_log)
    flow.eval()
    return flow, train_log


def write_train_log(path, curves: dict) -> None:
    lines = ["phase\tstep\tloss"]
    for phase, values in curves.items():
        lines += [f"{phase}\t{i}\t{v:.8g}" for i, v in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# persistence


def save_flow(path, flow: ConditionalFlow) -> None:
    save_checkpoint(path, "flow", asdict(flow.cfg), flow)


def load_flow(path) -> ConditionalFlow:
    blob = load_checkpoint(path, kind="flow")
    flow = ConditionalFlow(FlowConfig(**blob["config"]))
    flow.load_state_dict(blob["state"])
    for p in list(flow.encoder.parameters()) + list(flow.head.parameters()):
        p.requires_grad_(False)
    flow.eval()
    return flow


def save_stack(out_dir, stack: SampleStack) -> None:
    """Indexed PNGs ``sample_XXX.png``, ``lr.png`` and ``stack.txt`` (seeds, tau)."""
    from .data import save_image
    from .tensors import to_image
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(out_dir / "lr.png", to_image(stack.lr))
    lines = ["# srfusion-stack v1", f"# temperature={stack.temperature!r}",
             "index\tseed\tfile"]
    for i, (seed, img) in enumerate(zip(stack.seeds, stack.samples)):
        name = f"sample_{i:03d}.png"
        save_image(out_dir / name, to_image(img))
        lines.append(f"{i}\t{seed}\t{name}")
    (out_dir / "stack.txt").write_text("\n".join(lines) + "\n")


def load_stack(stack_dir) -> SampleStack:
    from .data import load_image
    from .tensors import to_tensor
    stack_dir = Path(stack_dir)
    rows = (stack_dir / "stack.txt").read_text().splitlines()
    tau = 0.0
    seeds, files = [], []
    for line in rows:
        if line.startswith("# temperature="):
            tau = float(line.split("=", 1)[1])
        elif line and not line.startswith("#") and not line.startswith("index"):
            _, seed, name = line.split("\t")
            seeds.append(int(seed))
            files.append(name)
    samples = torch.stack([to_tensor(load_image(stack_dir / f)) for f in files])
    lr_path = stack_dir / "lr.png"
    lr = to_tensor(load_image(lr_path)) if lr_path.exists() else torch.empty(0)
    return SampleStack(lr, samples, seeds, tau)
