"""Learned fusion of a fixed-size sample stack into one SR image.

The network sees the first ``k_in`` samples concatenated along channels and
predicts a correction to their pixelwise average.  The output projection
starts at zero, so an untrained net reproduces ``ensemble_average``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .flow import SampleStack
from .layers import ResBlock, ZeroConv2d, conv3x3
from .metrics import PerceptualExtractor

log = logging.getLogger(__name__)

LOSS_KINDS = ("l1", "lpips")


@dataclass
class FusionConfig:
    k_in: int = 10
    channels: int = 3
    width: int = 64
    blocks: int = 2
    variant: str = "l1"
    seed: int = 0


@dataclass
class FusionTrainConfig:
    iterations: int = 500
    lr: float = 2e-4
    batch_size: int = 8
    seed: int = 0
    loss: str = "l1"


class FusionNet(nn.Module):
    def __init__(self, cfg: FusionConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FusionConfig()
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.head = conv3x3(cfg.k_in * cfg.channels, cfg.width)
            self.body = nn.Sequential(*[ResBlock(cfg.width) for _ in range(cfg.blocks)])
            self.tail = ZeroConv2d(cfg.width, cfg.channels)
        self.relu = nn.ReLU()

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """(N, k, C, H, W) -> (N, C, H, W); only the first ``k_in`` samples are used."""
        k_in, c = self.cfg.k_in, self.cfg.channels
        if stack.ndim != 5 or stack.shape[1] < k_in:
            raise ValueError(f"need a (N, >={k_in}, C, H, W) stack, got {tuple(stack.shape)}")
        if stack.shape[2] != c:
            raise ValueError(f"stack has {stack.shape[2]} channels, net expects {c}")
        s = stack[:, :k_in]
        avg = s.mean(dim=1)
        h = self.relu(self.head(s.flatten(1, 2)))
        return avg + self.tail(self.body(h))


def fuse(stack, net: FusionNet) -> torch.Tensor:
    """Fused (C, H, W) image, clamped to [0, 1]."""
    samples = stack.samples if isinstance(stack, SampleStack) else stack
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(samples[None].to(dtype))[0]
    return out.clamp(0.0, 1.0)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def _augment(stacks, targets, g):
    if torch.rand((), generator=g) < 0.5:
        stacks, targets = stacks.flip(-1), targets.flip(-1)
    if torch.rand((), generator=g) < 0.5:
        stacks, targets = stacks.flip(-2), targets.flip(-2)
    return stacks, targets


def train_fusion(stacks: torch.Tensor, targets: torch.Tensor, loss_kind: str,
                 cfg: FusionTrainConfig | None = None,
                 perceptual: Optional[PerceptualExtractor] = None,
                 net: FusionNet | None = None, log_path=None) -> Tuple[FusionNet, List[float]]:
    """Fit a fusion net on (N, k, C, H, W) stacks against (N, C, H, W) targets.

    Adam with cosine annealing to zero.  Returns the net and its per-step loss
    curve (also written to ``log_path`` as TSV when given).
    """
    cfg = cfg or FusionTrainConfig(loss=loss_kind)
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    if loss_kind == "lpips" and perceptual is None:
        raise ValueError("the LPIPS variant needs a PerceptualExtractor")
    if stacks.shape[0] != targets.shape[0] or stacks.shape[0] == 0:
        raise ValueError("need a non-empty, matching set of stacks and targets")
    if net is None:
        net = FusionNet(FusionConfig(channels=stacks.shape[2], variant=loss_kind, seed=cfg.seed))
    dtype = next(net.parameters()).dtype
    stacks, targets = stacks.to(dtype), targets.to(dtype)

    losses: List[float] = []
    if cfg.iterations > 0:
        g = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iterations, eta_min=0.0)
        net.train()
        for it in range(cfg.iterations):
            idx = torch.randint(stacks.shape[0], (min(cfg.batch_size, stacks.shape[0]),), generator=g)
            sb, tb = _augment(stacks[idx], targets[idx], g)
            pred = net(sb)
            if loss_kind == "l1":
                loss = l1_loss(pred, tb)
            else:
                loss = perceptual(pred, tb).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"fusion loss diverged at step {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            if it % 100 == 0:
                log.info("fusion-%s step %d loss %.5f", loss_kind, it, loss.item())
    net.eval()
    if log_path is not None:
        Path(log_path).write_text("step\tloss\n" + "".join(
            f"{i}\t{v:.8g}\n" for i, v in enumerate(losses)))
    return net, losses


def save_fusion(path, net: FusionNet) -> None:
    save_checkpoint(path, "fusion", asdict(net.cfg), net)


def load_fusion(path) -> FusionNet:
    blob = load_checkpoint(path, kind="fusion")
    net = FusionNet(FusionConfig(**blob["config"]))
    net.load_state_dict(blob["state"])
    net.eval()
    return net
