"""Pixelwise merging of a sample stack over the ensemble dimension."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .flow import SampleStack


@dataclass(frozen=True)
class EnsembleConfig:
    method: str = "average"
    k: int = 5

    def __post_init__(self):
        if self.method not in ("average", "median"):
            raise ValueError(f"unknown ensemble method {self.method!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _first_k(stack, k: int) -> torch.Tensor:
    samples = stack.samples if isinstance(stack, SampleStack) else stack
    if not 1 <= k <= samples.shape[0]:
        raise ValueError(f"k={k} outside 1..{samples.shape[0]}")
    return samples[:k]


def ensemble_average(stack, k: int) -> torch.Tensor:
    """Mean of the first ``k`` samples (a SampleStack or a (k, C, H, W) tensor)."""
    return _first_k(stack, k).mean(dim=0)


def ensemble_median(stack, k: int) -> torch.Tensor:
    """Per-channel scalar median of the first ``k`` samples; for even ``k`` the
    midpoint of the two middle order statistics."""
    s = _first_k(stack, k).sort(dim=0).values
    if k % 2:
        return s[k // 2].clone()
    return 0.5 * (s[k // 2 - 1] + s[k // 2])


def ensemble(stack, cfg: EnsembleConfig) -> torch.Tensor:
    fn = ensemble_average if cfg.method == "average" else ensemble_median
    return fn(stack, cfg.k)
