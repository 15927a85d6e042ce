"""Method sweeps over the SR space and the perception-distortion report.

``run_sweep`` goes from raw images to ``report.csv`` / ``paths.csv`` /
``tradeoff.png`` / ``report.md``: build datasets, train (or load) the flow,
draw sample stacks, train both fusion nets, and score every method on the
validation split.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import data as dp
from .ensemble import ensemble_average, ensemble_median
from .flow import (ConditionalFlow, FlowConfig, FlowTrainConfig, SampleStack, load_flow,
                   sample_stack, save_flow, train_flow)
from .fusion import (FusionConfig, FusionNet, FusionTrainConfig, fuse, save_fusion,
                     train_fusion)
from .metrics import PerceptualExtractor, default_extractor, lpips, mse, psnr, random_extractor, ssim
from .tensors import to_tensor
from .toy import write_toy_images

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["method", "tau", "k", "loss", "n_images", "psnr_db", "ssim", "lpips",
                  "mse", "psnr_band", "extractor_provenance"]
PATH_COLUMNS = ["method", "psnr_db", "lpips", "psnr_band"]


@dataclass
class SweepConfig:
    seed: int = 0
    # data; empty dirs mean procedurally generated toy images
    train_dir: str = ""
    val_dir: str = ""
    train_images: int = 16
    val_images: int = 16
    image_size: int = 96
    scale: int = 4
    patch_size: int = 32
    noise_sigma: float = dp.DEFAULT_NOISE_SIGMA
    patches_per_image: int = 8
    # flow
    flow_ckpt: str = ""
    flow_levels: int = 2
    flow_steps: int = 4
    flow_hidden: int = 64
    encoder_channels: int = 64
    encoder_blocks: int = 3
    flow_iterations: int = 2000
    encoder_iterations: int = 500
    flow_batch_size: int = 16
    flow_lr: float = 5e-4
    # sampling / ensembles
    taus: List[float] = field(default_factory=lambda: [0.1, 0.5, 0.9])
    ks: List[int] = field(default_factory=lambda: [5, 25])
    stack_tau: float = 0.9
    stack_size: int = 25
    # fusion
    fusion_k_in: int = 10
    fusion_width: int = 64
    fusion_blocks: int = 2
    fusion_iterations: int = 500
    fusion_lr: float = 2e-4
    fusion_batch_size: int = 8
    fusion_losses: List[str] = field(default_factory=lambda: ["l1", "lpips"])
    # perceptual metric
    extractor: str = "auto"  # auto | random | published
    extractor_seed: int = 0

    def __post_init__(self):
        if self.stack_size < max(self.ks, default=1):
            raise ValueError("stack_size must cover every k in ks")
        if self.fusion_losses and self.stack_size < self.fusion_k_in:
            raise ValueError("stack_size must be >= fusion_k_in")

    @property
    def seeds(self) -> List[int]:
        return list(range(self.seed, self.seed + self.stack_size))

    @classmethod
    def from_file(cls, path) -> "SweepConfig":
        """Read flat ``key = value`` TOML."""
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class MethodSpec:
    kind: str                  # baseline | sample | average | median | fusion
    tau: Optional[float] = None
    k: Optional[int] = None
    loss: Optional[str] = None

    @property
    def id(self) -> str:
        if self.kind == "baseline":
            return "baseline-regressive"
        if self.kind == "sample":
            return f"flow-sample(tau={self.tau:g})"
        if self.kind == "fusion":
            return f"fusion-{self.loss}"
        return f"{self.kind}(k={self.k})"


@dataclass
class TradeoffPoint:
    method: str
    tau: Optional[float]
    k: Optional[int]
    loss: Optional[str]
    n_images: int
    psnr_db: float
    ssim: float
    lpips: float
    mse: float
    psnr_band: float
    provenance: str

    def row(self) -> List[str]:
        def opt(v, fmt="{}"):
            return "" if v is None else fmt.format(v)
        return [self.method, opt(self.tau, "{:g}"), opt(self.k), opt(self.loss),
                str(self.n_images), f"{self.psnr_db:.6f}", f"{self.ssim:.6f}",
                f"{self.lpips:.6f}", f"{self.mse:.8f}", f"{self.psnr_band:.6f}",
                self.provenance]


@dataclass
class EvalSet:
    hr: torch.Tensor       # (N, C, H, W), clean
    lr: torch.Tensor       # (N, C, h, w)
    ids: List[str]

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_manifest(cls, manifest: dp.DatasetManifest) -> "EvalSet":
        hr, lr = manifest.load_pairs()
        ids = [Path(e.hr_path).stem for e in manifest.entries]
        return cls(to_tensor(hr), to_tensor(lr), ids)


class StackCache:
    """Sample stacks per (validation image, tau), drawn once and shared by all
    methods so nested subsets (first k) stay consistent."""

    def __init__(self, flow: ConditionalFlow, seeds: Sequence[int]):
        self.flow = flow
        self.seeds = list(seeds)
        self._stacks: Dict[tuple, SampleStack] = {}

    def get(self, dataset: EvalSet, index: int, tau: float) -> SampleStack:
        key = (id(dataset), index, float(tau))
        if key not in self._stacks:
            self._stacks[key] = sample_stack(dataset.lr[index], tau, self.seeds, self.flow)
        return self._stacks[key]

    def stacks(self, dataset: EvalSet, tau: float) -> List[SampleStack]:
        return [self.get(dataset, i, tau) for i in range(len(dataset))]


def _score(pred, ref, extractor):
    return (psnr(pred, ref), ssim(pred, ref), lpips(pred, ref, extractor), mse(pred, ref))


def evaluate_method(spec: MethodSpec, dataset: EvalSet, extractor: PerceptualExtractor,
                    flow: ConditionalFlow | None = None, cache: StackCache | None = None,
                    fusion_nets: Dict[str, FusionNet] | None = None,
                    stack_tau: float = 0.9) -> TradeoffPoint:
    """Dataset-mean scores of one method.  Single-sample flow methods are scored
    per seed and averaged; their band is the std over seeds of the per-seed
    dataset-mean PSNR."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    if flow is None and (cache is None or spec.kind == "baseline"):
        raise ValueError(f"{spec.id}: flow checkpoint required")
    if cache is None:
        cache = StackCache(flow, range(max(spec.k or 1, 1)))
    band = 0.0
    if spec.kind == "baseline":
        with torch.no_grad():
            preds = flow.baseline(dataset.lr).clamp(0.0, 1.0)
        scores = [_score(preds[i], dataset.hr[i], extractor) for i in range(len(dataset))]
    elif spec.kind == "sample":
        per_seed = []
        scores = []
        for si in range(len(cache.seeds)):
            row = [_score(cache.get(dataset, i, spec.tau).samples[si], dataset.hr[i], extractor)
                   for i in range(len(dataset))]
            per_seed.append(np.mean([r[0] for r in row]))
            scores.extend(row)
        band = float(np.std(per_seed))
    elif spec.kind in ("average", "median"):
        merge = ensemble_average if spec.kind == "average" else ensemble_median
        scores = [_score(merge(cache.get(dataset, i, stack_tau), spec.k), dataset.hr[i], extractor)
                  for i in range(len(dataset))]
    elif spec.kind == "fusion":
        if not fusion_nets or spec.loss not in fusion_nets:
            raise ValueError(f"{spec.id}: fusion checkpoint missing")
        net = fusion_nets[spec.loss]
        scores = [_score(fuse(cache.get(dataset, i, stack_tau), net), dataset.hr[i], extractor)
                  for i in range(len(dataset))]
    else:
        raise ValueError(f"unknown method kind {spec.kind!r}")
    s = np.asarray(scores, dtype=np.float64)
    return TradeoffPoint(spec.id, spec.tau, spec.k, spec.loss, len(dataset),
                         float(s[:, 0].mean()), float(s[:, 1].mean()), float(s[:, 2].mean()),
                         float(s[:, 3].mean()), band, extractor.provenance)


def write_report_csv(path, points: Sequence[TradeoffPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for p in points:
            w.writerow(p.row())


# paths drawn in the plot, as chains of method ids
TRADEOFF_PATHS = [
    ["flow-sample(tau=0.9)", "average(k=5)", "average(k=25)"],
    ["flow-sample(tau=0.9)", "median(k=5)", "median(k=25)"],
    ["flow-sample(tau=0.9)", "fusion-lpips"],
    ["flow-sample(tau=0.9)", "fusion-l1"],
]


def tradeoff_paths(points: Sequence[TradeoffPoint], out_dir):
    """Write ``paths.csv`` and ``tradeoff.png`` (PSNR vs LPIPS with trade-off
    arrows).  Returns both paths."""
    if len(points) < 2:
        raise ValueError("need at least two points")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "paths.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATH_COLUMNS)
        for p in points:
            w.writerow([p.method, f"{p.psnr_db:.6f}", f"{p.lpips:.6f}", f"{p.psnr_band:.6f}"])

    by_id = {p.method: p for p in points}
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    for p in points:
        ax.errorbar(p.lpips, p.psnr_db, yerr=p.psnr_band if p.psnr_band > 0 else None,
                    fmt="o", capsize=3)
        ax.annotate(p.method, (p.lpips, p.psnr_db), fontsize=7,
                    xytext=(4, 4), textcoords="offset points")
    for chain in TRADEOFF_PATHS:
        chain = [by_id[m] for m in chain if m in by_id]
        for a, b in zip(chain, chain[1:]):
            ax.annotate("", xy=(b.lpips, b.psnr_db), xytext=(a.lpips, a.psnr_db),
                        arrowprops=dict(arrowstyle="->", color="0.4", lw=1))
    ax.set_xlabel(f"LPIPS (lower is better) [{points[0].provenance}]")
    ax.set_ylabel("PSNR dB (higher is better)")
    ax.set_title("Perception-distortion trade-off (bars: seed std of PSNR)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png_path = out_dir / "tradeoff.png"
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return csv_path, png_path


# ---------------------------------------------------------------------------
# end-to-end sweep


@dataclass
class SweepResult:
    out_dir: Path
    points: List[TradeoffPoint]
    flow: ConditionalFlow
    fusion_nets: Dict[str, FusionNet]
    val: EvalSet
    cache: StackCache
    extractor: PerceptualExtractor
    timings: Dict[str, float]

    def point(self, method_id: str) -> TradeoffPoint:
        for p in self.points:
            if p.method == method_id:
                return p
        raise KeyError(method_id)


def method_specs(cfg: SweepConfig) -> List[MethodSpec]:
    specs = [MethodSpec("baseline")]
    specs += [MethodSpec("sample", tau=t) for t in cfg.taus]
    for kind in ("average", "median"):
        specs += [MethodSpec(kind, tau=cfg.stack_tau, k=k) for k in cfg.ks]
    specs += [MethodSpec("fusion", tau=cfg.stack_tau, k=cfg.fusion_k_in, loss=l)
              for l in cfg.fusion_losses]
    return specs


def _extractor(cfg: SweepConfig) -> PerceptualExtractor:
    if cfg.extractor == "random":
        return random_extractor(cfg.extractor_seed)
    if cfg.extractor == "published":
        from .metrics import published_extractor
        return published_extractor()
    return default_extractor(cfg.extractor_seed)


def prepare_data(cfg: SweepConfig, out_dir: Path):
    data_dir = out_dir / "data"
    train_src = Path(cfg.train_dir) if cfg.train_dir else data_dir / "train_images"
    val_src = Path(cfg.val_dir) if cfg.val_dir else data_dir / "val_images"
    if not cfg.train_dir:
        write_toy_images(train_src, cfg.train_images, seed=cfg.seed * 2 + 1, size=cfg.image_size)
    if not cfg.val_dir:
        write_toy_images(val_src, cfg.val_images, seed=cfg.seed * 2 + 2, size=cfg.image_size)
    train_cfg = dp.DegradationConfig(cfg.scale, cfg.patch_size, cfg.noise_sigma, cfg.seed)
    val_cfg = dp.DegradationConfig(cfg.scale, cfg.patch_size, 0.0, cfg.seed + 1)
    train = dp.build_dataset(train_src, train_cfg, data_dir / "train", cfg.patches_per_image, "train")
    val = dp.build_dataset(val_src, val_cfg, data_dir / "val", 1, "val")
    return train, val


def fusion_training_stacks(flow: ConditionalFlow, lr: torch.Tensor, cfg: SweepConfig) -> torch.Tensor:
    """One cached stack of ``fusion_k_in`` samples at ``stack_tau`` per training
    pair, with seeds disjoint from the evaluation seeds."""
    base = cfg.seed + 1_000_000
    k = cfg.fusion_k_in
    return torch.stack([
        sample_stack(lr[i], cfg.stack_tau, range(base + i * k, base + (i + 1) * k), flow).samples
        for i in range(lr.shape[0])])


def run_sweep(cfg: SweepConfig, out_dir) -> SweepResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()

    train_manifest, val_manifest = prepare_data(cfg, out_dir)
    timings["data"] = time.perf_counter() - t0

    t = time.perf_counter()
    if cfg.flow_ckpt and Path(cfg.flow_ckpt).exists():
        flow = load_flow(cfg.flow_ckpt)
    else:
        fcfg = FlowConfig(channels=3, scale=cfg.scale, levels=cfg.flow_levels, steps=cfg.flow_steps,
                          hidden=cfg.flow_hidden, encoder_channels=cfg.encoder_channels,
                          encoder_blocks=cfg.encoder_blocks, seed=cfg.seed)
        tcfg = FlowTrainConfig(iterations=cfg.flow_iterations,
                               encoder_iterations=cfg.encoder_iterations,
                               batch_size=cfg.flow_batch_size, lr=cfg.flow_lr, seed=cfg.seed)
        flow, _ = train_flow(train_manifest, tcfg, fcfg, log_path=out_dir / "flow_train_log.tsv")
        save_flow(out_dir / "flow.ckpt", flow)
    timings["flow"] = time.perf_counter() - t

    extractor = _extractor(cfg)
    fusion_nets: Dict[str, FusionNet] = {}
    t = time.perf_counter()
    if cfg.fusion_losses:
        hr_np, lr_np = train_manifest.load_pairs()
        train_hr, train_lr = to_tensor(hr_np), to_tensor(lr_np)
        stacks = fusion_training_stacks(flow, train_lr, cfg)
        for loss in cfg.fusion_losses:
            ckpt = out_dir / f"fusion_{loss}.ckpt"
            fcfg = FusionTrainConfig(iterations=cfg.fusion_iterations, lr=cfg.fusion_lr,
                                     batch_size=cfg.fusion_batch_size, seed=cfg.seed, loss=loss)
            net = FusionNet(FusionConfig(k_in=cfg.fusion_k_in, channels=3, width=cfg.fusion_width,
                                         blocks=cfg.fusion_blocks, variant=loss, seed=cfg.seed))
            net, _ = train_fusion(stacks, train_hr, loss, fcfg, perceptual=extractor, net=net,
                                  log_path=out_dir / f"fusion_{loss}_train_log.tsv")
            save_fusion(ckpt, net)
            fusion_nets[loss] = net
    timings["fusion"] = time.perf_counter() - t

    t = time.perf_counter()
    val = EvalSet.from_manifest(val_manifest)
    cache = StackCache(flow, cfg.seeds)
    points = []
    for spec in method_specs(cfg):
        try:
            points.append(evaluate_method(spec, val, extractor, flow, cache, fusion_nets,
                                          cfg.stack_tau))
        except Exception as exc:
            raise RuntimeError(f"while evaluating {spec.id}: {exc}") from exc
    points.sort(key=lambda p: p.method)
    timings["evaluate"] = time.perf_counter() - t

    write_report_csv(out_dir / "report.csv", points)
    tradeoff_paths(points, out_dir)
    timings["total"] = time.perf_counter() - t0
    result = SweepResult(out_dir, points, flow, fusion_nets, val, cache, extractor, timings)
    write_summary(out_dir / "report.md", cfg, result)
    return result


def jensen_gaps(result: SweepResult, tau: float, ks: Sequence[int]) -> Dict[int, tuple]:
    """Per k: (dataset-mean MSE of Average(k), dataset-mean per-sample MSE)."""
    out = {}
    stacks = result.cache.stacks(result.val, tau)
    for k in ks:
        avg = np.mean([mse(ensemble_average(s, k), result.val.hr[i]) for i, s in enumerate(stacks)])
        per = np.mean([np.mean([mse(s.samples[j], result.val.hr[i]) for j in range(k)])
                       for i, s in enumerate(stacks)])
        out[k] = (float(avg), float(per))
    return out


def write_summary(path, cfg: SweepConfig, result: SweepResult) -> None:
    lines = ["# SR-space ensembling / fusion report", "",
             f"Validation images: {len(result.val)}; stack: {cfg.stack_size} samples at "
             f"tau={cfg.stack_tau:g}, seeds {cfg.seeds[0]}..{cfg.seeds[-1]}.",
             f"Perceptual axis: LPIPS form with extractor `{result.extractor.provenance}`.",
             "The regressive baseline is the flow's LR encoder with its L1-trained upsampling head.",
             "", "| method | PSNR dB | SSIM | LPIPS | PSNR band |", "|---|---|---|---|---|"]
    for p in result.points:
        lines.append(f"| {p.method} | {p.psnr_db:.3f} | {p.ssim:.4f} | {p.lpips:.4f} | {p.psnr_band:.3f} |")
    lines += ["", "Average-ensemble MSE vs mean per-sample MSE (must not exceed):", ""]
    for k, (avg, per) in jensen_gaps(result, cfg.stack_tau, cfg.ks).items():
        lines.append(f"- k={k}: {avg:.6e} <= {per:.6e}")
    lines += ["", "Wall-clock seconds: " + ", ".join(
        f"{k} {v:.1f}" for k, v in result.timings.items())]
    Path(path).write_text("\n".join(lines) + "\n")
