"""Command line entry point: ``python -m srfusion <command> ...``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import torch

log = logging.getLogger("srfusion")

TARGET_NAME = "target.png"


def _dataset_build(args):
    from .data import DegradationConfig, build_dataset
    cfg = DegradationConfig(args.scale, args.patch, args.noise_sigma, args.seed)
    m = build_dataset(args.hr_dir, cfg, args.out, count=args.count, split=args.split)
    print(f"wrote {len(m)} pairs to {args.out}")


def _flow_train(args):
    from .data import read_manifest
    from .flow import FlowConfig, FlowTrainConfig, save_flow, train_flow
    manifest = read_manifest(args.manifest)
    fcfg = FlowConfig(scale=manifest.config.scale, levels=args.levels, steps=args.steps,
                      hidden=args.hidden, seed=args.seed)
    tcfg = FlowTrainConfig(iterations=args.iters, encoder_iterations=args.encoder_iters,
                           batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    log_path = Path(str(args.out) + ".log.tsv")
    flow, curves = train_flow(manifest, tcfg, fcfg, log_path=log_path)
    save_flow(args.out, flow)
    last = curves["nll_per_dim"][-1] if curves["nll_per_dim"] else float("nan")
    print(f"saved {args.out} (final nll/dim {last:.4f}, log {log_path})")


def _flow_sample(args):
    from .data import load_image, read_manifest
    from .flow import load_flow, parse_seeds, sample_stack, save_stack
    from .tensors import to_tensor
    flow = load_flow(args.ckpt)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)
    if args.lr_image:
        st = sample_stack(to_tensor(load_image(args.lr_image)), args.tau, seeds, flow)
        save_stack(out, st)
        print(f"wrote {st.k} samples to {out}")
        return
    # one stack per manifest pair, with the HR patch kept as the training target
    manifest = read_manifest(args.manifest)
    for i, entry in enumerate(manifest.entries):
        st = sample_stack(to_tensor(load_image(manifest.lr_file(i))), args.tau, seeds, flow)
        sub = out / Path(entry.hr_path).stem
        save_stack(sub, st)
        shutil.copyfile(manifest.hr_file(i), sub / TARGET_NAME)
    print(f"wrote {len(manifest)} stacks to {out}")


def _ensemble(args):
    from .data import save_image
    from .ensemble import EnsembleConfig, ensemble
    from .flow import load_stack
    from .tensors import to_image
    st = load_stack(args.stack)
    k = args.k if args.k is not None else st.k
    save_image(args.out, to_image(ensemble(st, EnsembleConfig(args.method, k))))
    print(f"wrote {args.out}")


def _stack_dirs(root: Path) -> List[Path]:
    if (root / "stack.txt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "stack.txt").exists())
    if not dirs:
        raise ValueError(f"no stack directories under {root}")
    return dirs


def _fusion_train(args):
    from .data import load_image
    from .flow import load_stack
    from .fusion import FusionConfig, FusionNet, FusionTrainConfig, save_fusion, train_fusion
    from .metrics import default_extractor, random_extractor
    from .tensors import to_tensor
    dirs = _stack_dirs(Path(args.stacks))
    missing = [d for d in dirs if not (d / TARGET_NAME).exists()]
    if missing:
        raise ValueError(f"{missing[0]} has no {TARGET_NAME}; sample with --manifest")
    stacks = torch.stack([load_stack(d).samples[:args.k_in] for d in dirs])
    targets = torch.stack([to_tensor(load_image(d / TARGET_NAME)) for d in dirs])
    extractor = None
    if args.loss == "lpips":
        extractor = (random_extractor(args.seed) if args.extractor == "random"
                     else default_extractor(args.seed))
    net = FusionNet(FusionConfig(k_in=args.k_in, channels=stacks.shape[2], variant=args.loss,
                                 seed=args.seed))
    cfg = FusionTrainConfig(iterations=args.iters, lr=args.lr, batch_size=args.batch_size,
                            seed=args.seed, loss=args.loss)
    net, losses = train_fusion(stacks, targets, args.loss, cfg, perceptual=extractor, net=net)
    save_fusion(args.ckpt, net)
    last = losses[-1] if losses else float("nan")
    print(f"saved {args.ckpt} ({len(dirs)} stacks, final loss {last:.5f})")


def _fusion_apply(args):
    from .data import save_image
    from .flow import load_stack
    from .fusion import fuse, load_fusion
    from .tensors import to_image
    save_image(args.out, to_image(fuse(load_stack(args.stack), load_fusion(args.ckpt))))
    print(f"wrote {args.out}")


def _image_pairs(pred: Path, ref: Path):
    if pred.is_file():
        return [(pred.stem, pred, ref)]
    from .data import list_images
    pairs = []
    for p in list_images(pred):
        r = ref / p.name
        if not r.exists():
            raise ValueError(f"no reference for {p.name} in {ref}")
        pairs.append((p.stem, p, r))
    return pairs


def _metrics_eval(args):
    from .data import load_image
    from .metrics import MetricReport, default_extractor, random_extractor
    from .tensors import to_tensor
    extractor = (random_extractor(args.seed) if args.extractor == "random"
                 else default_extractor(args.seed))
    rep = MetricReport(str(args.pred), extractor.provenance)
    for iid, p, r in _image_pairs(Path(args.pred), Path(args.ref)):
        rep.add(iid, to_tensor(load_image(p)), to_tensor(load_image(r)), extractor)
    rep.write_csv(args.out)
    print(f"{len(rep.rows)} images: PSNR {rep.mean('psnr_db'):.3f} dB, SSIM {rep.mean('ssim'):.4f}, "
          f"LPIPS {rep.mean('lpips'):.4f} [{extractor.provenance}]")


def _tradeoff_run(args):
    from .tradeoff import SweepConfig, run_sweep
    cfg = SweepConfig.from_file(args.config) if args.config else SweepConfig()
    result = run_sweep(cfg, args.out)
    print((Path(args.out) / "report.md").read_text())
    print(f"total {result.timings['total']:.1f} s")


def build_parser() -> argparse.ArgumentParser:
    from .data import DEFAULT_NOISE_SIGMA
    p = argparse.ArgumentParser(prog="srfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", help="crop HR patches and write LR/HR pairs")
    b.add_argument("--hr-dir", required=True)
    b.add_argument("--scale", type=int, default=4)
    b.add_argument("--patch", type=int, default=32)
    b.add_argument("--noise-sigma", type=float, default=DEFAULT_NOISE_SIGMA)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--count", type=int, default=4, help="patches per image")
    b.add_argument("--split", default="train")
    b.add_argument("--out", required=True)
    b.set_defaults(func=_dataset_build)

    fl = sub.add_parser("flow").add_subparsers(dest="action", required=True)
    t = fl.add_parser("train", help="train the conditional flow on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--encoder-iters", type=int, default=500)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--levels", type=int, default=2)
    t.add_argument("--steps", type=int, default=4)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=_flow_train)
    s = fl.add_parser("sample", help="draw a seeded sample stack")
    s.add_argument("--ckpt", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--lr-image")
    src.add_argument("--manifest", help="one stack per pair, HR kept as target.png")
    s.add_argument("--tau", type=float, default=0.9)
    s.add_argument("--seeds", default="0..24")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_flow_sample)

    e = sub.add_parser("ensemble", help="average or median of the first k samples")
    e.add_argument("--stack", required=True)
    e.add_argument("--method", choices=("average", "median"), default="average")
    e.add_argument("--k", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_ensemble)

    fu = sub.add_parser("fusion").add_subparsers(dest="action", required=True)
    ft = fu.add_parser("train", help="train a fusion net on stacks with target.png")
    ft.add_argument("--stacks", required=True)
    ft.add_argument("--loss", choices=("l1", "lpips"), default="l1")
    ft.add_argument("--iters", type=int, default=500)
    ft.add_argument("--k-in", type=int, default=10)
    ft.add_argument("--lr", type=float, default=2e-4)
    ft.add_argument("--batch-size", type=int, default=8)
    ft.add_argument("--extractor", choices=("auto", "random"), default="auto")
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--ckpt", required=True)
    ft.set_defaults(func=_fusion_train)
    fa = fu.add_parser("apply", help="fuse one stack")
    fa.add_argument("--ckpt", required=True)
    fa.add_argument("--stack", required=True)
    fa.add_argument("--out", required=True)
    fa.set_defaults(func=_fusion_apply)

    me = sub.add_parser("metrics").add_subparsers(dest="action", required=True)
    ev = me.add_parser("eval", help="PSNR / SSIM / LPIPS of images or matching directories")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--extractor", choices=("auto", "random"), default="auto")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=_metrics_eval)

    tr = sub.add_parser("tradeoff").add_subparsers(dest="action", required=True)
    r = tr.add_parser("run", help="full sweep and perception-distortion report")
    r.add_argument("--config", help="flat key = value TOML")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_tradeoff_run)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
