"""Run the desk sweep and print the report plus the acceptance-relevant trends.

    python3 scripts/run_desk_sweep.py --config scripts/sweep_desk.toml --out runs/desk
"""

import argparse
import logging
from pathlib import Path

import torch

from srfusion.tradeoff import SweepConfig, run_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(Path(__file__).with_name("sweep_desk.toml")))
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--threads", type=int, default=0, help="torch threads (0 = torch default)")
    args = p.parse_args()
    if args.threads:
        torch.set_num_threads(args.threads)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    r = run_sweep(SweepConfig.from_file(args.config), args.out)
    print((Path(args.out) / "report.md").read_text())
    single = r.point("flow-sample(tau=0.9)")
    a5, a25 = r.point("average(k=5)"), r.point("average(k=25)")
    checks = [
        ("PSNR average(25) >= average(5)", a25.psnr_db >= a5.psnr_db),
        ("PSNR average(5) > single sample", a5.psnr_db > single.psnr_db),
        ("LPIPS average(5) <= average(25)", a5.lpips <= a25.lpips),
    ]
    if "l1" in r.fusion_nets:
        checks.append(("PSNR fusion-l1 >= single sample", r.point("fusion-l1").psnr_db >= single.psnr_db))
    if "lpips" in r.fusion_nets:
        checks.append(("LPIPS fusion-lpips <= average(25)", r.point("fusion-lpips").lpips <= a25.lpips))
    for name, ok in checks:
        print(f"{'holds ' if ok else 'FAILS '} {name}")


if __name__ == "__main__":
    main()
