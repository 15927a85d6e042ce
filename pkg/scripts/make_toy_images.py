"""Write procedurally generated RGB images to use as an HR folder."""

import argparse

from srfusion.toy import write_toy_images


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    paths = write_toy_images(args.out, args.count, seed=args.seed, size=args.size)
    print(f"wrote {len(paths)} images to {args.out}")


if __name__ == "__main__":
    main()
