#!/usr/bin/env python3
"""Write a synthetic dataset: model file, textured head images, landmark files, manifest.

    python3 scripts/make_synthetic_dataset.py --out data/synth --count 20
"""

import argparse

from facejitter.synthetic import write_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--noise", type=float, default=0.0, help="landmark noise (px)")
    args = ap.parse_args()
    write_synthetic_dataset(args.out, args.count, args.seed, args.size, args.noise)
    print(f"wrote {args.count} records to {args.out}")


if __name__ == "__main__":
    main()
