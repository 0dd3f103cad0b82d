#!/usr/bin/env python3
"""Generate the synthetic glyph dataset used by the desk-scale experiments."""

import argparse

from partfew.toydata import make_toy_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/toyset")
    ap.add_argument("--classes", type=int, default=40)
    ap.add_argument("--per-class", type=int, default=40)
    ap.add_argument("--side", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = make_toy_dataset(
        args.out, n_classes=args.classes, images_per_class=args.per_class,
        side=args.side, seed=args.seed,
    )
    print(f"dataset at {root}: {args.classes} classes x {args.per_class} images")


if __name__ == "__main__":
    main()
