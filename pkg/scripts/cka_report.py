"""Layer-similarity report for a trained checkpoint.

Writes the full CKA matrix (CSV + PNG) and prints the pairs most and least
similar across the backbone, head, and frozen encoder stages.
"""

import argparse
import sys

import numpy as np

from chimera.analysis import analyze_cka


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="runs/cka")
    ap.add_argument("--norm", default=None,
                    help="override the head normalization for the probe")
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--positions", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    names, matrix = analyze_cka(args.checkpoint, out_dir=args.out,
                                norm=args.norm, n_images=args.images,
                                n_positions=args.positions, seed=args.seed)
    iu = np.triu_indices(len(names), k=1)
    order = np.argsort(matrix[iu])
    print(f"{len(names)} layers; matrix written under {args.out}")
    print("most similar pairs:")
    for flat in order[::-1][:5]:
        i, j = iu[0][flat], iu[1][flat]
        print(f"  {matrix[i, j]:.4f}  {names[i]} ~ {names[j]}")
    print("least similar pairs:")
    for flat in order[:5]:
        i, j = iu[0][flat], iu[1][flat]
        print(f"  {matrix[i, j]:.4f}  {names[i]} ~ {names[j]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
