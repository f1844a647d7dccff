"""Sweep the head normalization, block count, and keep-count schedule.

Each setting gets a short smoke run on a shared synthetic dataset; the
summary table shows final losses and harmonic IoU per setting.
"""

import argparse
import sys
from pathlib import Path

from chimera.clip_adapter import make_mini_clip, save_weight_bundle
from chimera.config import TrainConfig
from chimera.data import load_dataset, make_toy_dataset
from chimera.train import evaluate, train


def run_one(root: Path, name: str, iterations: int, **overrides):
    cfg = TrainConfig(data_manifest=str(root / "data"),
                      clip_bundle=str(root / "bundle"),
                      out_dir=str(root / name),
                      iterations=iterations, batch_size=4, seed=5,
                      sgd_k0=50, **overrides)
    result = train(cfg)
    report = evaluate(result.checkpoint_path)
    return result.final_losses, report


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--iterations", type=int, default=50)
    args = ap.parse_args()

    root = Path(args.out)
    make_toy_dataset(seed=2, n_images=6, image_size=32, n_seen=3, n_unseen=2,
                     out_dir=root / "data")
    ds = load_dataset(root / "data")
    bundle = make_mini_clip(seed=2, d_vis=24, d_emb=12, patch_size=8,
                            class_names=ds.manifest.split.names)
    save_weight_bundle(bundle, root / "bundle")

    grid = ([("norm", n, dict(csh_norm=n))
             for n in ("bn", "gn", "ln-frozen", "ln-learn", "none")]
            + [("blocks", b, dict(csh_blocks=b)) for b in (0, 1, 2, 3)]
            + [("decay", m, dict(sgd_mode=m))
               for m in ("decrease", "increase", "none")])

    print(f"{'axis':8s} {'value':10s} {'total':>9s} {'hIoU':>7s}")
    for axis, value, overrides in grid:
        losses, report = run_one(root, f"{axis}_{value}",
                                 args.iterations, **overrides)
        print(f"{axis:8s} {str(value):10s} {losses['total']:9.4f} "
              f"{report.h_iou:7.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
