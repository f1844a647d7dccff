"""Command-line entry points.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure (NaN loss).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .clip_adapter import BundleError, make_mini_clip, save_weight_bundle
from .config import ConfigError, load_config
from .data import DatasetError, load_manifest, make_toy_dataset
from .semantic_head import NORM_CHOICES
from .train import NanLossError, evaluate, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chimera",
                     description="Zero-shot segmentation toy pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", parents=[], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-seen", type=int, default=4)
    p.add_argument("--n-unseen", type=int, default=2)

    p = sub.add_parser("make-mini-clip", help="synthesize a frozen weight bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="dataset dir whose class names the bundle embeds")
    p.add_argument("--classes", help="comma-separated class names (alternative to --data)")
    p.add_argument("--d-vis", type=int, default=32)
    p.add_argument("--d-emb", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=8)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--out", default=None, help="write per-class CSV here")

    p = sub.add_parser("analyze-cka", help="layer-similarity analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--norm", choices=NORM_CHOICES, default=None)
    p.add_argument("--out", default="cka_out")
    p.add_argument("--data", default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--positions", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("heatmap", help="similarity heatmap for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_name", default=None)
    p.add_argument("--use-cls", action="store_true",
                   help="use the image CLS token instead of a class embedding")
    p.add_argument("--bundle", default=None)
    p.add_argument("--out", default="heatmap")

    return parser


def _run(args) -> int:
    if args.command == "make-toy-data":
        manifest = make_toy_dataset(seed=args.seed, n_images=args.n_images,
                                    image_size=args.image_size, n_seen=args.n_seen,
                                    n_unseen=args.n_unseen, out_dir=args.out)
        print(f"wrote {manifest.n_images} images to {manifest.root}")
        return 0

    if args.command == "make-mini-clip":
        if args.data:
            names = list(load_manifest(args.data).split.names)
        elif args.classes:
            names = [c.strip() for c in args.classes.split(",") if c.strip()]
        else:
            print("error: one of --data or --classes is required", file=sys.stderr)
            return 1
        bundle = make_mini_clip(seed=args.seed, d_vis=args.d_vis, d_emb=args.d_emb,
                                patch_size=args.patch_size, class_names=names)
        save_weight_bundle(bundle, args.out)
        print(f"wrote bundle ({len(names)} classes) to {args.out}")
        return 0

    if args.command == "train":
        cfg = load_config(args.config)
        result = train(cfg)
        losses = " ".join(f"{k}={v:.4f}" for k, v in result.final_losses.items())
        print(f"trained {cfg.iterations} iterations in {result.elapsed_s:.1f}s; {losses}")
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"loss log:  {result.log_path}")
        return 0

    if args.command == "eval":
        report = evaluate(args.checkpoint, dataset_root=args.data,
                          bundle_path=args.bundle, gamma=args.gamma)
        print(report.summary())
        if args.out:
            Path(args.out).write_text(report.to_csv())
            print(f"per-class CSV: {args.out}")
        return 0

    if args.command == "analyze-cka":
        from .analysis import analyze_cka
        names, matrix = analyze_cka(args.checkpoint, out_dir=args.out,
                                    dataset_root=args.data, bundle_path=args.bundle,
                                    norm=args.norm, n_images=args.images,
                                    n_positions=args.positions, seed=args.seed)
        print(f"{len(names)} layers; matrix written under {args.out}")
        return 0

    if args.command == "heatmap":
        from .analysis import export_heatmap
        png, csv = export_heatmap(args.checkpoint, args.image, args.class_name,
                                  out_prefix=args.out, bundle_path=args.bundle,
                                  use_cls=args.use_cls)
        print(f"wrote {png} and {csv}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except NanLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BundleError, ConfigError, DatasetError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
