"""Representation analysis: linear CKA across layers and similarity heatmaps.

Activations are compared at matched spatial positions: each sampled position
is a normalized (u, v) coordinate mapped onto every layer's own grid, so
layers with different strides still describe the same image locations.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .clip_adapter import (
    ClipWeightBundle,
    embed_class_names,
    encode_image,
    encode_image_trace,
    load_weight_bundle,
)
from .data import load_dataset
from .selective_distillation import similarity_scores
from .semantic_head import SemanticHead
from .train import load_checkpoint, restore_models


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two activation matrices.

    Columns are centered; the score is ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F),
    which is invariant to orthogonal transforms and isotropic scaling.
    Returns 0 when either input is constant (zero denominator).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need matching row counts, got {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    num = np.linalg.norm(y.T @ x, ord="fro") ** 2
    den = np.linalg.norm(x.T @ x, ord="fro") * np.linalg.norm(y.T @ y, ord="fro")
    return 0.0 if den == 0.0 else float(num / den)


def _sample_rows(layer: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Rows of a H x W x C activation map at normalized (u, v) coordinates."""
    h, w, _ = layer.shape
    ys = np.minimum((coords[:, 0] * h).astype(int), h - 1)
    xs = np.minimum((coords[:, 1] * w).astype(int), w - 1)
    return layer[ys, xs]


def collect_layer_activations(backbone, head: SemanticHead, bundle: ClipWeightBundle,
                              images: list[np.ndarray], n_positions: int = 64,
                              seed: int = 0) -> dict[str, np.ndarray]:
    """Per-layer activation matrices at shared sampled positions.

    Rows are (image, position) pairs in a fixed order; every layer sees the
    same normalized coordinates.  Norm layers run on batch statistics without
    touching running estimates, so collection never mutates the models.
    """
    if len(images) < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    acts: dict[str, list[np.ndarray]] = {}
    with torch.no_grad():
        for img in images:
            coords = rng.random((n_positions, 2))
            x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)[None]
            stages = backbone.stage_outputs(x)
            layers: dict[str, np.ndarray] = {
                f"backbone.stage{i}": s[0].numpy() for i, s in enumerate(stages)}
            trace = head(stages[-1], training=True, update_running=False)
            for name in ("f_p", "f_v_prime", "f_v", "f_bn", "f_res", "f_c"):
                layers[f"csh.{name}"] = getattr(trace, name)[0].numpy()
            enc = encode_image_trace(img, bundle)
            grid = img.shape[0] // bundle.patch_size, img.shape[1] // bundle.patch_size
            for name, tokens in enc.items():
                layers[f"clip.{name}"] = tokens[1:].reshape(grid[0], grid[1], -1)
            for name, layer in layers.items():
                acts.setdefault(name, []).append(_sample_rows(layer, coords))
    return {name: np.concatenate(rows, axis=0) for name, rows in acts.items()}


def cka_matrix(activations: dict[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    names = list(activations)
    n = len(names)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            v = cka(activations[names[i]], activations[names[j]])
            m[i, j] = m[j, i] = v
    return names, m


def matrix_to_csv(names: list[str], matrix: np.ndarray) -> str:
    lines = ["layer," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(f"{v:.8f}" for v in row))
    return "\n".join(lines) + "\n"


def render_matrix_png(matrix: np.ndarray, path: Path, cell: int = 24) -> None:
    """Viridis raster of a [0, 1] matrix, nearest-neighbor upscaled."""
    lut = (colormaps["viridis"](np.linspace(0, 1, 256))[:, :3] * 255).astype(np.uint8)
    idx = np.round(np.clip(matrix, 0.0, 1.0) * 255).astype(np.intp)
    img = lut[idx].repeat(cell, axis=0).repeat(cell, axis=1)
    Image.fromarray(img).save(path)


def analyze_cka(checkpoint: str | Path, out_dir: str | Path,
                dataset_root: str | Path | None = None,
                bundle_path: str | Path | None = None,
                norm: str | None = None, n_images: int = 8,
                n_positions: int = 64, seed: int = 0) -> tuple[list[str], np.ndarray]:
    """CKA matrix over backbone, head, and frozen-encoder layers; CSV + PNG.

    `norm` swaps the head's normalization stage for the analysis (fresh
    affine parameters for a stage the checkpoint never trained), keeping
    every other trained tensor from the checkpoint.
    """
    payload = load_checkpoint(checkpoint)
    from .config import parse_config
    cfg = parse_config(payload["config_text"])
    bundle = load_weight_bundle(bundle_path or cfg.clip_bundle)
    backbone, head, cfg = restore_models(payload, bundle)
    if norm is not None and norm != cfg.csh_norm:
        swapped = SemanticHead(in_channels=cfg.backbone_channels, bundle=bundle,
                               norm=norm, n_blocks=cfg.csh_blocks,
                               gn_groups=cfg.csh_gn_groups)
        own = swapped.state_dict()
        for key, value in head.state_dict().items():
            if key in own and own[key].shape == value.shape and not key.startswith("norm"):
                own[key] = value
        swapped.load_state_dict(own)
        head = swapped

    ds = load_dataset(dataset_root or cfg.data_manifest)
    if len(ds.images) < 2:
        raise ValueError("CKA analysis needs at least 2 images")
    images = ds.images[:n_images]
    acts = collect_layer_activations(backbone, head, bundle, images,
                                     n_positions=n_positions, seed=seed)
    names, matrix = cka_matrix(acts)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "cka_matrix.csv").write_text(matrix_to_csv(names, matrix))
    render_matrix_png(matrix, out_dir / "cka_matrix.png")
    return names, matrix


def normalize_unit(scores: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant field maps to all 0.5."""
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo == 0.0:
        return np.full_like(scores, 0.5, dtype=np.float64)
    return (scores - lo) / (hi - lo)


def export_heatmap(checkpoint: str | Path, image_path: str | Path,
                   class_name: str | None, out_prefix: str | Path,
                   bundle_path: str | Path | None = None,
                   use_cls: bool = False) -> tuple[Path, Path]:
    """Similarity-to-global raster for one image; PNG plus raw CSV.

    The reference vector is the named class text embedding, or the image's
    own CLS token with `use_cls`.  The PNG is the min-max normalized field
    upscaled to pixel resolution; the CSV keeps raw unnormalized scores.
    """
    payload = load_checkpoint(checkpoint)
    from .config import parse_config
    cfg = parse_config(payload["config_text"])
    bundle = load_weight_bundle(bundle_path or cfg.clip_bundle)
    backbone, head, cfg = restore_models(payload, bundle)

    img = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float64) / 255.0
    if use_cls:
        c_g = encode_image(img, bundle).cls_token
    else:
        if class_name is None:
            raise ValueError("a class name is required unless use_cls is set")
        c_g = embed_class_names([class_name], bundle)[0]

    backbone.eval()
    head.eval()
    with torch.no_grad():
        x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)[None]
        trace = head(backbone(x).data, training=False)
        f_c = trace.f_c[0]
        h, w = f_c.shape[:2]
        scores = similarity_scores(f_c, torch.from_numpy(np.ascontiguousarray(c_g))
                                   ).numpy().reshape(h, w)

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    png_path = out_prefix.with_suffix(".png")
    csv_path = out_prefix.with_suffix(".csv")

    unit = normalize_unit(scores)
    stride = backbone.stride
    raster = np.round(unit * 255).astype(np.uint8)
    raster = raster.repeat(stride, axis=0).repeat(stride, axis=1)
    Image.fromarray(raster, mode="L").save(png_path)
    csv_lines = [",".join(f"{v:.10g}" for v in row) for row in scores]
    csv_path.write_text("\n".join(csv_lines) + "\n")
    return png_path, csv_path
