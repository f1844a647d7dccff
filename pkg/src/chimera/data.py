"""Synthetic segmentation scenes and dataset loading.

Each toy scene is a seen-class background plus a few axis-aligned rectangles.
Region boundaries snap to an 8-pixel grid so they are representable both on
the backbone's stride-4 prediction grid and on the frozen encoder's patch
grid; every class gets a distinct base color with mild per-pixel texture so
regions are separable yet non-constant.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .pseudo_supervision import IGNORE, ZSSplit

MANIFEST_NAME = "manifest.json"
GRID = 8  # region boundaries align to both the stride-4 and patch-8 grids


class DatasetError(Exception):
    """Raised for malformed dataset directories or label files."""


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    image_size: int
    split: ZSSplit
    entries: tuple[tuple[str, str], ...]

    @property
    def n_images(self) -> int:
        return len(self.entries)


@dataclass
class LoadedDataset:
    """In-memory dataset: images in [0,1], labels in global IDs and seen rank."""

    manifest: DatasetManifest
    images: list[np.ndarray]
    labels_full: list[np.ndarray]
    labels_train: list[np.ndarray]


def class_colors(n: int) -> np.ndarray:
    """N distinct RGB base colors in [0,1], evenly spaced hues."""
    cols = [colorsys.hsv_to_rgb(i / n, 0.85, 0.9) for i in range(n)]
    return np.array(cols, dtype=np.float64)


def make_toy_dataset(seed: int, n_images: int, image_size: int, n_seen: int,
                     n_unseen: int, out_dir: str | Path) -> DatasetManifest:
    """Write a deterministic synthetic dataset directory.

    Scenes are built so every class occurs somewhere in the dataset:
    backgrounds cycle through the seen classes, rectangle classes cycle
    through the full vocabulary.
    """
    if image_size < 2 * GRID or image_size % GRID != 0:
        raise ValueError(f"image_size must be a multiple of {GRID} and >= {2 * GRID}")
    if n_images < 1 or n_seen < 1 or n_unseen < 0:
        raise ValueError("need n_images >= 1, n_seen >= 1, n_unseen >= 0")
    n = n_seen + n_unseen
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    names = tuple(f"seen{i}" for i in range(n_seen)) + tuple(
        f"unseen{i}" for i in range(n_unseen))
    split = ZSSplit(seen_ids=tuple(range(n_seen)),
                    unseen_ids=tuple(range(n_seen, n)), names=names)
    colors = class_colors(n)

    entries = []
    rect_counter = 0
    cells = image_size // GRID
    for i in range(n_images):
        labels = np.full((image_size, image_size), i % n_seen, dtype=np.uint8)
        n_rects = 2 + i % 2
        for _ in range(n_rects):
            cls = rect_counter % n
            rect_counter += 1
            w = GRID * int(rng.integers(2, max(3, cells // 2) + 1))
            h = GRID * int(rng.integers(2, max(3, cells // 2) + 1))
            x0 = GRID * int(rng.integers(0, (image_size - w) // GRID + 1))
            y0 = GRID * int(rng.integers(0, (image_size - h) // GRID + 1))
            labels[y0:y0 + h, x0:x0 + w] = cls

        image = colors[labels] + rng.normal(scale=0.03, size=(image_size, image_size, 3))
        image = np.clip(image, 0.0, 1.0)

        img_name = f"img_{i:03d}.png"
        lab_name = f"lab_{i:03d}.png"
        Image.fromarray(np.round(image * 255).astype(np.uint8)).save(out_dir / img_name)
        Image.fromarray(labels, mode="L").save(out_dir / lab_name)
        entries.append((img_name, lab_name))

    manifest = {
        "format_version": 1,
        "image_size": image_size,
        "names": list(names),
        "seen_ids": list(split.seen_ids),
        "unseen_ids": list(split.unseen_ids),
        "images": [{"image": a, "label": b} for a, b in entries],
        "seed": seed,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return DatasetManifest(root=out_dir, image_size=image_size, split=split,
                           entries=tuple(entries))


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    mf = root / MANIFEST_NAME
    if not mf.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    data = json.loads(mf.read_text())
    split = ZSSplit(seen_ids=tuple(data["seen_ids"]),
                    unseen_ids=tuple(data["unseen_ids"]),
                    names=tuple(data["names"]))
    entries = tuple((e["image"], e["label"]) for e in data["images"])
    return DatasetManifest(root=root, image_size=int(data["image_size"]),
                           split=split, entries=entries)


def load_dataset(root: str | Path) -> LoadedDataset:
    """Load and validate every image/label pair under a manifest.

    labels_full keeps global class IDs (plus 255 ignore); labels_train
    re-expresses seen classes by their rank in seen_ids and marks every
    unseen-class pixel ignore, since unseen annotations are unavailable
    during training in either mode.
    """
    manifest = load_manifest(root)
    n = len(manifest.split.names)
    rank = {cid: r for r, cid in enumerate(manifest.split.seen_ids)}
    images, labels_full, labels_train = [], [], []
    for img_name, lab_name in manifest.entries:
        img_path = manifest.root / img_name
        lab_path = manifest.root / lab_name
        if not img_path.is_file():
            raise DatasetError(f"missing image file {img_path}")
        if not lab_path.is_file():
            raise DatasetError(f"missing label file {lab_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        labels = np.asarray(Image.open(lab_path), dtype=np.int64)
        if image.shape[:2] != labels.shape:
            raise DatasetError(f"{img_name}: image {image.shape[:2]} vs label {labels.shape}")
        bad = (labels != IGNORE) & ((labels < 0) | (labels >= n))
        if bad.any():
            raise DatasetError(
                f"{lab_name}: labels outside [0, {n}) + ignore: "
                f"{sorted(np.unique(labels[bad]).tolist())}")
        train = np.full_like(labels, IGNORE)
        for cid, r in rank.items():
            train[labels == cid] = r
        images.append(image)
        labels_full.append(labels)
        labels_train.append(train)
    return LoadedDataset(manifest=manifest, images=images,
                         labels_full=labels_full, labels_train=labels_train)
