"""Pseudo masks, class prototypes, and the semantic alignment loss.

Ground-truth seen labels are kept verbatim; pixels the annotation ignores
are carved into regions by K-means over upsampled patch tokens.  Clusters
that look like a seen class (cosine match against the seen text embeddings
above a threshold) are folded back into it; the rest become latent classes
numbered upward from N_s, largest region first.  Prototypes are masked
means of the dense joint-space features, and the alignment loss matches
the seen prototypes' affinity profile to the text embeddings' profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

IGNORE = 255


@dataclass(frozen=True)
class ClusterConfig:
    k_clusters: int = 8
    theta: float = 0.7
    min_area: int = 4
    n_iter: int = 50


@dataclass
class PseudoMask:
    """Per-pixel labels: seen in [0, N_s), latent in [N_s, N_s + o_u), 255 ignore."""

    labels: np.ndarray
    n_seen: int
    o_u: int

    def validate(self) -> None:
        vals = np.unique(self.labels)
        vals = vals[vals != IGNORE]
        if vals.size and (vals.min() < 0 or vals.max() >= self.n_seen + self.o_u):
            raise ValueError(
                f"labels outside [0, {self.n_seen + self.o_u}): {vals.tolist()}")
        latent = vals[vals >= self.n_seen]
        if latent.size and not np.array_equal(
                np.sort(latent), np.arange(self.n_seen, self.n_seen + latent.size)):
            raise ValueError(f"latent IDs not contiguous from {self.n_seen}: {latent.tolist()}")


@dataclass
class PrototypeSet:
    """Masked-mean features per present class, split by seen vs latent ID."""

    seen: torch.Tensor
    seen_ids: list[int]
    latent: torch.Tensor
    latent_ids: list[int]

    @property
    def o_s(self) -> int:
        return len(self.seen_ids)

    @property
    def o_u(self) -> int:
        return len(self.latent_ids)


@dataclass(frozen=True)
class ZSSplit:
    """Seen/unseen partition of the class vocabulary."""

    seen_ids: tuple[int, ...]
    unseen_ids: tuple[int, ...]
    names: tuple[str, ...]
    mode: str = "inductive"

    def __post_init__(self):
        if self.mode not in ("inductive", "transductive"):
            raise ValueError(f"mode must be inductive or transductive, got {self.mode!r}")
        seen, unseen = set(self.seen_ids), set(self.unseen_ids)
        if seen & unseen:
            raise ValueError(f"seen/unseen overlap: {sorted(seen & unseen)}")
        if seen | unseen != set(range(len(self.names))):
            raise ValueError("seen and unseen IDs must cover the class list exactly")

    @property
    def n_seen(self) -> int:
        return len(self.seen_ids)

    @property
    def n_unseen(self) -> int:
        return len(self.unseen_ids)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           n_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (assignments, centroids).  Ties in nearest-centroid go to the
    lowest centroid index; a cluster left empty keeps its previous centroid.
    """
    if k < 1:
        raise ValueError(f"k_clusters must be >= 1, got {k}")
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    k = min(k, n)

    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[int(rng.integers(n))]
        else:
            centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centroids[j] = points[sel].mean(axis=0)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return assign, centroids


def upsample_tokens(patch_tokens: np.ndarray, grid_hw: tuple[int, int],
                    out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor upsample of a flat token grid to pixel resolution."""
    gh, gw = grid_hw
    h, w = out_hw
    if patch_tokens.shape[0] != gh * gw:
        raise ValueError(f"{patch_tokens.shape[0]} tokens do not fill a {gh}x{gw} grid")
    if h % gh != 0 or w % gw != 0:
        raise ValueError(f"output {h}x{w} not an integer multiple of grid {gh}x{gw}")
    tokens = patch_tokens.reshape(gh, gw, -1)
    return tokens.repeat(h // gh, axis=0).repeat(w // gw, axis=1)


def generate_pseudo_mask(patch_tokens: np.ndarray, grid_hw: tuple[int, int],
                         gt_seen: np.ndarray, a_s: np.ndarray,
                         cfg: ClusterConfig, rng: np.random.Generator) -> PseudoMask:
    """Fill the ignored area of a seen-only annotation with latent regions.

    Args:
        patch_tokens: P x d_emb patch features from the frozen encoder.
        grid_hw: token grid shape (gh, gw) with gh*gw = P.
        gt_seen: H x W labels in [0, N_s) or 255.
        a_s: N_s x d_emb seen text embeddings, for cluster-to-seen merging.
        cfg: clustering parameters.
        rng: drives k-means++ seeding only.
    """
    if cfg.k_clusters < 1:
        raise ValueError(f"k_clusters must be >= 1, got {cfg.k_clusters}")
    gt_seen = np.asarray(gt_seen)
    n_seen = a_s.shape[0]
    labels = gt_seen.astype(np.int64)
    unknown = gt_seen == IGNORE
    if not unknown.any():
        return PseudoMask(labels=labels, n_seen=n_seen, o_u=0)

    dense = upsample_tokens(np.asarray(patch_tokens, dtype=np.float64),
                            grid_hw, gt_seen.shape)
    points = dense[unknown]
    assign, centroids = kmeans(points, cfg.k_clusters, rng, n_iter=cfg.n_iter)

    a_s64 = np.asarray(a_s, dtype=np.float64)
    a_norm = a_s64 / np.maximum(np.linalg.norm(a_s64, axis=1, keepdims=True), 1e-12)

    latent_sizes = []
    cluster_label = {}
    for j in np.unique(assign):
        size = int((assign == j).sum())
        c = centroids[j]
        c = c / max(np.linalg.norm(c), 1e-12)
        cos = a_norm @ c
        best = int(np.argmax(cos))
        if cos[best] > cfg.theta:
            cluster_label[j] = best
        elif size < cfg.min_area:
            cluster_label[j] = IGNORE
        else:
            latent_sizes.append((size, j))
            cluster_label[j] = None

    # Latent IDs count upward from n_seen, largest region first; equal sizes
    # ordered by cluster index for determinism.
    latent_sizes.sort(key=lambda t: (-t[0], t[1]))
    for rank, (_, j) in enumerate(latent_sizes):
        cluster_label[j] = n_seen + rank

    flat = np.full(points.shape[0], IGNORE, dtype=np.int64)
    for j, lab in cluster_label.items():
        flat[assign == j] = IGNORE if lab is None else lab
    labels[unknown] = flat.astype(labels.dtype)
    mask = PseudoMask(labels=labels, n_seen=n_seen, o_u=len(latent_sizes))
    mask.validate()
    return mask


def downsample_mask(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor downsample: each output cell takes its center pixel."""
    h, w = labels.shape
    if h % stride or w % stride:
        raise ValueError(f"mask {h}x{w} not divisible by stride {stride}")
    off = stride // 2
    return labels[off::stride, off::stride]


def compute_prototypes(f_c: torch.Tensor, mask: np.ndarray, n_seen: int) -> PrototypeSet:
    """Masked mean of f_c per class ID present in the aligned mask.

    Differentiable in f_c; ignore positions contribute to no prototype.
    """
    if f_c.shape[:2] != mask.shape:
        raise ValueError(f"feature grid {tuple(f_c.shape[:2])} vs mask {mask.shape}")
    flat = f_c.reshape(-1, f_c.shape[-1])
    ids = np.unique(mask)
    ids = ids[ids != IGNORE]
    seen_rows, seen_ids, latent_rows, latent_ids = [], [], [], []
    mask_flat = torch.from_numpy(np.ascontiguousarray(mask.reshape(-1).astype(np.int64)))
    for cid in ids.tolist():
        sel = mask_flat == cid
        proto = flat[sel].mean(dim=0)
        if cid < n_seen:
            seen_rows.append(proto)
            seen_ids.append(cid)
        else:
            latent_rows.append(proto)
            latent_ids.append(cid)
    d = f_c.shape[-1]
    empty = torch.zeros(0, d, dtype=f_c.dtype, device=f_c.device)
    return PrototypeSet(
        seen=torch.stack(seen_rows) if seen_rows else empty,
        seen_ids=seen_ids,
        latent=torch.stack(latent_rows) if latent_rows else empty,
        latent_ids=latent_ids,
    )


def split_prototypes(p: PrototypeSet) -> tuple[torch.Tensor, torch.Tensor]:
    """(seen group, latent group); the set construction already partitions."""
    return p.seen, p.latent


def sam_loss(f_l_s: torch.Tensor, a_s_present: torch.Tensor, c_g,
             tau_f: float, tau_c: float) -> torch.Tensor:
    """KL between affinity-to-global profiles of prototypes and text rows.

    Both sides are softmax distributions over the seen classes present in
    the image; the feature-side distribution (temperature tau_f) is the
    first KL argument, the text-side (temperature tau_c) the second.
    """
    if tau_f <= 0 or tau_c <= 0:
        raise ValueError(f"temperatures must be > 0, got tau_f={tau_f}, tau_c={tau_c}")
    if f_l_s.shape != a_s_present.shape:
        raise ValueError(
            f"shape mismatch: {tuple(f_l_s.shape)} vs {tuple(a_s_present.shape)}")
    if f_l_s.shape[0] < 1:
        raise ValueError("at least one present seen class is required")
    c_g = torch.as_tensor(c_g, dtype=f_l_s.dtype, device=f_l_s.device)
    p_log = torch.log_softmax(f_l_s @ c_g / tau_f, dim=0)
    q_log = torch.log_softmax(a_s_present @ c_g / tau_c, dim=0)
    p = p_log.exp()
    return (p * (p_log - q_log)).sum()
