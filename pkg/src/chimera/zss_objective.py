"""Pixel classification, segmentation loss, calibrated inference, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .pseudo_supervision import IGNORE, ZSSplit

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


def pixel_logits(f_c, classifier):
    """Per-pixel dot products against classifier rows, nothing else.

    Args:
        f_c: H' x W' x d_emb dense features (torch or numpy).
        classifier: M x d_emb row-per-class matrix.

    Returns:
        H' x W' x M logits of the same array kind as f_c.
    """
    if isinstance(f_c, torch.Tensor):
        classifier = torch.as_tensor(classifier, dtype=f_c.dtype, device=f_c.device)
        if classifier.ndim != 2 or classifier.shape[1] != f_c.shape[-1]:
            raise ValueError(
                f"classifier {tuple(classifier.shape)} does not match d_emb {f_c.shape[-1]}")
        return f_c @ classifier.T
    f_c = np.asarray(f_c)
    classifier = np.asarray(classifier)
    if classifier.ndim != 2 or classifier.shape[1] != f_c.shape[-1]:
        raise ValueError(
            f"classifier {classifier.shape} does not match d_emb {f_c.shape[-1]}")
    return f_c @ classifier.T


def seg_loss(logits: torch.Tensor, labels: np.ndarray | torch.Tensor,
             focal_gamma: float = FOCAL_GAMMA,
             focal_alpha: float = FOCAL_ALPHA) -> torch.Tensor:
    """Mean cross-entropy plus mean focal loss over non-ignore pixels.

    Both terms average over the same pixel set; an all-ignore map scores 0.
    """
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(np.ascontiguousarray(labels.astype(np.int64)))
    labels = labels.reshape(-1)
    m = logits.shape[-1]
    flat = logits.reshape(-1, m)
    if flat.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{flat.shape[0]} logit positions vs {labels.shape[0]} labels")
    keep = labels != IGNORE
    if not bool(keep.any()):
        return torch.zeros((), dtype=logits.dtype, device=logits.device)
    labels = labels[keep]
    if int(labels.max()) >= m:
        raise ValueError(f"label {int(labels.max())} outside class axis of size {m}")
    flat = flat[keep]
    log_p = F.log_softmax(flat, dim=1)
    log_pt = log_p.gather(1, labels[:, None]).squeeze(1)
    ce = -log_pt.mean()
    pt = log_pt.exp()
    focal = (focal_alpha * (1.0 - pt) ** focal_gamma * -log_pt).mean()
    return ce + focal


def total_loss(l_seg, l_sgd, l_sam, lambda_sam: float):
    """Exact weighted sum of the three components."""
    return l_seg + l_sgd + lambda_sam * l_sam


def calibrated_inference(f_c, a_full, split: ZSSplit, gamma: float) -> np.ndarray:
    """Argmax over all N classes after boosting unseen logits by gamma.

    Ties resolve to the lowest class ID.  Returns an H' x W' int64 map.
    """
    if isinstance(f_c, torch.Tensor):
        f_c = f_c.detach().cpu().numpy()
    if isinstance(a_full, torch.Tensor):
        a_full = a_full.detach().cpu().numpy()
    a_full = np.asarray(a_full, dtype=np.float64)
    if a_full.shape[0] != len(split.names):
        raise ValueError(
            f"classifier has {a_full.shape[0]} rows for {len(split.names)} classes")
    logits = pixel_logits(np.asarray(f_c, dtype=np.float64), a_full)
    logits[..., list(split.unseen_ids)] += gamma
    return np.argmax(logits, axis=-1).astype(np.int64)


def harmonic_iou(s_iou: float, u_iou: float) -> float:
    """2su/(s+u); 0 whenever either side is 0."""
    if s_iou <= 0.0 or u_iou <= 0.0:
        return 0.0
    return 2.0 * s_iou * u_iou / (s_iou + u_iou)


@dataclass
class MetricsReport:
    """Dataset-level ZSS metrics with raw confusion totals for auditing."""

    per_class_iou: np.ndarray
    s_iou: float
    u_iou: float
    h_iou: float
    p_acc: float
    intersection: np.ndarray
    union: np.ndarray
    pixels: np.ndarray
    split: ZSSplit = field(repr=False)

    def to_csv(self) -> str:
        lines = ["class,iou,seen_flag"]
        for cid, name in enumerate(self.split.names):
            flag = 1 if cid in self.split.seen_ids else 0
            lines.append(f"{name},{self.per_class_iou[cid]:.6f},{flag}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (f"sIoU={self.s_iou:.4f} uIoU={self.u_iou:.4f} "
                f"hIoU={self.h_iou:.4f} pAcc={self.p_acc:.4f}")


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                         inter: np.ndarray, union: np.ndarray,
                         pixels: np.ndarray) -> int:
    """Add one image's per-class intersection/union/pixel counts in place.

    Returns the number of correctly labeled non-ignore pixels.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != IGNORE
    pred = pred[keep]
    gt = gt[keep]
    correct = pred == gt
    for c in range(n_classes):
        p = pred == c
        g = gt == c
        i = int(np.count_nonzero(p & g))
        inter[c] += i
        union[c] += int(np.count_nonzero(p)) + int(np.count_nonzero(g)) - i
        pixels[c] += int(np.count_nonzero(g))
    return int(np.count_nonzero(correct))


def compute_metrics(preds: list[np.ndarray], gts: list[np.ndarray],
                    split: ZSSplit) -> MetricsReport:
    """Dataset IoU from summed counts; unweighted class means; harmonic blend.

    Classes whose union stays 0 across the dataset are excluded from the
    seen/unseen means (their per_class_iou entry reads 0 with union 0).
    """
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError(f"need matching non-empty lists, got {len(preds)}/{len(gts)}")
    n = len(split.names)
    inter = np.zeros(n, dtype=np.int64)
    union = np.zeros(n, dtype=np.int64)
    pixels = np.zeros(n, dtype=np.int64)
    correct = 0
    for pred, gt in zip(preds, gts):
        correct += accumulate_confusion(np.asarray(pred), np.asarray(gt), n,
                                        inter, union, pixels)
    iou = np.zeros(n, dtype=np.float64)
    defined = union > 0
    iou[defined] = inter[defined] / union[defined]

    def mean_over(ids):
        ids = [c for c in ids if defined[c]]
        return float(np.mean(iou[ids])) if ids else 0.0

    s_iou = mean_over(split.seen_ids)
    u_iou = mean_over(split.unseen_ids)
    total_pixels = int(pixels.sum())
    return MetricsReport(
        per_class_iou=iou,
        s_iou=s_iou,
        u_iou=u_iou,
        h_iou=harmonic_iou(s_iou, u_iou),
        p_acc=correct / total_pixels if total_pixels else 0.0,
        intersection=inter,
        union=union,
        pixels=pixels,
        split=split,
    )
