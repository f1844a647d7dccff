"""Training loop, checkpointing, and calibrated evaluation.

The frozen encoder outputs and the pseudo masks depend only on the dataset,
the bundle, and the seed, so both are computed once up front and reused
every iteration.  All randomness flows through named generators seeded from
the config, which makes loss logs byte-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone
from .clip_adapter import ClipWeightBundle, embed_class_names, load_weight_bundle
from .config import TrainConfig, config_to_text, parse_config
from .data import LoadedDataset, load_dataset
from .pseudo_supervision import (
    IGNORE,
    ClusterConfig,
    PseudoMask,
    compute_prototypes,
    downsample_mask,
    generate_pseudo_mask,
    sam_loss,
)
from .selective_distillation import (
    DecaySchedule,
    aggregate_global,
    decayed_k,
    gumbel_topk,
    sgd_loss,
    similarity_scores,
)
from .semantic_head import SemanticHead, head_fingerprint_from_bundle
from .zss_objective import (
    MetricsReport,
    calibrated_inference,
    compute_metrics,
    pixel_logits,
    seg_loss,
    total_loss,
)

CHECKPOINT_VERSION = 1
LOG_HEADER = "iteration,seg,sgd,sam,total,k"


class NanLossError(RuntimeError):
    """A loss component became non-finite; carries the iteration index."""

    def __init__(self, iteration: int, parts: dict[str, float]):
        self.iteration = iteration
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {detail}")


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    log_path: Path
    final_losses: dict[str, float]
    elapsed_s: float


def build_models(cfg: TrainConfig, bundle: ClipWeightBundle) -> tuple[Backbone, SemanticHead]:
    backbone = Backbone(out_channels=cfg.backbone_channels)
    head = SemanticHead(in_channels=cfg.backbone_channels, bundle=bundle,
                        norm=cfg.csh_norm, n_blocks=cfg.csh_blocks,
                        gn_groups=cfg.csh_gn_groups)
    return backbone, head


def encode_dataset(ds: LoadedDataset, bundle: ClipWeightBundle):
    """Frozen per-image encoder outputs (CLS + patch tokens), in dataset order."""
    from .clip_adapter import encode_image
    return [encode_image(img, bundle) for img in ds.images]


def pseudo_masks_for(ds: LoadedDataset, encodings, bundle: ClipWeightBundle,
                     cfg: TrainConfig) -> list[PseudoMask]:
    """Per-image pseudo masks with independent, index-stable clustering seeds."""
    a_s = embed_class_names(
        [ds.manifest.split.names[c] for c in ds.manifest.split.seen_ids], bundle)
    cluster_cfg = ClusterConfig(k_clusters=cfg.pseudo_k_clusters,
                                theta=cfg.pseudo_theta, min_area=cfg.pseudo_min_area)
    grid = ds.manifest.image_size // bundle.patch_size
    masks = []
    for idx, (enc, gt) in enumerate(zip(encodings, ds.labels_train)):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, idx]))
        masks.append(generate_pseudo_mask(enc.patch_tokens, (grid, grid), gt,
                                          a_s, cluster_cfg, rng))
    return masks


def _remap_latent_labels(labels: np.ndarray, n_seen: int,
                         latent_ids: list[int], n_latent_cols: int) -> np.ndarray:
    """Map latent mask IDs onto contiguous classifier columns after n_seen.

    IDs without a column (prototype absent after downsampling, or beyond the
    transductive classifier width) become ignore.
    """
    out = labels.copy()
    latent_pix = (labels >= n_seen) & (labels != IGNORE)
    out[latent_pix] = IGNORE
    for col, lid in enumerate(latent_ids[:n_latent_cols]):
        out[labels == lid] = n_seen + col
    return out


def save_checkpoint(path: Path, iteration: int, backbone: Backbone,
                    head: SemanticHead, cfg: TrainConfig,
                    rng_states: dict, fingerprint: str) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "backbone_state": backbone.state_dict(),
        "head_state": head.state_dict(),
        "trainable_keys": sorted(
            ["backbone." + n for n, _ in backbone.named_parameters()]
            + ["head." + n for n, _ in head.named_parameters()]),
        "frozen_keys": sorted("head." + n for n, _ in head.named_buffers()
                              if n.startswith(("venc_", "proj_", "ln_frozen_"))),
        "bundle_fingerprint": fingerprint,
        "config_text": config_to_text(cfg),
        "rng_states": rng_states,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    return payload


def restore_models(payload: dict, bundle: ClipWeightBundle) -> tuple[Backbone, SemanticHead, TrainConfig]:
    cfg = parse_config(payload["config_text"])
    backbone, head = build_models(cfg, bundle)
    backbone.load_state_dict(payload["backbone_state"])
    head.load_state_dict(payload["head_state"])
    expected = head_fingerprint_from_bundle(bundle, norm=cfg.csh_norm)
    if payload["bundle_fingerprint"] != expected:
        raise ValueError("checkpoint was trained against a different frozen bundle")
    if head.frozen_fingerprint() != expected:
        raise ValueError("restored frozen tensors do not match the bundle")
    return backbone, head, cfg


def _format_row(iteration: int, seg: float, sgd: float, sam: float,
                lambda_sam: float, k: int) -> tuple[str, float]:
    total = float(np.float64(seg) + np.float64(sgd) + np.float64(lambda_sam) * np.float64(sam))
    row = (f"{iteration},{seg:.17g},{sgd:.17g},{sam:.17g},{total:.17g},{k}")
    return row, total


def train(cfg: TrainConfig) -> TrainResult:
    """Run the full optimization per the config; returns artifact locations.

    Raises NanLossError as soon as any loss component leaves the reals, and
    ValueError if the frozen tensors drift from the bundle at any audit.
    """
    cfg.validate()
    start = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ds = load_dataset(cfg.data_manifest)
    bundle = load_weight_bundle(cfg.clip_bundle)
    split = ds.manifest.split
    n_seen = split.n_seen

    torch.manual_seed(cfg.seed)
    backbone, head = build_models(cfg, bundle)
    expected_fp = head_fingerprint_from_bundle(bundle, norm=cfg.csh_norm)
    if head.frozen_fingerprint() != expected_fp:
        raise ValueError("frozen head tensors do not match the bundle at start")

    encodings = encode_dataset(ds, bundle)
    masks = pseudo_masks_for(ds, encodings, bundle, cfg)
    stride = backbone.stride
    masks_small = [downsample_mask(m.labels, stride) for m in masks]

    a_s = torch.from_numpy(embed_class_names(
        [split.names[c] for c in split.seen_ids], bundle).copy())
    a_u = torch.from_numpy(embed_class_names(
        [split.names[c] for c in split.unseen_ids], bundle).copy())
    cls_tokens = [torch.from_numpy(e.cls_token.copy()) for e in encodings]

    images = torch.from_numpy(
        np.stack(ds.images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()

    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    warmup_iters = round(cfg.warmup_frac * cfg.iterations)
    sched = DecaySchedule(k0=cfg.sgd_k0, rate=cfg.sgd_rate,
                          k_min=cfg.sgd_k_min, mode=cfg.sgd_mode)

    rng_batch = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    rng_gumbel = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    log_path = out_dir / "loss_log.csv"
    log_lines = [LOG_HEADER]
    final_losses = {"seg": 0.0, "sgd": 0.0, "sam": 0.0, "total": 0.0}
    ckpt_path = out_dir / "checkpoint_final.pt"

    def rng_states() -> dict:
        return {"batch": rng_batch.bit_generator.state,
                "gumbel": rng_gumbel.bit_generator.state,
                "torch": torch.get_rng_state()}

    if cfg.iterations == 0:
        # Prime normalization statistics so the checkpoint is evaluable.
        with torch.no_grad():
            fmap = backbone(images[: min(cfg.batch_size, len(ds.images))])
            head(fmap.data, training=True)
        save_checkpoint(ckpt_path, 0, backbone, head, cfg, rng_states(), expected_fp)
        log_path.write_text("\n".join(log_lines) + "\n")
        return TrainResult(out_dir, ckpt_path, log_path, final_losses,
                           time.perf_counter() - start)

    for t in range(cfg.iterations):
        if warmup_iters > 0:
            scale = min(1.0, (t + 1) / warmup_iters)
            for group in opt.param_groups:
                group["lr"] = cfg.lr * scale

        batch_idx = rng_batch.integers(0, len(ds.images), size=cfg.batch_size)
        fmap = backbone(images[torch.from_numpy(batch_idx)])
        trace = head(fmap.data, training=True)
        f_c = trace.f_c
        hw = f_c.shape[1] * f_c.shape[2]
        d_emb = f_c.shape[-1]
        k = decayed_k(t, sched, capacity=hw)

        f_g_rows, c_g_rows = [], []
        seg_terms, sam_terms = [], []
        for b, idx in enumerate(batch_idx.tolist()):
            c_g = cls_tokens[idx]
            flat = f_c[b].reshape(-1, d_emb)
            scores = similarity_scores(f_c[b], c_g).detach()
            sel = gumbel_topk(scores, k, cfg.sgd_tau, rng=rng_gumbel,
                              noise=cfg.sgd_noise)
            _, f_g = aggregate_global(flat[torch.from_numpy(sel)], c_g)
            f_g_rows.append(f_g)
            c_g_rows.append(c_g)

            mask_small = masks_small[idx]
            protos = compute_prototypes(f_c[b], mask_small, n_seen)
            if protos.o_s >= 1:
                sam_terms.append(sam_loss(protos.seen, a_s[protos.seen_ids], c_g,
                                          cfg.sam_tau_f, cfg.sam_tau_c))
            if cfg.mode == "transductive":
                # Classifier tail is A_u itself; latent IDs already index its
                # columns, so only IDs beyond the unseen count need masking.
                classifier = torch.cat([a_s, a_u], dim=0)
                labels = mask_small.copy()
                over = (labels != IGNORE) & (labels >= n_seen + split.n_unseen)
                labels[over] = IGNORE
            else:
                classifier = torch.cat([a_s, protos.latent], dim=0)
                labels = _remap_latent_labels(mask_small, n_seen,
                                              protos.latent_ids, protos.o_u)
            logits = pixel_logits(f_c[b], classifier)
            seg_terms.append(seg_loss(logits, labels, cfg.focal_gamma, cfg.focal_alpha))

        l_seg = torch.stack(seg_terms).mean()
        l_sgd = sgd_loss(torch.stack(f_g_rows), torch.stack(c_g_rows), cfg.sgd_tau)
        l_sam = (torch.stack(sam_terms).mean() if sam_terms
                 else torch.zeros((), dtype=f_c.dtype))
        loss = total_loss(l_seg, l_sgd, l_sam, cfg.lambda_sam)

        parts = {"seg": float(l_seg.detach()), "sgd": float(l_sgd.detach()),
                 "sam": float(l_sam.detach()), "total": float(loss.detach())}
        if not all(np.isfinite(v) for v in parts.values()):
            raise NanLossError(t, parts)

        opt.zero_grad()
        loss.backward()
        opt.step()

        row, logged_total = _format_row(t, parts["seg"], parts["sgd"], parts["sam"],
                                        cfg.lambda_sam, k)
        log_lines.append(row)
        final_losses = {**parts, "total": logged_total}

        if (t + 1) % cfg.checkpoint_every == 0 and (t + 1) < cfg.iterations:
            if head.frozen_fingerprint() != expected_fp:
                raise ValueError(f"frozen tensors drifted by iteration {t}")
            save_checkpoint(out_dir / f"checkpoint_{t + 1:06d}.pt", t + 1,
                            backbone, head, cfg, rng_states(), expected_fp)

    if head.frozen_fingerprint() != expected_fp:
        raise ValueError("frozen tensors drifted during training")
    save_checkpoint(ckpt_path, cfg.iterations, backbone, head, cfg,
                    rng_states(), expected_fp)
    log_path.write_text("\n".join(log_lines) + "\n")
    return TrainResult(out_dir, ckpt_path, log_path, final_losses,
                       time.perf_counter() - start)


def predict_maps(checkpoint: str | Path, dataset_root: str | Path | None = None,
                 bundle_path: str | Path | None = None,
                 gamma: float | None = None) -> tuple[list[np.ndarray], LoadedDataset]:
    """Full-resolution calibrated predictions for every dataset image."""
    payload = load_checkpoint(checkpoint)
    cfg = parse_config(payload["config_text"])
    bundle = load_weight_bundle(bundle_path or cfg.clip_bundle)
    backbone, head, cfg = restore_models(payload, bundle)
    ds = load_dataset(dataset_root or cfg.data_manifest)
    split = ds.manifest.split
    if gamma is None:
        gamma = cfg.infer_gamma

    a_full = embed_class_names(list(split.names), bundle)
    backbone.eval()
    head.eval()
    preds = []
    stride = backbone.stride
    with torch.no_grad():
        for img in ds.images:
            x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)[None]
            trace = head(backbone(x).data, training=False)
            pred = calibrated_inference(trace.f_c[0], a_full, split, gamma)
            preds.append(pred.repeat(stride, axis=0).repeat(stride, axis=1))
    return preds, ds


def evaluate(checkpoint: str | Path, dataset_root: str | Path | None = None,
             bundle_path: str | Path | None = None,
             gamma: float | None = None) -> MetricsReport:
    """Eval-mode metrics over the whole dataset at one calibration value."""
    preds, ds = predict_maps(checkpoint, dataset_root, bundle_path, gamma)
    return compute_metrics(preds, ds.labels_full, ds.manifest.split)
