"""Semantic head: trainable projection into a frozen vision-language sub-block.

Dense backbone features are lifted to the encoder width by a trainable MLP,
passed through a frozen value+FFN transformer sub-block (query/key attention
discarded, so positions never mix), renormalized by a trainable batch norm,
added back to the projection residually, and mapped into the joint embedding
space by the frozen visual projection.  Only the MLP and the normalization
affine parameters receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import DenseFeatureMap
from .clip_adapter import ClipWeightBundle, VEncoderWeights, frozen_fingerprint

NORM_CHOICES = ("bn", "gn", "ln-frozen", "ln-learn", "none")
LN_EPS = 1e-5


@dataclass
class CSHTrace:
    """Every intermediate of the head's forward chain, channel last.

    All fields are B x H' x W' x d_vis except f_c, which is B x H' x W' x d_emb.
    f_res = f_p + f_bn holds exactly.
    """

    f_p: torch.Tensor
    f_v_prime: torch.Tensor
    f_v: torch.Tensor
    f_bn: torch.Tensor
    f_res: torch.Tensor
    f_c: torch.Tensor


class BatchNorm(nn.Module):
    """Channel-last batch norm over all batch and spatial positions.

    Train mode normalizes with biased batch statistics and, unless disabled,
    folds the batch mean and unbiased variance into the running estimates
    with the given momentum.  Eval mode uses the running estimates and
    refuses to run before any batch has ever been observed.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    def forward(self, x: torch.Tensor, training: bool,
                update_running: bool = True) -> torch.Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(
                f"channel mismatch: got {x.shape[-1]}, expected {self.weight.shape[0]}")
        if training:
            flat = x.reshape(-1, x.shape[-1])
            n = flat.shape[0]
            mean = flat.mean(dim=0)
            var = flat.var(dim=0, unbiased=False)
            if update_running:
                unbiased = var * (n / (n - 1)) if n > 1 else var
                with torch.no_grad():
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(mean.detach(), alpha=m)
                    self.running_var.mul_(1 - m).add_(unbiased.detach(), alpha=m)
                    self.num_batches_tracked += 1
        else:
            if int(self.num_batches_tracked) == 0:
                raise RuntimeError(
                    "eval-mode batch norm requested before any running statistics exist")
            mean = self.running_mean
            var = self.running_var
        x_hat = (x - mean) / torch.sqrt(var + self.eps)
        return x_hat * self.weight + self.bias


def _as_tensor_weights(w, like: torch.Tensor) -> dict[str, torch.Tensor]:
    fields = ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
              "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")
    out = {}
    for f in fields:
        t = getattr(w, f)
        if isinstance(t, np.ndarray):
            t = torch.from_numpy(np.ascontiguousarray(t))
        out[f] = t.to(dtype=like.dtype, device=like.device)
    return out


def vencoder_forward(f_p: torch.Tensor, w) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen value+FFN sub-block applied independently per position.

    Args:
        f_p: ... x d_vis features (any leading shape).
        w: VEncoderWeights or any object with the same tensor attributes.

    Returns:
        (f_v_prime, f_v) where f_v_prime = Value(LN1(x)) + x and
        f_v = FFN(LN2(f_v_prime)) + f_v_prime.
    """
    t = _as_tensor_weights(w, f_p)
    d = f_p.shape[-1]
    if t["value_weight"].shape[0] != d:
        raise ValueError(
            f"feature width {d} does not match value projection {tuple(t['value_weight'].shape)}")
    h = F.layer_norm(f_p, (d,), t["ln1_scale"], t["ln1_bias"], LN_EPS)
    f_v_prime = h @ t["value_weight"] + t["value_bias"] + f_p
    h = F.layer_norm(f_v_prime, (d,), t["ln2_scale"], t["ln2_bias"], LN_EPS)
    f_v = F.gelu(h @ t["ffn_w1"] + t["ffn_b1"]) @ t["ffn_w2"] + t["ffn_b2"] + f_v_prime
    return f_v_prime, f_v


class SemanticHead(nn.Module):
    """Trainable MLP + frozen sub-block + normalization + frozen projection.

    Frozen bundle tensors are registered as buffers (copies of the bundle's
    arrays), so the optimizer can never see them and their fingerprint can
    be audited against the bundle at any point during training.
    """

    def __init__(self, in_channels: int, bundle: ClipWeightBundle,
                 norm: str = "bn", n_blocks: int = 1, gn_groups: int = 8):
        super().__init__()
        if norm not in NORM_CHOICES:
            raise ValueError(f"norm must be one of {NORM_CHOICES}, got {norm!r}")
        if not 0 <= n_blocks <= 3:
            raise ValueError(f"n_blocks must be in [0, 3], got {n_blocks}")
        d_vis, d_emb = bundle.d_vis, bundle.d_emb
        self.d_vis, self.d_emb = d_vis, d_emb
        self.norm_kind = norm
        self.n_blocks = n_blocks

        self.proj_mlp = nn.Sequential(
            nn.Linear(in_channels, d_vis), nn.GELU(), nn.Linear(d_vis, d_vis))

        buf = lambda a: torch.from_numpy(np.array(a, dtype=np.float32))
        for field in ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
                      "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            self.register_buffer(f"venc_{field}", buf(getattr(bundle.vencoder, field)))
        self.register_buffer("proj_weight", buf(bundle.visual_projection_weight))
        self.register_buffer("proj_bias", buf(bundle.visual_projection_bias))

        if norm == "bn":
            self.norm = BatchNorm(d_vis)
        elif norm == "gn":
            if d_vis % gn_groups != 0:
                raise ValueError(f"gn_groups={gn_groups} must divide d_vis={d_vis}")
            self.norm = nn.GroupNorm(gn_groups, d_vis)
        elif norm == "ln-learn":
            self.norm = nn.LayerNorm(d_vis)
        elif norm == "ln-frozen":
            self.norm = None
            self.register_buffer("ln_frozen_scale", buf(bundle.mini.ln_final_scale))
            self.register_buffer("ln_frozen_bias", buf(bundle.mini.ln_final_bias))
        else:
            self.norm = None

    class _VencView:
        def __init__(self, head: "SemanticHead"):
            for f in ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
                      "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                setattr(self, f, getattr(head, f"venc_{f}"))

    def _apply_norm(self, f_v: torch.Tensor, training: bool,
                    update_running: bool) -> torch.Tensor:
        if self.norm_kind == "bn":
            return self.norm(f_v, training=training, update_running=update_running)
        if self.norm_kind == "gn":
            b, h, w, c = f_v.shape
            x = f_v.permute(0, 3, 1, 2)
            return self.norm(x).permute(0, 2, 3, 1)
        if self.norm_kind == "ln-learn":
            return self.norm(f_v)
        if self.norm_kind == "ln-frozen":
            return F.layer_norm(f_v, (self.d_vis,),
                                self.ln_frozen_scale, self.ln_frozen_bias, LN_EPS)
        return f_v

    def forward(self, features: torch.Tensor | DenseFeatureMap,
                training: bool | None = None, update_running: bool = True) -> CSHTrace:
        """Full head chain on a B x H' x W' x C feature map.

        `training` selects batch vs running statistics for the norm stage
        (defaults to the module's train/eval flag); `update_running=False`
        uses batch statistics without mutating the running estimates.
        """
        if isinstance(features, DenseFeatureMap):
            features = features.data
        if features.ndim != 4:
            raise ValueError(f"expected B x H x W x C features, got {tuple(features.shape)}")
        if training is None:
            training = self.training

        f_p = self.proj_mlp(features)
        f_v_prime, f_v = f_p, f_p
        venc = SemanticHead._VencView(self)
        for _ in range(self.n_blocks):
            f_v_prime, f_v = vencoder_forward(f_v, venc)
        f_bn = self._apply_norm(f_v, training, update_running)
        f_res = f_p + f_bn
        f_c = f_res @ self.proj_weight + self.proj_bias
        return CSHTrace(f_p=f_p, f_v_prime=f_v_prime, f_v=f_v, f_bn=f_bn,
                        f_res=f_res, f_c=f_c)

    def frozen_tensor_items(self) -> list[tuple[str, np.ndarray]]:
        """Frozen buffers under their bundle tensor names, as float32 arrays."""
        names = {f"venc_{f}": f"vencoder.{f}"
                 for f in ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
                           "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")}
        names["proj_weight"] = "visual_projection.weight"
        names["proj_bias"] = "visual_projection.bias"
        if self.norm_kind == "ln-frozen":
            names["ln_frozen_scale"] = "mini.ln_final.scale"
            names["ln_frozen_bias"] = "mini.ln_final.bias"
        items = []
        for attr, public in names.items():
            t = getattr(self, attr)
            items.append((public, t.detach().cpu().to(torch.float32).numpy()))
        return items

    def frozen_fingerprint(self) -> str:
        return frozen_fingerprint(self.frozen_tensor_items())


def head_fingerprint_from_bundle(bundle: ClipWeightBundle, norm: str = "bn") -> str:
    """Digest of exactly the bundle tensors a SemanticHead holds frozen."""
    wanted = {f"vencoder.{f}"
              for f in ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
                        "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")}
    wanted |= {"visual_projection.weight", "visual_projection.bias"}
    if norm == "ln-frozen":
        wanted |= {"mini.ln_final.scale", "mini.ln_final.bias"}
    return frozen_fingerprint([(n, a) for n, a in bundle.tensors() if n in wanted])


def csh_forward(f: DenseFeatureMap | torch.Tensor, head: SemanticHead,
                training: bool = False) -> CSHTrace:
    """Single-map convenience wrapper: H' x W' x C in, unbatched trace out."""
    data = f.data if isinstance(f, DenseFeatureMap) else f
    if data.ndim != 3:
        raise ValueError(f"expected H x W x C map, got {tuple(data.shape)}")
    trace = head(data[None], training=training)
    return CSHTrace(**{k: v[0] for k, v in trace.__dict__.items()})
