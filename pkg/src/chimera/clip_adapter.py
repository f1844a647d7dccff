"""Frozen vision-language weight bundle and the miniature visual encoder.

The bundle directory holds a ``manifest.json`` plus one raw little-endian
float32 file per tensor (row-major).  All matrices are stored in the
right-multiply convention: a map from x to y is computed as ``x @ W + b``.

The real text encoder is out of scope; class text embeddings ship inside
the bundle as data.  ``make_mini_clip`` synthesizes a deterministic bundle
small enough for offline tests: a patch embedding, two pre-norm transformer
blocks, a final layer norm and a linear projection into the joint space.
The value/FFN sub-block weights exposed to the semantic head are extracted
from the final transformer block (value path composed with the attention
output projection).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class BundleError(Exception):
    """Raised when a weight bundle is missing, malformed, or corrupted."""


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(x.dtype.type(2.0))))


def layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + bias


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class VEncoderWeights:
    """Value-projection + FFN sub-block of a frozen transformer block.

    Query/key attention is deliberately absent: only the value path and the
    feed-forward branch survive, each wrapped by its layer norm.
    """

    ln1_scale: np.ndarray
    ln1_bias: np.ndarray
    value_weight: np.ndarray  # d_vis x d_vis, applied as x @ W
    value_bias: np.ndarray
    ln2_scale: np.ndarray
    ln2_bias: np.ndarray
    ffn_w1: np.ndarray  # d_vis x (4*d_vis)
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray  # (4*d_vis) x d_vis
    ffn_b2: np.ndarray

    def validate(self, d_vis: int) -> None:
        expect = {
            "ln1_scale": (d_vis,),
            "ln1_bias": (d_vis,),
            "value_weight": (d_vis, d_vis),
            "value_bias": (d_vis,),
            "ln2_scale": (d_vis,),
            "ln2_bias": (d_vis,),
            "ffn_w1": (d_vis, 4 * d_vis),
            "ffn_b1": (4 * d_vis,),
            "ffn_w2": (4 * d_vis, d_vis),
            "ffn_b2": (d_vis,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise BundleError(f"vencoder.{name}: expected shape {shape}, got {got}")


@dataclass(frozen=True)
class MiniBlockWeights:
    ln1_scale: np.ndarray
    ln1_bias: np.ndarray
    q_weight: np.ndarray
    q_bias: np.ndarray
    k_weight: np.ndarray
    k_bias: np.ndarray
    v_weight: np.ndarray
    v_bias: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray
    ln2_scale: np.ndarray
    ln2_bias: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass(frozen=True)
class MiniEncoderWeights:
    patch_embed_weight: np.ndarray  # (3*ps*ps) x d_vis
    patch_embed_bias: np.ndarray
    cls_token: np.ndarray  # d_vis
    blocks: tuple[MiniBlockWeights, ...]
    ln_final_scale: np.ndarray
    ln_final_bias: np.ndarray


@dataclass(frozen=True)
class ClipImageOutputs:
    """Projected CLS token plus per-patch tokens, both in the joint space."""

    cls_token: np.ndarray  # d_emb
    patch_tokens: np.ndarray  # P x d_emb


@dataclass(frozen=True)
class ClipWeightBundle:
    d_vis: int
    d_emb: int
    patch_size: int
    n_heads: int
    class_names: tuple[str, ...]
    vencoder: VEncoderWeights
    visual_projection_weight: np.ndarray  # d_vis x d_emb
    visual_projection_bias: np.ndarray  # d_emb
    text_embeddings: np.ndarray  # N x d_emb, rows unit-norm
    mini: MiniEncoderWeights
    manifest: dict = field(repr=False)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) list, the serialization and digest order."""
        items: list[tuple[str, np.ndarray]] = []
        for name in ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
                     "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            items.append((f"vencoder.{name}", getattr(self.vencoder, name)))
        items.append(("visual_projection.weight", self.visual_projection_weight))
        items.append(("visual_projection.bias", self.visual_projection_bias))
        items.append(("text_embeddings", self.text_embeddings))
        items.append(("mini.patch_embed.weight", self.mini.patch_embed_weight))
        items.append(("mini.patch_embed.bias", self.mini.patch_embed_bias))
        items.append(("mini.cls_token", self.mini.cls_token))
        for i, blk in enumerate(self.mini.blocks):
            for name in ("ln1_scale", "ln1_bias", "q_weight", "q_bias", "k_weight", "k_bias",
                         "v_weight", "v_bias", "out_weight", "out_bias",
                         "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                items.append((f"mini.blocks.{i}.{name}", getattr(blk, name)))
        items.append(("mini.ln_final.scale", self.mini.ln_final_scale))
        items.append(("mini.ln_final.bias", self.mini.ln_final_bias))
        return items

    def validate(self) -> None:
        self.vencoder.validate(self.d_vis)
        if self.visual_projection_weight.shape != (self.d_vis, self.d_emb):
            raise BundleError(
                f"visual_projection.weight: expected {(self.d_vis, self.d_emb)}, "
                f"got {self.visual_projection_weight.shape}")
        if self.visual_projection_bias.shape != (self.d_emb,):
            raise BundleError("visual_projection.bias: wrong shape")
        n = len(self.class_names)
        if self.text_embeddings.shape != (n, self.d_emb):
            raise BundleError(
                f"text_embeddings: expected {(n, self.d_emb)}, got {self.text_embeddings.shape}")
        norms = np.linalg.norm(self.text_embeddings.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-6):
            raise BundleError("text_embeddings: rows are not unit-norm within 1e-6")
        for name, arr in self.tensors():
            if not np.all(np.isfinite(arr)):
                raise BundleError(f"{name}: contains non-finite values")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Semi-orthogonal matrix: orthonormal columns if rows >= cols, else rows."""
    big, small = max(rows, cols), min(rows, cols)
    g = rng.normal(size=(big, small))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def make_mini_clip(seed: int, d_vis: int = 32, d_emb: int = 16, patch_size: int = 8,
                   class_names: list[str] | tuple[str, ...] = (), n_heads: int = 4,
                   n_blocks: int = 2) -> ClipWeightBundle:
    """Deterministically synthesize a miniature frozen weight bundle.

    Projections are orthogonal-initialized, biases zero, layer-norm scales
    one.  Text embeddings are seeded Gaussian rows, L2-normalized.  The
    value/FFN sub-block handed to the semantic head is extracted from the
    final transformer block, with the value path composed through the
    attention output projection.
    """
    if d_vis < 4 or d_emb < 2:
        raise ValueError(f"dimensions too small: d_vis={d_vis}, d_emb={d_emb}")
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if d_vis % n_heads != 0:
        raise ValueError(f"n_heads={n_heads} must divide d_vis={d_vis}")
    if not class_names:
        raise ValueError("class_names must be non-empty")
    rng = np.random.default_rng(seed)

    ones = lambda k: np.ones(k, dtype=np.float32)
    zeros = lambda k: np.zeros(k, dtype=np.float32)

    def block() -> MiniBlockWeights:
        return MiniBlockWeights(
            ln1_scale=_freeze(ones(d_vis)), ln1_bias=_freeze(zeros(d_vis)),
            q_weight=_freeze(_orthogonal(rng, d_vis, d_vis)), q_bias=_freeze(zeros(d_vis)),
            k_weight=_freeze(_orthogonal(rng, d_vis, d_vis)), k_bias=_freeze(zeros(d_vis)),
            v_weight=_freeze(_orthogonal(rng, d_vis, d_vis)), v_bias=_freeze(zeros(d_vis)),
            out_weight=_freeze(_orthogonal(rng, d_vis, d_vis)), out_bias=_freeze(zeros(d_vis)),
            ln2_scale=_freeze(ones(d_vis)), ln2_bias=_freeze(zeros(d_vis)),
            ffn_w1=_freeze(_orthogonal(rng, d_vis, 4 * d_vis)), ffn_b1=_freeze(zeros(4 * d_vis)),
            ffn_w2=_freeze(_orthogonal(rng, 4 * d_vis, d_vis)), ffn_b2=_freeze(zeros(d_vis)),
        )

    mini = MiniEncoderWeights(
        patch_embed_weight=_freeze(_orthogonal(rng, 3 * patch_size * patch_size, d_vis)),
        patch_embed_bias=_freeze(zeros(d_vis)),
        cls_token=_freeze(rng.normal(size=d_vis).astype(np.float32)),
        blocks=tuple(block() for _ in range(n_blocks)),
        ln_final_scale=_freeze(ones(d_vis)),
        ln_final_bias=_freeze(zeros(d_vis)),
    )

    last = mini.blocks[-1]
    # Value path through the attention out-projection: x @ Wv @ Wout.
    value_w = last.v_weight.astype(np.float64) @ last.out_weight.astype(np.float64)
    value_b = last.v_bias.astype(np.float64) @ last.out_weight.astype(np.float64) + last.out_bias
    vencoder = VEncoderWeights(
        ln1_scale=last.ln1_scale, ln1_bias=last.ln1_bias,
        value_weight=_freeze(value_w), value_bias=_freeze(value_b),
        ln2_scale=last.ln2_scale, ln2_bias=last.ln2_bias,
        ffn_w1=last.ffn_w1, ffn_b1=last.ffn_b1, ffn_w2=last.ffn_w2, ffn_b2=last.ffn_b2,
    )

    text = rng.normal(size=(len(class_names), d_emb))
    text = text / np.linalg.norm(text, axis=1, keepdims=True)

    bundle = ClipWeightBundle(
        d_vis=d_vis, d_emb=d_emb, patch_size=patch_size, n_heads=n_heads,
        class_names=tuple(class_names),
        vencoder=vencoder,
        visual_projection_weight=_freeze(_orthogonal(rng, d_vis, d_emb)),
        visual_projection_bias=_freeze(zeros(d_emb)),
        text_embeddings=_freeze(text),
        mini=mini,
        manifest={},
    )
    bundle = _with_manifest(bundle)
    bundle.validate()
    return bundle


def _with_manifest(bundle: ClipWeightBundle) -> ClipWeightBundle:
    tensors = [
        {"name": name, "dtype": "float32", "shape": list(arr.shape),
         "checksum": hashlib.sha256(arr.tobytes()).hexdigest()}
        for name, arr in bundle.tensors()
    ]
    manifest = {
        "format_version": FORMAT_VERSION,
        "d_vis": bundle.d_vis,
        "d_emb": bundle.d_emb,
        "patch_size": bundle.patch_size,
        "n_heads": bundle.n_heads,
        "n_blocks": len(bundle.mini.blocks),
        "class_names": list(bundle.class_names),
        "tensors": tensors,
    }
    return ClipWeightBundle(**{**bundle.__dict__, "manifest": manifest})


def save_weight_bundle(bundle: ClipWeightBundle, path: str | Path) -> Path:
    """Write manifest.json plus one little-endian float32 .bin per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    bundle = _with_manifest(bundle)
    for name, arr in bundle.tensors():
        (path / f"{name}.bin").write_bytes(arr.astype("<f4").tobytes())
    manifest_text = json.dumps(bundle.manifest, indent=2, sort_keys=True)
    (path / MANIFEST_NAME).write_text(manifest_text + "\n")
    return path


def load_weight_bundle(path: str | Path) -> ClipWeightBundle:
    """Load and fully verify a bundle directory (shapes, checksums, norms)."""
    path = Path(path)
    manifest_file = path / MANIFEST_NAME
    if not manifest_file.is_file():
        raise BundleError(f"no {MANIFEST_NAME} in {path}")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"unsupported format_version {manifest.get('format_version')}")

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if entry["dtype"] != "float32":
            raise BundleError(f"{name}: unsupported dtype {entry['dtype']}")
        tensor_file = path / f"{name}.bin"
        if not tensor_file.is_file():
            raise BundleError(f"{name}: tensor file missing from bundle directory")
        raw = tensor_file.read_bytes()
        shape = tuple(entry["shape"])
        expected_bytes = int(np.prod(shape, dtype=np.int64)) * 4
        if len(raw) != expected_bytes:
            raise BundleError(
                f"{name}: shape mismatch, manifest says {shape} "
                f"({expected_bytes} bytes) but file has {len(raw)} bytes")
        if hashlib.sha256(raw).hexdigest() != entry["checksum"]:
            raise BundleError(f"{name}: checksum failure")
        arrays[name] = _freeze(np.frombuffer(raw, dtype="<f4").reshape(shape))

    def take(name: str) -> np.ndarray:
        if name not in arrays:
            raise BundleError(f"{name}: tensor absent from manifest")
        return arrays.pop(name)

    vencoder = VEncoderWeights(**{
        f: take(f"vencoder.{f}")
        for f in ("ln1_scale", "ln1_bias", "value_weight", "value_bias",
                  "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")})
    proj_w = take("visual_projection.weight")
    proj_b = take("visual_projection.bias")
    text = take("text_embeddings")
    blocks = []
    for i in range(manifest["n_blocks"]):
        blocks.append(MiniBlockWeights(**{
            f: take(f"mini.blocks.{i}.{f}")
            for f in ("ln1_scale", "ln1_bias", "q_weight", "q_bias", "k_weight", "k_bias",
                      "v_weight", "v_bias", "out_weight", "out_bias",
                      "ln2_scale", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")}))
    mini = MiniEncoderWeights(
        patch_embed_weight=take("mini.patch_embed.weight"),
        patch_embed_bias=take("mini.patch_embed.bias"),
        cls_token=take("mini.cls_token"),
        blocks=tuple(blocks),
        ln_final_scale=take("mini.ln_final.scale"),
        ln_final_bias=take("mini.ln_final.bias"),
    )
    if arrays:
        raise BundleError(f"unexpected tensors in manifest: {sorted(arrays)}")

    bundle = ClipWeightBundle(
        d_vis=manifest["d_vis"], d_emb=manifest["d_emb"],
        patch_size=manifest["patch_size"], n_heads=manifest["n_heads"],
        class_names=tuple(manifest["class_names"]),
        vencoder=vencoder, visual_projection_weight=proj_w, visual_projection_bias=proj_b,
        text_embeddings=text, mini=mini, manifest=manifest,
    )
    bundle.validate()
    return bundle


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """H x W x 3 -> (gh*gw) x (ps*ps*3), patches row-major, pixels row-major."""
    h, w, c = image.shape
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 2, 1, 3, 4)  # gh, gw, ps, ps, c
    return x.reshape(gh * gw, patch_size * patch_size * c)


def encode_image_trace(image: np.ndarray, bundle: ClipWeightBundle,
                       dtype: np.dtype = np.float32) -> dict[str, np.ndarray]:
    """Token matrices after each encoder stage, keyed by stage name.

    Keys: "embed", "block0", "block1", ..., "ln_final", "projected"; each
    value is (1 + P) x width with the CLS token in row 0.
    """
    image = np.asarray(image, dtype=dtype)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    h, w, _ = image.shape
    ps = bundle.patch_size
    if h % ps != 0 or w % ps != 0:
        raise ValueError(f"image sides {h}x{w} not divisible by patch_size {ps}")

    mini = bundle.mini
    cast = lambda a: a.astype(dtype)
    x = patchify(image, ps) @ cast(mini.patch_embed_weight) + cast(mini.patch_embed_bias)
    tokens = np.concatenate([cast(mini.cls_token)[None, :], x], axis=0)  # (1+P) x d_vis
    trace = {"embed": tokens}

    n_heads = bundle.n_heads
    head_dim = bundle.d_vis // n_heads
    for bi, blk in enumerate(mini.blocks):
        h_in = layer_norm(tokens, cast(blk.ln1_scale), cast(blk.ln1_bias))
        q = h_in @ cast(blk.q_weight) + cast(blk.q_bias)
        k = h_in @ cast(blk.k_weight) + cast(blk.k_bias)
        v = h_in @ cast(blk.v_weight) + cast(blk.v_bias)
        t = tokens.shape[0]
        q = q.reshape(t, n_heads, head_dim).transpose(1, 0, 2)
        k = k.reshape(t, n_heads, head_dim).transpose(1, 0, 2)
        v = v.reshape(t, n_heads, head_dim).transpose(1, 0, 2)
        attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dtype(head_dim)), axis=-1)
        y = (attn @ v).transpose(1, 0, 2).reshape(t, bundle.d_vis)
        tokens = tokens + (y @ cast(blk.out_weight) + cast(blk.out_bias))
        h_in = layer_norm(tokens, cast(blk.ln2_scale), cast(blk.ln2_bias))
        tokens = tokens + (gelu(h_in @ cast(blk.ffn_w1) + cast(blk.ffn_b1)) @ cast(blk.ffn_w2)
                           + cast(blk.ffn_b2))
        trace[f"block{bi}"] = tokens

    tokens = layer_norm(tokens, cast(mini.ln_final_scale), cast(mini.ln_final_bias))
    trace["ln_final"] = tokens
    projected = tokens @ cast(bundle.visual_projection_weight) + cast(bundle.visual_projection_bias)
    trace["projected"] = projected
    return trace


def encode_image(image: np.ndarray, bundle: ClipWeightBundle,
                 dtype: np.dtype = np.float32) -> ClipImageOutputs:
    """Run the miniature visual encoder: CLS plus per-patch joint embeddings.

    Pure function of (image, bundle); no positional embeddings, so any image
    whose sides divide by the patch size is accepted.
    """
    projected = encode_image_trace(image, bundle, dtype)["projected"]
    return ClipImageOutputs(cls_token=projected[0], patch_tokens=projected[1:])


def embed_class_names(names: list[str] | tuple[str, ...],
                      bundle: ClipWeightBundle) -> np.ndarray:
    """Rows of the bundle's text embeddings, in the requested order."""
    index = {name: i for i, name in enumerate(bundle.class_names)}
    rows = []
    for name in names:
        if name not in index:
            raise ValueError(f"unknown class name {name!r}")
        rows.append(bundle.text_embeddings[index[name]])
    return np.stack(rows, axis=0)


def frozen_fingerprint(tensors) -> str:
    """Order-independent sha256 digest over named frozen tensors.

    Accepts a ClipWeightBundle or any iterable of (name, float array).
    Arrays are hashed as little-endian float32 bytes, so the digest is
    stable across processes and matches the on-disk representation.
    """
    if isinstance(tensors, ClipWeightBundle):
        tensors = tensors.tensors()
    digest = hashlib.sha256()
    for name, arr in sorted(tensors, key=lambda kv: kv[0]):
        arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()
