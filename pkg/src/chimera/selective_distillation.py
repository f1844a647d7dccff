"""Selective global distillation: score, sample top-K, aggregate, align.

Dense joint-space features are scored against the image's global CLS token,
a K-subset is drawn with Gumbel perturbation (annealed K), the subset is
re-weighted into one global feature, and an InfoNCE loss pulls that feature
toward its own CLS token against the other images in the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DECAY_MODES = ("decrease", "increase", "none")


@dataclass(frozen=True)
class DecaySchedule:
    """Annealing schedule for the selection size K."""

    k0: int = 9000
    rate: float = 0.1
    k_min: int = 1
    mode: str = "decrease"

    def __post_init__(self):
        if self.mode not in DECAY_MODES:
            raise ValueError(f"mode must be one of {DECAY_MODES}, got {self.mode!r}")
        if not self.k0 >= self.k_min >= 1:
            raise ValueError(f"need k0 >= k_min >= 1, got k0={self.k0}, k_min={self.k_min}")
        if self.rate < 0:
            raise ValueError(f"rate must be >= 0, got {self.rate}")


@dataclass
class SelectionResult:
    """K distinct flat positions, their features, and the simplex weights."""

    indices: np.ndarray
    f_k: torch.Tensor
    weights: torch.Tensor


def similarity_scores(f_c, c_g):
    """Scaled dot products of every spatial feature against the global token.

    Args:
        f_c: ... x d_emb dense features (torch or numpy).
        c_g: d_emb global token.

    Returns:
        Flat vector of length prod(leading dims): s_i = <f_i, c_g> / sqrt(d_emb).
    """
    if isinstance(f_c, torch.Tensor):
        c_g = torch.as_tensor(c_g, dtype=f_c.dtype, device=f_c.device)
        d = f_c.shape[-1]
        if c_g.shape != (d,):
            raise ValueError(f"c_g shape {tuple(c_g.shape)} does not match d_emb {d}")
        return f_c.reshape(-1, d) @ c_g / math.sqrt(d)
    f_c = np.asarray(f_c)
    c_g = np.asarray(c_g)
    d = f_c.shape[-1]
    if c_g.shape != (d,):
        raise ValueError(f"c_g shape {c_g.shape} does not match d_emb {d}")
    return f_c.reshape(-1, d) @ c_g / math.sqrt(d)


def gumbel_topk(scores, k: int, tau: float, rng: np.random.Generator | None = None,
                noise: bool = True) -> np.ndarray:
    """Indices of the K largest Gumbel-perturbed temperature-scaled scores.

    With noise on, position i is ranked by s_i/tau + g_i with standard Gumbel
    g_i, so the K-subset is a sample without replacement from
    softmax(S/tau).  With noise off the ranking is a plain top-k of S.
    Ties go to the lower flat index.
    """
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} out of range [1, {s.size}]")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if noise:
        if rng is None:
            raise ValueError("rng is required when noise is on")
        eps = np.clip(rng.random(s.size), 1e-300, 1.0 - 1e-16)
        key = s / tau - np.log(-np.log(eps))
    else:
        key = s
    order = np.argsort(-key, kind="stable")
    return order[:k].astype(np.int64)


def aggregate_global(f_k: torch.Tensor, c_g) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax re-weighting of the selected features into one global vector.

    Returns (w_prime, f_g) with w_prime = softmax(<f_k, c_g>/sqrt(d)) and
    f_g = sum_k w'_k f_k.
    """
    if f_k.ndim != 2 or f_k.shape[0] < 1:
        raise ValueError(f"expected non-empty K x d_emb selection, got {tuple(f_k.shape)}")
    c_g = torch.as_tensor(c_g, dtype=f_k.dtype, device=f_k.device)
    d = f_k.shape[1]
    w_prime = torch.softmax(f_k @ c_g / math.sqrt(d), dim=0)
    f_g = w_prime @ f_k
    return w_prime, f_g


def select_global(f_c: torch.Tensor, c_g, k: int, tau: float,
                  rng: np.random.Generator | None = None,
                  noise: bool = True) -> tuple[SelectionResult, torch.Tensor]:
    """Score, sample K positions, and aggregate them into a global feature."""
    d = f_c.shape[-1]
    flat = f_c.reshape(-1, d)
    s = similarity_scores(f_c, c_g)
    idx = gumbel_topk(s, k, tau, rng=rng, noise=noise)
    f_k = flat[torch.from_numpy(idx)]
    w_prime, f_g = aggregate_global(f_k, c_g)
    return SelectionResult(indices=idx, f_k=f_k, weights=w_prime), f_g


def sgd_loss(f_g_batch: torch.Tensor, c_g_batch: torch.Tensor, tau: float) -> torch.Tensor:
    """Batch InfoNCE between global features and their own CLS tokens.

    Sample i's positive is c_g_i; every other image's CLS token is a
    negative.  Logits are stabilized by subtracting the row max before
    exponentiation.  A batch of one has no negatives and scores exactly 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if f_g_batch.ndim != 2 or c_g_batch.ndim != 2 or f_g_batch.shape != c_g_batch.shape:
        raise ValueError(
            f"batch shape mismatch: {tuple(f_g_batch.shape)} vs {tuple(c_g_batch.shape)}")
    logits = f_g_batch @ c_g_batch.T / tau
    z = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_prob = z.diagonal() - torch.log(torch.exp(z).sum(dim=1))
    return -log_prob.mean()


def decayed_k(iteration: int, sched: DecaySchedule, capacity: int) -> int:
    """Annealed selection size at a given iteration, clamped to the grid."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if sched.mode == "increase":
        k = round(sched.k0 + sched.rate * iteration)
        upper = capacity
    elif sched.mode == "decrease":
        k = round(sched.k0 - sched.rate * iteration)
        upper = min(sched.k0, capacity)
    else:
        k = sched.k0
        upper = min(sched.k0, capacity)
    return max(sched.k_min, min(k, upper))
