"""Token selection, pooling, projection and the training losses.

All tensor functions are plain torch so autograd supplies gradients; the
index-set helpers are pure Python/numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, TruncationError


@dataclass(frozen=True)
class PatchIndexSet:
    indices: tuple[int, ...]
    grid: tuple[int, int]
    fallback: bool = False

    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid[0] * self.grid[1], dtype=bool)
        m[list(self.indices)] = True
        return m


@dataclass(frozen=True)
class TokenIndexSet:
    indices: tuple[int, ...]


@dataclass
class LossWeights:
    global_: float = 1.0
    local: float = 0.5
    tsl: float = 1.0
    temperature: float = 0.07  # initial value of the learnable temperature

    def __post_init__(self):
        for name in ("global_", "local", "tsl"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("temperature must be positive")


# --- index sets -----------------------------------------------------------------


def select_patch_indices(bbox, image_size: int, patch_size: int, rule: str = "center") -> PatchIndexSet:
    """Patch cells belonging to `bbox` on the row-major patch grid.

    ``rule="center"`` keeps cells whose center lies in the half-open box;
    ``rule="overlap"`` keeps any cell with positive-area overlap. An empty
    selection falls back to the cell containing the box center.
    """
    g = image_size // patch_size
    x1, y1, x2, y2 = bbox
    picked = []
    for r in range(g):
        for c in range(g):
            if rule == "center":
                cx, cy = c * patch_size + patch_size / 2, r * patch_size + patch_size / 2
                inside = x1 <= cx < x2 and y1 <= cy < y2
            elif rule == "overlap":
                inside = (
                    min(x2, (c + 1) * patch_size) > max(x1, c * patch_size)
                    and min(y2, (r + 1) * patch_size) > max(y1, r * patch_size)
                )
            else:
                raise ValueError(f"unknown patch rule {rule!r}")
            if inside:
                picked.append(r * g + c)
    if picked:
        return PatchIndexSet(tuple(picked), (g, g))
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    c = min(int(cx // patch_size), g - 1)
    r = min(int(cy // patch_size), g - 1)
    return PatchIndexSet((r * g + c,), (g, g), fallback=True)


def select_token_indices(span: tuple[int, int], tokenization) -> TokenIndexSet:
    """Sequence positions whose source characters intersect ``[start, end)``."""
    start, end = span
    if not 0 <= start < end <= tokenization.text_length:
        raise ValueError(f"span {span} outside caption of length {tokenization.text_length}")
    picked = tuple(
        t for t, s in enumerate(tokenization.spans) if s is not None and s[0] < end and start < s[1]
    )
    if not picked:
        if tokenization.truncated:
            raise TruncationError(f"span {span} lies beyond the truncation point")
        raise ValueError(f"span {span} covers no word tokens")
    return TokenIndexSet(picked)


# --- pooling and projection ---------------------------------------------------------


def pool_mean(tokens: torch.Tensor, index_set) -> torch.Tensor:
    idx = list(getattr(index_set, "indices", index_set))
    if not idx:
        raise ValueError("cannot pool over an empty index set")
    return tokens[idx].mean(dim=0)


def pool_masked(tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched mean pooling: tokens (B, T, d), mask (B, T) of 0/1."""
    mask = mask.to(tokens.dtype)
    counts = mask.sum(dim=1, keepdim=True)
    if (counts == 0).any():
        raise ValueError("empty pooling mask")
    return (mask.unsqueeze(-1) * tokens).sum(dim=1) / counts


class Projection(nn.Module):
    """Learned projection into the shared space: affine, or a two-layer MLP."""

    def __init__(self, dim: int, hidden_layers: int = 0):
        super().__init__()
        if hidden_layers == 0:
            self.net = nn.Linear(dim, dim)
        elif hidden_layers == 1:
            self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        else:
            raise ValueError("hidden_layers must be 0 or 1")

    def reset_identity(self):
        layers = [self.net] if isinstance(self.net, nn.Linear) else [m for m in self.net if isinstance(m, nn.Linear)]
        for lin in layers[-1:]:
            with torch.no_grad():
                lin.weight.copy_(torch.eye(lin.weight.shape[0], dtype=lin.weight.dtype))
                lin.bias.zero_()

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.net(v)


def project(v: torch.Tensor, head: Projection) -> torch.Tensor:
    return head(v)


# --- similarities and losses ---------------------------------------------------------


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericError("zero-norm row in similarity input")
    return x / norms


def cosine_sim_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _normalize(a) @ _normalize(b).T


def contrastive_loss(v_cls: torch.Tensor, t_cls: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities scaled by 1/temperature."""
    if float(torch.as_tensor(temperature).detach()) <= 0:
        raise ValueError("temperature must be positive")
    logits = cosine_sim_matrix(v_cls, t_cls) / temperature
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def similarity_mse(pred: torch.Tensor, target: torch.Tensor, reduction: str = "full") -> torch.Tensor:
    sim = cosine_sim_matrix(pred, target)
    eye = torch.eye(sim.shape[0], dtype=sim.dtype, device=sim.device)
    if reduction == "full":
        return ((sim - eye) ** 2).mean()
    if reduction == "diagonal":
        return ((sim.diagonal() - 1.0) ** 2).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def tsl_loss(
    p_hat: torch.Tensor,
    v_cls: torch.Tensor,
    s_hat: torch.Tensor,
    t_cls: torch.Tensor,
    reduction: str = "full",
    stop_grad: bool = True,
) -> torch.Tensor:
    """Identity-target similarity MSE for region tokens and sentence tokens.

    With ``stop_grad`` the class-token targets are treated as constants.
    """
    if stop_grad:
        v_cls, t_cls = v_cls.detach(), t_cls.detach()
    return similarity_mse(p_hat, v_cls, reduction) + similarity_mse(s_hat, t_cls, reduction)


# --- total loss ----------------------------------------------------------------------


@dataclass
class LocalSlot:
    """One matched pair per record: the k-th selected pair under top-k matching."""

    v_cls: torch.Tensor  # local crop class embeddings (n, d)
    t_cls: torch.Tensor  # local sentence class embeddings (n, d)
    p_hat: torch.Tensor  # projected pooled patch tokens (n, d)
    s_hat: torch.Tensor  # projected pooled sequence tokens (n, d)
    weights: torch.Tensor  # per-record pair weight (n,)


@dataclass
class BatchOutputs:
    v_global: torch.Tensor
    t_global: torch.Tensor
    slots: list[LocalSlot] = field(default_factory=list)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    global_: float
    local: float
    tsl: float
    weights: LossWeights

    def as_dict(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "global": self.global_,
            "local": self.local,
            "tsl": self.tsl,
            "lambda_global": self.weights.global_,
            "lambda_local": self.weights.local,
            "lambda_tsl": self.weights.tsl,
        }


def _slot_sum(slots: Sequence[LocalSlot], fn) -> torch.Tensor:
    # Each slot is weighted by the mean pair weight it carries across the batch.
    terms = [slot.weights.mean() * fn(slot) for slot in slots]
    return torch.stack(terms).sum()


def total_loss(
    out: BatchOutputs,
    weights: LossWeights,
    temperature,
    tsl_reduction: str = "full",
    stop_grad: bool = True,
) -> LossBreakdown:
    """Weighted sum of global contrastive, local contrastive and TSL terms.

    Terms with a zero weight are evaluated for reporting only and never enter
    the autograd graph, so zeroing a weight is the same as deleting the term.
    """
    def global_term():
        return contrastive_loss(out.v_global, out.t_global, temperature)

    def local_term():
        return _slot_sum(out.slots, lambda s: contrastive_loss(s.v_cls, s.t_cls, temperature))

    def tsl_term():
        return _slot_sum(
            out.slots, lambda s: tsl_loss(s.p_hat, s.v_cls, s.s_hat, s.t_cls, tsl_reduction, stop_grad)
        )

    parts = []
    raw = {}
    for name, lam, fn in (
        ("global", weights.global_, global_term),
        ("local", weights.local, local_term),
        ("tsl", weights.tsl, tsl_term),
    ):
        if name != "global" and not out.slots:
            raw[name] = float("nan")
            continue
        if lam != 0:
            value = fn()
            parts.append(lam * value)
            raw[name] = float(value.detach())
        else:
            with torch.no_grad():
                raw[name] = float(fn())
    if parts:
        total = parts[0]
        for p in parts[1:]:
            total = total + p
    else:
        total = torch.zeros((), dtype=out.v_global.dtype)
    return LossBreakdown(total=total, global_=raw["global"], local=raw["local"], tsl=raw["tsl"], weights=weights)
