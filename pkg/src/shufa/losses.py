"""Triplet distances, hinge, style loss over layer taps, and the combined loss.

The combined objective is alpha * style_loss + beta * embedding_triplet_loss.
The style term applies a triplet hinge to style matrices computed at every
configured tap layer of both the embedding backbone and the frozen category
network, each matrix pre-scaled by 1/(h*w) so early large-extent layers do not
dominate the layer sum.

The hinge form max(0, d+ - d- + margin) is the default; an absolute-value
variant |d+ - d- + margin| is available for A/B comparison but penalizes
over-separated triplets, so it is not recommended.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from shufa.style import style_matrix_batched

HINGE_VARIANTS = ("hinge", "absolute")


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    margin_embed: float = 200.0
    margin_style: float = 200.0
    layer_weights: dict[int, float] = field(default_factory=dict)  # default 1 per tap
    hinge_variant: str = "hinge"

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("at least one of alpha, beta must be positive")
        if self.margin_embed <= 0 or self.margin_style <= 0:
            raise ValueError("margins must be positive")
        if any(w < 0 for w in self.layer_weights.values()):
            raise ValueError("layer weights must be non-negative")
        if self.hinge_variant not in HINGE_VARIANTS:
            raise ValueError(f"hinge_variant must be one of {HINGE_VARIANTS}")

    def weight_for(self, layer: int) -> float:
        return self.layer_weights.get(layer, 1.0)


def pair_distance(u: Tensor, v: Tensor) -> Tensor:
    """Euclidean (Frobenius) norm of u - v."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return torch.linalg.vector_norm(u - v)


def _batch_pair_distance(u: Tensor, v: Tensor) -> Tensor:
    """Per-sample Frobenius distance over all non-batch dims."""
    return (u - v).flatten(1).norm(dim=1)


def triplet_hinge(d_plus: Tensor | float, d_minus: Tensor | float, margin: float,
                  variant: str = "hinge") -> Tensor:
    """max(0, d+ - d- + margin), or |d+ - d- + margin| for the absolute variant."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    if not isinstance(d_plus, Tensor):
        d_plus = torch.as_tensor(d_plus, dtype=torch.float64)
    if not isinstance(d_minus, Tensor):
        d_minus = torch.as_tensor(d_minus, dtype=torch.float64)
    arg = d_plus - d_minus + margin
    if variant == "hinge":
        return torch.clamp(arg, min=0)
    if variant == "absolute":
        return torch.abs(arg)
    raise ValueError(f"unknown hinge variant {variant!r}")


def _taps_style_loss(branch_taps, cfg: LossConfig) -> Tensor | float:
    """One source's layer sum: hinge over 1/(h*w)-scaled style matrices.

    ``branch_taps`` is the (positive, anchor, negative) triple of tap dicts,
    each mapping layer index -> (N, C, H, W) feature batch.
    """
    pos, anchor, neg = branch_taps
    if pos.keys() != anchor.keys() or anchor.keys() != neg.keys():
        raise ValueError(
            f"tap layers differ across branches: {sorted(pos)} / {sorted(anchor)} / {sorted(neg)}"
        )
    total: Tensor | float = 0.0
    for layer in sorted(anchor.keys()):
        weight = cfg.weight_for(layer)
        if weight == 0.0:
            continue
        mats = [style_matrix_batched(t[layer], spatial_scale=True) for t in (pos, anchor, neg)]
        d_plus = _batch_pair_distance(mats[0], mats[1])
        d_minus = _batch_pair_distance(mats[2], mats[1])
        total = total + weight * triplet_hinge(
            d_plus, d_minus, cfg.margin_style, cfg.hinge_variant
        ).mean()
    return total


def style_loss(backbone_taps, ccnet_taps, cfg: LossConfig) -> Tensor:
    """Sum of per-layer style-matrix triplet hinges over both tap sources.

    Each argument is a (positive, anchor, negative) triple of {layer: (N,C,H,W)}
    dicts. Per-triplet hinges are averaged over the batch, then summed over
    layers and over the two sources.
    """
    cfg.validate()
    total = _taps_style_loss(backbone_taps, cfg) + _taps_style_loss(ccnet_taps, cfg)
    if not isinstance(total, Tensor):
        total = torch.as_tensor(total, dtype=torch.float64)
    return total


def embedding_triplet_loss(e_pos: Tensor, e_anchor: Tensor, e_neg: Tensor,
                           cfg: LossConfig) -> Tensor:
    """Triplet hinge on raw (unnormalized) embedding vectors, batch-averaged."""
    if e_pos.ndim == 1:
        e_pos, e_anchor, e_neg = (t.unsqueeze(0) for t in (e_pos, e_anchor, e_neg))
    d_plus = _batch_pair_distance(e_pos, e_anchor)
    d_minus = _batch_pair_distance(e_neg, e_anchor)
    return triplet_hinge(d_plus, d_minus, cfg.margin_embed, cfg.hinge_variant).mean()


def shufa_loss(style: Tensor | float, embed_triplet: Tensor | float,
               cfg: LossConfig) -> Tensor:
    """alpha * style + beta * embedding triplet."""
    cfg.validate()
    if not isinstance(style, Tensor):
        style = torch.as_tensor(style, dtype=torch.float64)
    if not isinstance(embed_triplet, Tensor):
        embed_triplet = torch.as_tensor(embed_triplet, dtype=torch.float64)
    return cfg.alpha * style + cfg.beta * embed_triplet
