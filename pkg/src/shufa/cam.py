"""Class activation maps for GAP + linear classifier heads.

The map for class c is the classifier-weight-weighted sum of the final-stage
feature maps, upsampled to the input size and min-max normalized to [0, 1].
Degenerate constant maps (max == min) normalize to all zeros by convention.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image
from torch import Tensor, nn


def cam_from_maps(feature_maps: Tensor, class_weights: Tensor,
                  output_size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Weighted sum of (C, h, w) maps, upsampled to output_size, in [0, 1]."""
    if feature_maps.ndim != 3:
        raise ValueError(f"expected (C, h, w) maps, got shape {tuple(feature_maps.shape)}")
    if class_weights.shape != (feature_maps.shape[0],):
        raise ValueError(
            f"weights shape {tuple(class_weights.shape)} does not match "
            f"{feature_maps.shape[0]} channels"
        )
    raw = (feature_maps * class_weights.view(-1, 1, 1)).sum(dim=0)
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    up = torch.nn.functional.interpolate(
        raw.unsqueeze(0).unsqueeze(0), size=output_size, mode=mode, **kwargs
    )[0, 0]
    lo, hi = float(up.min()), float(up.max())
    if hi <= lo:
        return torch.zeros_like(up)
    return (up - lo) / (hi - lo)


def _head_weights(model: nn.Module, class_index: int) -> Tensor:
    head = getattr(model, "head", None)
    if not isinstance(head, nn.Linear):
        raise ValueError("model has no linear-over-pooled-features head; CAM undefined")
    if not 0 <= class_index < head.out_features:
        raise IndexError(f"class_index {class_index} out of range 0..{head.out_features - 1}")
    return head.weight[class_index].detach()


def compute_cam(image: Tensor, model: nn.Module, class_index: int,
                mode: str = "bilinear") -> Tensor:
    """Heatmap aligned to the (preprocessed) input image, values in [0, 1]."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    model.eval()
    with torch.no_grad():
        maps = model.final_maps(image)[0]
    weights = _head_weights(model, class_index)
    return cam_from_maps(maps, weights, (image.shape[-2], image.shape[-1]), mode)


def compute_probe_cam(image: Tensor, embedder, probe_weight: Tensor, class_index: int,
                      mode: str = "bilinear") -> Tensor:
    """CAM for a linear probe over embeddings.

    probe(embed(x)) is linear over the backbone's pooled final features, so its
    effective class weights are probe_weight[class] @ embedding_head_weight.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    embedder.eval()
    with torch.no_grad():
        x = embedder.attend(image)
        maps = embedder.backbone.final_maps(x)[0]
    effective = probe_weight[class_index] @ embedder.backbone.head.weight
    return cam_from_maps(maps, effective.detach(), (image.shape[-2], image.shape[-1]), mode)


def render_overlay(image: Tensor | np.ndarray, heatmap: Tensor | np.ndarray,
                   out_path, colormap: str = "jet", strength: float = 0.6) -> Path:
    """Blend a grayscale glyph with a color-mapped heatmap and write a PNG.

    Zero heat leaves the glyph untouched, so an all-zero heatmap reproduces the
    (colorized) original. Output bytes are deterministic.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:  # (1, H, W) preprocessed tensor, ink-positive: restore white bg
        img = 1.0 - img[0]
    heat = np.asarray(heatmap, dtype=np.float64)
    if img.shape != heat.shape:
        raise ValueError(f"image {img.shape} and heatmap {heat.shape} must align")
    cmap = colormaps[colormap]
    colored = cmap(heat)[..., :3]
    gray = np.repeat(img[..., None], 3, axis=2)
    alpha = (strength * heat)[..., None]
    blended = (1.0 - alpha) * gray + alpha * colored
    out = np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="RGB").save(out_path)
    return out_path
