"""Spatial-correlation style descriptors.

``style_matrix`` is the spatial transpose of the classical Gram matrix: where
the Gram matrix correlates channels (and forgets position), the style matrix
correlates spatial positions (and forgets channel identity). Entry (i, j) is
the channel-wise dot product between spatial positions i and j of a feature
map, with positions flattened row-major.
"""

from __future__ import annotations

import torch
from torch import Tensor


def _flatten_spatial(fmap: Tensor) -> Tensor:
    """(h, w, c) -> (h*w, c), row-major over spatial positions."""
    if fmap.ndim != 3:
        raise ValueError(f"expected (h, w, c) feature map, got shape {tuple(fmap.shape)}")
    h, w, c = fmap.shape
    return fmap.reshape(h * w, c)


def style_matrix(fmap: Tensor) -> Tensor:
    """(h*w) x (h*w) matrix of dot products between spatial positions.

    Differentiable; no normalization is applied here (scale balancing is the
    loss module's job).
    """
    flat = _flatten_spatial(fmap)
    return flat @ flat.T


def gram_matrix(fmap: Tensor) -> Tensor:
    """c x c channel-correlation matrix (classical style-transfer descriptor)."""
    flat = _flatten_spatial(fmap)
    return flat.T @ flat


def style_matrix_batched(fmaps: Tensor, spatial_scale: bool = False) -> Tensor:
    """Style matrices for a (N, C, H, W) batch; optionally scaled by 1/(H*W)."""
    if fmaps.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) batch, got shape {tuple(fmaps.shape)}")
    n, c, h, w = fmaps.shape
    flat = fmaps.permute(0, 2, 3, 1).reshape(n, h * w, c)
    mats = torch.bmm(flat, flat.transpose(1, 2))
    if spatial_scale:
        mats = mats / (h * w)
    return mats
