"""Nine-palace spatial attention.

An image is tiled into a 3x3 grid (the traditional practice grid for Chinese
characters); a small convolutional head predicts one non-negative weight per
block, normalized so the mean weight is 1, and the image is reweighted
block-wise. With a zero-initialized final layer the module is the identity,
so enabling it never perturbs training at step 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class PalacePartition:
    """Pixel bounds of the 3x3 grid: 4 increasing indices per axis."""

    row_bounds: tuple[int, int, int, int]
    col_bounds: tuple[int, int, int, int]

    def block_sizes(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        rb, cb = self.row_bounds, self.col_bounds
        return (
            (rb[1] - rb[0], rb[2] - rb[1], rb[3] - rb[2]),
            (cb[1] - cb[0], cb[2] - cb[1], cb[3] - cb[2]),
        )


def nine_palace_partition(height: int, width: int) -> PalacePartition:
    """Tile (height, width) into 3x3 near-equal blocks, boundary i at round(i*H/3).

    i*H/3 is never an exact half-integer for integral H, so round() is
    unambiguous. Requires height, width >= 3 so every block is non-empty.
    """
    if height < 3 or width < 3:
        raise ValueError(f"image must be at least 3x3, got {height}x{width}")
    rows = tuple(round(i * height / 3) for i in range(4))
    cols = tuple(round(i * width / 3) for i in range(4))
    return PalacePartition(row_bounds=rows, col_bounds=cols)


def apply_attention(image: Tensor, weights: Tensor) -> Tensor:
    """Multiply each 3x3 block of the image by its weight.

    ``image`` is (..., H, W); ``weights`` is (9,) or (N, 9) row-major over the
    grid, with (N, 9) requiring a matching leading batch dim on the image.
    Differentiable with respect to both arguments.
    """
    if weights.shape[-1] != 9:
        raise ValueError(f"weight vector must have length 9, got {weights.shape[-1]}")
    h, w = image.shape[-2], image.shape[-1]
    part = nine_palace_partition(h, w)
    (rh, ch) = part.block_sizes()
    grid = weights.reshape(*weights.shape[:-1], 3, 3)
    row_rep = torch.tensor(rh, device=image.device)
    col_rep = torch.tensor(ch, device=image.device)
    wmap = torch.repeat_interleave(grid, row_rep, dim=-2)
    wmap = torch.repeat_interleave(wmap, col_rep, dim=-1)
    if weights.ndim == 2:  # (N, 9) against (N, ..., H, W)
        wmap = wmap.reshape(weights.shape[0], *([1] * (image.ndim - 3)), h, w)
    return image * wmap


class PalaceAttentionHead(nn.Module):
    """Conv stack -> global average pool -> 9 block weights.

    Weights are softmax(logits) * 9: positive, mean exactly 1, and uniform
    (all ones) when the final layer is zero-initialized.
    """

    def __init__(self, in_channels: int = 1, stage_widths: tuple[int, ...] = (8, 16, 32)):
        super().__init__()
        layers: list[nn.Module] = []
        c = in_channels
        for width in stage_widths:
            layers.append(nn.Conv2d(c, width, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            c = width
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(c, 9)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, image: Tensor) -> Tensor:
        squeeze = image.ndim == 3
        if squeeze:
            image = image.unsqueeze(0)
        feats = self.body(image).mean(dim=(2, 3))
        weights = torch.softmax(self.fc(feats), dim=-1) * 9.0
        return weights.squeeze(0) if squeeze else weights


class PalaceAttention(nn.Module):
    """Full module: predict block weights from the image, reweight the image."""

    def __init__(self, in_channels: int = 1, stage_widths: tuple[int, ...] = (8, 16, 32)):
        super().__init__()
        self.head = PalaceAttentionHead(in_channels, stage_widths)

    def forward(self, image: Tensor) -> Tensor:
        return apply_attention(image, self.head(image))
