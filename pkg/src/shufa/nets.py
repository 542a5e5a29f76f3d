"""Backbone embedder, category network, image preprocessing and checkpoints.

Both networks share one VGG-flavored body: stages of two 3x3 convolutions plus
a stride-2 max-pool, followed by global average pooling and a single linear
head. The linear-over-pooled-features head is a hard requirement: it is what
makes class activation maps computable for every classifier in the toolkit.

Taps are the post-pool activations of selected stages (stage s of an
``input_size`` image has spatial extent ``input_size / 2**s``); they feed the
style-matrix loss.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor, nn


@dataclass
class BackboneConfig:
    input_size: int = 64
    channels: int = 1
    stage_widths: tuple[int, ...] = (16, 32, 64, 64)
    tap_stages: tuple[int, ...] = (2, 3, 4)  # 1-indexed
    embed_dim: int = 128

    def validate(self) -> None:
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not self.stage_widths:
            raise ValueError("need at least one stage")
        n = len(self.stage_widths)
        if self.input_size % (2 ** n) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^{n} stages"
            )
        bad = [s for s in self.tap_stages if not 1 <= s <= n]
        if bad:
            raise ValueError(f"tap_stages {bad} outside valid stage range 1..{n}")
        if list(self.tap_stages) != sorted(set(self.tap_stages)):
            raise ValueError("tap_stages must be strictly increasing")


class ConvNet(nn.Module):
    """Stacked conv stages -> global average pool -> linear head.

    Serves as the triplet backbone (head = embedding), the category network
    (head = 5 logits) and the small VGG-style baseline (head = writer logits).
    """

    def __init__(self, cfg: BackboneConfig, out_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.out_dim = out_dim
        stages = []
        c = cfg.channels
        for width in cfg.stage_widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c, width, kernel_size=3, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(width, width, kernel_size=3, padding=1),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                )
            )
            c = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(c, out_dim)

    def forward(self, x: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
        """Returns (head output, {stage index: tap feature map})."""
        if x.ndim == 3:
            x = x.unsqueeze(0)
        taps: dict[int, Tensor] = {}
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in self.cfg.tap_stages:
                taps[i] = x
        pooled = x.mean(dim=(2, 3))
        return self.head(pooled), taps

    def final_maps(self, x: Tensor) -> Tensor:
        """Last-stage feature maps (pre-pooling), for class activation mapping."""
        if x.ndim == 3:
            x = x.unsqueeze(0)
        for stage in self.stages:
            x = stage(x)
        return x


def make_backbone(cfg: BackboneConfig) -> ConvNet:
    return ConvNet(cfg, out_dim=cfg.embed_dim)


def make_ccnet(cfg: BackboneConfig) -> ConvNet:
    """5-way script-category classifier with the same tapped body."""
    return ConvNet(cfg, out_dim=5)


def forward_embed(image: Tensor, backbone: ConvNet) -> tuple[Tensor, dict[int, Tensor]]:
    return backbone(image)


def ccnet_forward(image: Tensor, model: ConvNet) -> tuple[Tensor, dict[int, Tensor]]:
    if model.out_dim != 5:
        raise ValueError(f"category network must have 5 outputs, got {model.out_dim}")
    return model(image)


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over all parameter bytes; order follows state_dict."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def preprocess(path: str | os.PathLike, input_size: int = 64) -> Tensor:
    """File -> (1, S, S) float tensor, ink-positive.

    Pads to square with white, resizes to ``input_size``, scales to [0, 1],
    then inverts so ink is approximately 1 and background 0.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            w, h = img.size
            if w == 0 or h == 0:
                raise ValueError(f"zero-size image: {path}")
            if w != h:
                side = max(w, h)
                padded = Image.new("L", (side, side), 255)
                padded.paste(img, ((side - w) // 2, (side - h) // 2))
                img = padded
            if img.size != (input_size, input_size):
                img = img.resize((input_size, input_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(1.0 - arr).unsqueeze(0)


def preprocess_batch(paths, input_size: int = 64) -> Tensor:
    return torch.stack([preprocess(p, input_size) for p in paths])


def save_checkpoint(
    path: str | os.PathLike,
    *,
    backbone_cfg: BackboneConfig,
    seed: int,
    step: int,
    state: dict,
    extra_meta: dict | None = None,
) -> None:
    """Binary parameter blob (torch.save) + JSON sidecar with the config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    meta = {
        "backbone": {
            "input_size": backbone_cfg.input_size,
            "channels": backbone_cfg.channels,
            "stage_widths": list(backbone_cfg.stage_widths),
            "tap_stages": list(backbone_cfg.tap_stages),
            "embed_dim": backbone_cfg.embed_dim,
        },
        "seed": seed,
        "step": step,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike, expected_cfg: BackboneConfig | None = None):
    """Load (state, meta, cfg); validates against expected_cfg when given."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if not sidecar.is_file():
        raise FileNotFoundError(f"checkpoint sidecar not found: {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = BackboneConfig(
        input_size=meta["backbone"]["input_size"],
        channels=meta["backbone"]["channels"],
        stage_widths=tuple(meta["backbone"]["stage_widths"]),
        tap_stages=tuple(meta["backbone"]["tap_stages"]),
        embed_dim=meta["backbone"]["embed_dim"],
    )
    if expected_cfg is not None and cfg != expected_cfg:
        raise ValueError(
            f"checkpoint config mismatch: checkpoint has {cfg}, expected {expected_cfg}"
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    return state, meta, cfg
