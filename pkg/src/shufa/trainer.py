"""Training loops: category-network pretraining and triplet metric training.

Triplet training is reproducible by construction: the whole triplet sequence is
pre-generated from the seed, batch t is slice t of that sequence, and the
learning rate is a pure function of the step, so resuming from a checkpoint at
any step replays exactly the batches and learning rates of an uninterrupted
run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from shufa.attention import PalaceAttention
from shufa.corpus import DatasetManifest, GlyphRecord, sample_triplets
from shufa.losses import LossConfig, embedding_triplet_loss, shufa_loss, style_loss
from shufa.nets import (
    BackboneConfig,
    ConvNet,
    freeze,
    load_checkpoint,
    make_backbone,
    preprocess,
    save_checkpoint,
)
from shufa.seeding import derive_int, derive_rng


@dataclass
class TrainConfig:
    batch_triplets: int = 32
    total_batches: int = 2000
    lr_init: float = 1e-4
    lr_adjust_every: int = 200
    lr_decay: float = 0.9
    seed: int | None = None  # falls back to the run-level seed
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    optimizer: str = "sgd"
    momentum: float = 0.9

    def validate(self) -> None:
        if self.batch_triplets < 1:
            raise ValueError("batch_triplets must be >= 1")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lr_adjust_every < 1:
            raise ValueError("lr_adjust_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        self.loss.validate()


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Geometric decay: lr_init * lr_decay ** floor(step / lr_adjust_every)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr_init * cfg.lr_decay ** (step // cfg.lr_adjust_every)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_total: float
    loss_style: float
    loss_triplet: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    accuracy: float


class TrainLog:
    """Per-step and per-epoch records with finite/monotonicity checks."""

    def __init__(self) -> None:
        self.steps: list[StepRecord] = []
        self.epochs: list[EpochRecord] = []

    def add_step(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError(f"steps must strictly increase, got {rec.step}")
        for name in ("loss_total", "loss_style", "loss_triplet"):
            if not math.isfinite(getattr(rec, name)):
                raise ValueError(f"non-finite {name} at step {rec.step}")
        self.steps.append(rec)

    def add_epoch(self, rec: EpochRecord) -> None:
        if self.epochs and rec.epoch <= self.epochs[-1].epoch:
            raise ValueError(f"epochs must strictly increase, got {rec.epoch}")
        if not (math.isfinite(rec.train_loss) and math.isfinite(rec.valid_loss)):
            raise ValueError(f"non-finite loss at epoch {rec.epoch}")
        self.epochs.append(rec)

    def write_step_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,lr,loss_total,loss_style,loss_triplet\n")
            for r in self.steps:
                fh.write(
                    f"{r.step},{r.lr:.10g},{r.loss_total:.10g},"
                    f"{r.loss_style:.10g},{r.loss_triplet:.10g}\n"
                )

    def write_epoch_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,valid_loss,accuracy\n")
            for r in self.epochs:
                fh.write(
                    f"{r.epoch},{r.train_loss:.10g},{r.valid_loss:.10g},{r.accuracy:.10g}\n"
                )


class ImageCache:
    """Preprocessed-image cache keyed by path (the corpus fits in memory)."""

    def __init__(self, input_size: int):
        self.input_size = input_size
        self._store: dict[str, Tensor] = {}

    def get(self, record: GlyphRecord) -> Tensor:
        key = str(record.image_path)
        if key not in self._store:
            self._store[key] = preprocess(record.image_path, self.input_size)
        return self._store[key]

    def batch(self, records: Sequence[GlyphRecord]) -> Tensor:
        return torch.stack([self.get(r) for r in records])


def _category_label(rec: GlyphRecord) -> str:
    return rec.category


def hold_out_validation(records: Sequence[GlyphRecord], seed: int,
                        fraction: float = 0.2) -> tuple[list[GlyphRecord], list[GlyphRecord]]:
    """Seeded (train, valid) split; validation gets round(fraction * n) records."""
    rng = derive_rng(seed, "validation-split")
    order = rng.permutation(len(records))
    n_valid = int(round(fraction * len(records)))
    valid_idx = set(order[:n_valid].tolist())
    train = [records[i] for i in range(len(records)) if i not in valid_idx]
    valid = [records[i] for i in range(len(records)) if i in valid_idx]
    return train, valid


def train_classifier(
    records: Sequence[GlyphRecord],
    label_of: Callable[[GlyphRecord], str],
    model_factory: Callable[[int], nn.Module],
    *,
    epochs: int,
    seed: int,
    input_size: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    valid_fraction: float = 0.2,
    classes: Sequence[str] | None = None,
) -> tuple[nn.Module, TrainLog, list[str]]:
    """Cross-entropy training with a 20% held-out validation split.

    Shared by the category network and the end-to-end baselines. Returns the
    trained model, the per-epoch log and the ordered class-name list. Adam is
    used for all classifier-style trainings; it reaches good accuracy within
    the 20-epoch budget without per-task learning-rate tuning.
    """
    records = list(records)
    if not records:
        raise ValueError("empty training set")
    present = {label_of(r) for r in records}
    if classes is None:
        classes = sorted(present)
    else:
        classes = list(classes)
        unknown = present - set(classes)
        if unknown:
            raise ValueError(f"labels outside the class list: {sorted(unknown)}")
    if len(present) < 2:
        raise ValueError(f"need at least 2 classes in the data, got {sorted(present)}")
    class_index = {c: i for i, c in enumerate(classes)}

    train_recs, valid_recs = hold_out_validation(records, seed, valid_fraction)
    cache = ImageCache(input_size)
    x_train = cache.batch(train_recs)
    y_train = torch.tensor([class_index[label_of(r)] for r in train_recs])
    x_valid = cache.batch(valid_recs) if valid_recs else None
    y_valid = (
        torch.tensor([class_index[label_of(r)] for r in valid_recs]) if valid_recs else None
    )

    torch.manual_seed(derive_int(seed, "classifier-init"))
    model = model_factory(len(classes))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    criterion = nn.CrossEntropyLoss()
    log = TrainLog()

    for epoch in range(1, epochs + 1):
        model.train()
        order = derive_rng(seed, "epoch-order", epoch).permutation(len(train_recs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            logits = _logits(model, x_train[idx])
            loss = criterion(logits, y_train[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        model.eval()
        if x_valid is not None:
            with torch.no_grad():
                logits = _logits(model, x_valid)
                valid_loss = float(criterion(logits, y_valid))
                accuracy = float((logits.argmax(dim=1) == y_valid).float().mean())
        else:
            valid_loss, accuracy = 0.0, 0.0
        log.add_epoch(
            EpochRecord(
                epoch=epoch,
                train_loss=sum(losses) / len(losses),
                valid_loss=valid_loss,
                accuracy=accuracy,
            )
        )
    model.eval()
    return model, log, classes


def _logits(model: nn.Module, x: Tensor) -> Tensor:
    out = model(x)
    return out[0] if isinstance(out, tuple) else out


def train_ccnet(
    s2: DatasetManifest | Sequence[GlyphRecord],
    epochs: int = 20,
    seed: int = 0,
    backbone_cfg: BackboneConfig | None = None,
    lr: float = 1e-3,
) -> tuple[ConvNet, TrainLog]:
    """Pretrain the 5-way script-category network on the s2 split.

    Labels index the fixed category list, so the head keeps 5 logits even when
    a category is absent from s2.
    """
    from shufa.corpus import CATEGORIES

    cfg = backbone_cfg or BackboneConfig()
    records = list(s2)
    categories = {r.category for r in records}
    if len(categories) < 2:
        raise ValueError(f"category training needs >= 2 categories, got {sorted(categories)}")
    model, log, _ = train_classifier(
        records,
        _category_label,
        lambda n: ConvNet(cfg, out_dim=5),
        epochs=epochs,
        seed=seed,
        input_size=cfg.input_size,
        lr=lr,
        classes=list(CATEGORIES),
    )
    return model, log


@dataclass
class ShufaNetBundle:
    """Trained embedder: backbone plus optional nine-palace attention."""

    backbone: ConvNet
    attention: PalaceAttention | None
    cfg: BackboneConfig

    def eval(self) -> "ShufaNetBundle":
        self.backbone.eval()
        if self.attention is not None:
            self.attention.eval()
        return self

    def attend(self, images: Tensor) -> Tensor:
        if self.attention is None:
            return images
        return self.attention(images)

    def embed(self, images: Tensor, chunk: int = 256) -> Tensor:
        """Evaluation-mode embeddings for a (N, C, H, W) batch."""
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, images.shape[0], chunk):
                x = self.attend(images[start : start + chunk])
                emb, _ = self.backbone(x)
                outs.append(emb)
        return torch.cat(outs)

    def trainable_parameters(self):
        params = list(self.backbone.parameters())
        if self.attention is not None:
            params += list(self.attention.parameters())
        return params


def save_bundle(path, bundle: ShufaNetBundle, *, seed: int, step: int,
                optimizer: torch.optim.Optimizer | None = None) -> None:
    state = {
        "backbone": bundle.backbone.state_dict(),
        "attention": bundle.attention.state_dict() if bundle.attention else None,
        "step": step,
    }
    if optimizer is not None:
        state["optimizer"] = optimizer.state_dict()
    save_checkpoint(
        path,
        backbone_cfg=bundle.cfg,
        seed=seed,
        step=step,
        state=state,
        extra_meta={"sa_enabled": bundle.attention is not None, "kind": "shufanet"},
    )


def load_bundle(path, expected_cfg: BackboneConfig | None = None):
    """Returns (bundle, state, meta). ``state`` keeps the optimizer for resume."""
    state, meta, cfg = load_checkpoint(path, expected_cfg)
    backbone = make_backbone(cfg)
    backbone.load_state_dict(state["backbone"])
    attention = None
    if state.get("attention") is not None:
        attention = PalaceAttention(in_channels=cfg.channels)
        attention.load_state_dict(state["attention"])
    bundle = ShufaNetBundle(backbone=backbone, attention=attention, cfg=cfg).eval()
    return bundle, state, meta


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr_init)
    return torch.optim.SGD(params, lr=cfg.lr_init, momentum=cfg.momentum)


def train_shufanet(
    s1: DatasetManifest | Sequence[GlyphRecord],
    ccnet: ConvNet,
    sa_enabled: bool,
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig | None = None,
    seed: int | None = None,
    checkpoint_dir=None,
    resume_from=None,
) -> tuple[ShufaNetBundle, TrainLog]:
    """Train the triplet embedder against the frozen category network.

    Per step: draw the step's triplet batch, optionally reweight all three
    branches with the shared attention module, run the shared backbone and the
    frozen category network collecting taps, and take one optimizer step on
    alpha * style loss + beta * embedding triplet loss at the scheduled rate.
    """
    cfg.validate()
    bcfg = backbone_cfg or BackboneConfig()
    run_seed = cfg.seed if cfg.seed is not None else (seed if seed is not None else 0)

    freeze(ccnet)
    records = list(s1)
    triplets = sample_triplets(
        records, count=cfg.total_batches * cfg.batch_triplets, seed=derive_int(run_seed, "triplet-stream")
    )
    cache = ImageCache(bcfg.input_size)
    for rec in records:
        cache.get(rec)

    torch.manual_seed(derive_int(run_seed, "shufanet-init"))
    backbone = make_backbone(bcfg)
    attention = PalaceAttention(in_channels=bcfg.channels) if sa_enabled else None
    bundle = ShufaNetBundle(backbone=backbone, attention=attention, cfg=bcfg)
    optimizer = _make_optimizer(bundle.trainable_parameters(), cfg)

    start_step = 0
    if resume_from is not None:
        resumed, state, meta = load_bundle(resume_from, expected_cfg=bcfg)
        if bool(meta.get("sa_enabled")) != sa_enabled:
            raise ValueError("checkpoint SA setting does not match sa_enabled")
        bundle = resumed
        optimizer = _make_optimizer(bundle.trainable_parameters(), cfg)
        if "optimizer" in state:
            optimizer.load_state_dict(state["optimizer"])
        start_step = int(state["step"])

    log = TrainLog()
    b = cfg.batch_triplets
    for step in range(start_step, cfg.total_batches):
        batch = triplets[step * b : (step + 1) * b]
        x = torch.cat(
            [
                cache.batch([t.positive for t in batch]),
                cache.batch([t.anchor for t in batch]),
                cache.batch([t.negative for t in batch]),
            ]
        )
        bundle.backbone.train()
        if bundle.attention is not None:
            bundle.attention.train()
            x = bundle.attention(x)
            _, ccnet_taps = ccnet(x)  # grad flows back through the input to SA
        else:
            with torch.no_grad():
                _, ccnet_taps = ccnet(x)
        embeddings, backbone_taps = bundle.backbone(x)

        def split3(t: Tensor) -> tuple[Tensor, Tensor, Tensor]:
            return t[:b], t[b : 2 * b], t[2 * b :]

        def split_taps(taps: dict[int, Tensor]):
            pos, anc, neg = {}, {}, {}
            for k, v in taps.items():
                pos[k], anc[k], neg[k] = split3(v)
            return pos, anc, neg

        l_style = style_loss(split_taps(backbone_taps), split_taps(ccnet_taps), cfg.loss)
        e_pos, e_anchor, e_neg = split3(embeddings)
        l_triplet = embedding_triplet_loss(e_pos, e_anchor, e_neg, cfg.loss)
        total = shufa_loss(l_style, l_triplet, cfg.loss)
        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite loss at step {step}")

        lr = lr_at(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        log.add_step(
            StepRecord(
                step=step,
                lr=lr,
                loss_total=float(total),
                loss_style=float(l_style),
                loss_triplet=float(l_triplet),
            )
        )
        done = step + 1
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_every > 0
            and (done % cfg.checkpoint_every == 0 or done == cfg.total_batches)
        ):
            save_bundle(
                Path(checkpoint_dir) / f"step-{done:06d}.pt",
                bundle,
                seed=run_seed,
                step=done,
                optimizer=optimizer,
            )
    bundle.eval()
    return bundle, log
