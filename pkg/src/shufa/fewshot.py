"""N-way K-shot episodic evaluation, end-to-end baselines and confusion matrices.

An episode freezes the embedder, takes K support samples per held-out writer
class, trains a linear probe on the support embeddings for a fixed number of
epochs, and scores it on every remaining sample of those classes. Support and
query sets are disjoint by record id in every episode.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from shufa.corpus import DatasetManifest, GlyphRecord
from shufa.nets import BackboneConfig, ConvNet
from shufa.seeding import derive_int, derive_rng
from shufa.trainer import ImageCache, ShufaNetBundle, TrainLog, train_classifier

BASELINE_ARCHS = ("vgg_small", "resnet_small_A", "resnet_small_B")


@dataclass
class EpisodeSpec:
    ways: int = 10
    shots: tuple[int, ...] = (5, 10, 20)
    probe_epochs: int = 20
    n_episodes: int = 5
    seed: int | None = None

    def validate(self) -> None:
        if self.ways < 2:
            raise ValueError("ways must be >= 2")
        if any(s < 1 for s in self.shots):
            raise ValueError("shots must be >= 1")
        if self.probe_epochs < 1 or self.n_episodes < 1:
            raise ValueError("probe_epochs and n_episodes must be >= 1")


@dataclass
class ShotResult:
    shots: int
    mean: float
    std: float
    episode_accuracies: list[float]


@dataclass
class EpisodeReport:
    model_id: str
    ways: int
    results: list[ShotResult] = field(default_factory=list)

    def write_episode_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("model,ways,shots,episode,accuracy\n")
            for res in self.results:
                for i, acc in enumerate(res.episode_accuracies):
                    fh.write(f"{self.model_id},{self.ways},{res.shots},{i},{acc:.10g}\n")

    def write_summary_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("model,shots,mean,std\n")
            for res in self.results:
                fh.write(f"{self.model_id},{res.shots},{res.mean:.10g},{res.std:.10g}\n")


class _Standardize(nn.Module):
    """Affine standardization fitted on the support set, folded into the probe.

    Embeddings are unnormalized (large margins require unbounded norms), so the
    probe standardizes per-dimension before its linear layer; the composition
    is still a single affine classifier.
    """

    def __init__(self, mean: Tensor, std: Tensor):
        super().__init__()
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std


class LinearProbe(nn.Module):
    def __init__(self, mean: Tensor, std: Tensor, dim: int, ways: int):
        super().__init__()
        self.standardize = _Standardize(mean, std)
        self.linear = nn.Linear(dim, ways)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(self.standardize(x))


def train_probe(
    support: Tensor,
    labels: Tensor,
    ways: int,
    epochs: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 1e-2,
) -> LinearProbe:
    """Cross-entropy training of the linear probe on frozen embeddings."""
    mean = support.mean(dim=0)
    std = support.std(dim=0)
    if float(std.max()) < 1e-12:
        warnings.warn("degenerate support embeddings: all identical", RuntimeWarning)
    std = torch.clamp(std, min=1e-6)
    torch.manual_seed(derive_int(seed, "probe-init"))
    probe = LinearProbe(mean, std, support.shape[1], ways)
    optimizer = torch.optim.Adam(probe.parameters(), lr=lr)
    criterion = nn.CrossEntropyLoss()
    n = support.shape[0]
    for epoch in range(1, epochs + 1):
        order = derive_rng(seed, "probe-epoch", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            loss = criterion(probe(support[idx]), labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    probe.eval()
    return probe


def _embeddings_by_class(
    s_query: DatasetManifest | Sequence[GlyphRecord],
    embedder: ShufaNetBundle,
    cache: ImageCache | None = None,
) -> tuple[dict[str, list[int]], Tensor, list[GlyphRecord]]:
    records = list(s_query)
    cache = cache or ImageCache(embedder.cfg.input_size)
    embeddings = embedder.embed(cache.batch(records))
    by_class: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.writer_id, []).append(i)
    return by_class, embeddings, records


def run_episode(
    s_query: DatasetManifest | Sequence[GlyphRecord],
    embedder: ShufaNetBundle,
    spec: EpisodeSpec,
    episode_seed: int,
    shots: int | None = None,
    _precomputed=None,
) -> float:
    """One N-way K-shot episode; returns query accuracy in [0, 1]."""
    spec.validate()
    k = shots if shots is not None else spec.shots[0]
    if _precomputed is None:
        by_class, embeddings, _ = _embeddings_by_class(s_query, embedder)
    else:
        by_class, embeddings = _precomputed
    eligible = sorted(c for c, idx in by_class.items() if len(idx) > k)
    if len(eligible) < spec.ways:
        raise ValueError(
            f"need {spec.ways} classes with more than {k} samples, found {len(eligible)}"
        )
    rng = derive_rng(episode_seed, "episode")
    chosen = sorted(rng.choice(eligible, size=spec.ways, replace=False).tolist())

    support_idx: list[int] = []
    support_lbl: list[int] = []
    query_idx: list[int] = []
    query_lbl: list[int] = []
    for label, cls in enumerate(chosen):
        idx = np.array(by_class[cls])
        picked = rng.choice(len(idx), size=k, replace=False)
        mask = np.zeros(len(idx), dtype=bool)
        mask[picked] = True
        support_idx += idx[mask].tolist()
        support_lbl += [label] * k
        query_idx += idx[~mask].tolist()
        query_lbl += [label] * int((~mask).sum())
    assert not set(support_idx) & set(query_idx)

    probe = train_probe(
        embeddings[support_idx],
        torch.tensor(support_lbl),
        ways=spec.ways,
        epochs=spec.probe_epochs,
        seed=derive_int(episode_seed, "probe"),
    )
    with torch.no_grad():
        pred = probe(embeddings[query_idx]).argmax(dim=1)
    return float((pred == torch.tensor(query_lbl)).float().mean())


def shot_sweep(
    s_query: DatasetManifest | Sequence[GlyphRecord],
    embedder: ShufaNetBundle,
    shots_list: Sequence[int],
    spec: EpisodeSpec,
    model_id: str = "shufanet",
) -> EpisodeReport:
    """Mean and std of episode accuracy for each shot count."""
    spec.validate()
    seed = spec.seed if spec.seed is not None else 0
    pre = _embeddings_by_class(s_query, embedder)[:2]
    report = EpisodeReport(model_id=model_id, ways=spec.ways)
    for shots in shots_list:
        accs = [
            run_episode(
                s_query,
                embedder,
                spec,
                episode_seed=derive_int(seed, "episode", shots, i),
                shots=shots,
                _precomputed=pre,
            )
            for i in range(spec.n_episodes)
        ]
        arr = np.asarray(accs)
        report.results.append(
            ShotResult(
                shots=shots,
                mean=float(arr.mean()),
                std=float(arr.std(ddof=0)),
                episode_accuracies=accs,
            )
        )
    return report


class SmallResNet(nn.Module):
    """Compact residual classifier; depth distinguishes the A and B variants.

    Keeps the GAP + linear head required for class activation mapping.
    """

    def __init__(self, widths: tuple[int, ...], blocks_per_stage: int,
                 num_classes: int, in_channels: int = 1):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1), nn.ReLU(inplace=True)
        )
        stages = []
        c = widths[0]
        for width in widths:
            stages.append(_ResStage(c, width, blocks_per_stage))
            c = width
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(c, num_classes)

    def final_maps(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        return self.stages(self.stem(x))

    def forward(self, x: Tensor) -> Tensor:
        maps = self.final_maps(x)
        return self.head(maps.mean(dim=(2, 3)))


class _ResStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, blocks: int):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c_out, c_out, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(c_out, c_out, 3, padding=1),
            )
            for _ in range(blocks)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = torch.relu(self.down(x))
        for block in self.blocks:
            x = torch.relu(x + block(x))
        return x


def make_baseline(arch: str, num_classes: int, cfg: BackboneConfig | None = None) -> nn.Module:
    cfg = cfg or BackboneConfig()
    if arch == "vgg_small":
        return ConvNet(cfg, out_dim=num_classes)
    if arch == "resnet_small_A":
        return SmallResNet((16, 32, 64), blocks_per_stage=1, num_classes=num_classes,
                           in_channels=cfg.channels)
    if arch == "resnet_small_B":
        return SmallResNet((16, 32, 64), blocks_per_stage=2, num_classes=num_classes,
                           in_channels=cfg.channels)
    raise ValueError(f"unknown baseline arch {arch!r}; choose from {BASELINE_ARCHS}")


def train_baseline(
    manifest: DatasetManifest | Sequence[GlyphRecord],
    arch: str = "vgg_small",
    epochs: int = 20,
    seed: int = 0,
    cfg: BackboneConfig | None = None,
) -> tuple[nn.Module, TrainLog, list[str], float]:
    """End-to-end writer classification over every writer class (not episodic)."""
    cfg = cfg or BackboneConfig()
    records = list(manifest)
    if not records:
        raise ValueError("empty manifest")
    model, log, classes = train_classifier(
        records,
        lambda r: r.writer_id,
        lambda n: make_baseline(arch, n, cfg),
        epochs=epochs,
        seed=seed,
        input_size=cfg.input_size,
    )
    accuracy = log.epochs[-1].accuracy if log.epochs else 0.0
    return model, log, classes, accuracy


def confusion_matrix(
    model: nn.Module,
    eval_records: Sequence[GlyphRecord],
    classes: Sequence[str],
    label_of,
    input_size: int = 64,
) -> np.ndarray:
    """K x K count matrix: entry (i, j) = true class i predicted as j."""
    class_index = {c: i for i, c in enumerate(classes)}
    for rec in eval_records:
        if label_of(rec) not in class_index:
            raise ValueError(f"label {label_of(rec)!r} outside model classes")
    cache = ImageCache(input_size)
    x = cache.batch(list(eval_records))
    model.eval()
    with torch.no_grad():
        out = model(x)
        logits = out[0] if isinstance(out, tuple) else out
        pred = logits.argmax(dim=1).tolist()
    mat = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for rec, p in zip(eval_records, pred):
        mat[class_index[label_of(rec)], p] += 1
    return mat


def write_confusion_csv(mat: np.ndarray, classes: Sequence[str], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("true\\pred," + ",".join(classes) + "\n")
        for name, row in zip(classes, mat):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
