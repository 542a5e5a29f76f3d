"""Glyph records, manifest I/O, dataset splitting and constrained triplet sampling.

A manifest is a line-delimited JSON file, one record per line, with keys
``record_id``, ``image_path``, ``writer_id``, ``character_id``, ``category``.
Images are 8-bit single-channel PNGs, white background, dark ink.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from shufa.seeding import derive_rng

CATEGORIES = ("regular", "official", "seal", "running", "cursive")

_MANIFEST_KEYS = {"record_id", "image_path", "writer_id", "character_id", "category"}


class ManifestError(ValueError):
    """Malformed manifest file or invariant violation."""


@dataclass(frozen=True)
class GlyphRecord:
    """One glyph image with its writer, character and script-category labels."""

    record_id: str
    image_path: Path
    writer_id: str
    character_id: str
    category: str

    def validate(self) -> None:
        if not self.record_id:
            raise ManifestError("record_id must be non-empty")
        if not self.writer_id:
            raise ManifestError(f"record {self.record_id!r}: writer_id must be non-empty")
        if not self.character_id:
            raise ManifestError(f"record {self.record_id!r}: character_id must be non-empty")
        if self.category not in CATEGORIES:
            raise ManifestError(
                f"record {self.record_id!r}: unknown category {self.category!r} "
                f"(expected one of {', '.join(CATEGORIES)})"
            )


@dataclass
class DatasetManifest:
    """Ordered collection of glyph records."""

    records: list[GlyphRecord]
    source: str = "external"  # "synthetic" | "external"

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "external"):
            raise ManifestError(f"unknown manifest source {self.source!r}")
        seen: set[str] = set()
        for rec in self.records:
            rec.validate()
            if rec.record_id in seen:
                raise ManifestError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[GlyphRecord]:
        return iter(self.records)

    def writer_ids(self) -> list[str]:
        """Unique writer ids in first-seen order."""
        out: list[str] = []
        seen: set[str] = set()
        for rec in self.records:
            if rec.writer_id not in seen:
                seen.add(rec.writer_id)
                out.append(rec.writer_id)
        return out

    def subset(self, records: Sequence[GlyphRecord]) -> "DatasetManifest":
        return DatasetManifest(records=list(records), source=self.source)


def load_manifest(path: str | os.PathLike, check_images: bool = True) -> DatasetManifest:
    """Read a JSONL manifest; relative image paths resolve against the manifest dir."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    base = path.parent
    records: list[GlyphRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            missing = _MANIFEST_KEYS - obj.keys()
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            extra = obj.keys() - _MANIFEST_KEYS
            if extra:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(extra)}")
            img = Path(obj["image_path"])
            if not img.is_absolute():
                img = (base / img).resolve()
            rec = GlyphRecord(
                record_id=obj["record_id"],
                image_path=img,
                writer_id=obj["writer_id"],
                character_id=obj["character_id"],
                category=obj["category"],
            )
            try:
                rec.validate()
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    manifest = DatasetManifest(records=records, source="external")
    if check_images:
        for rec in manifest:
            if not rec.image_path.is_file():
                raise ManifestError(
                    f"record {rec.record_id!r}: image file missing: {rec.image_path}"
                )
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write JSONL; image paths under the manifest dir are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest:
            img = Path(rec.image_path).resolve()
            try:
                stored = img.relative_to(base).as_posix()
            except ValueError:
                stored = str(img)
            fh.write(
                json.dumps(
                    {
                        "record_id": rec.record_id,
                        "image_path": stored,
                        "writer_id": rec.writer_id,
                        "character_id": rec.character_id,
                        "category": rec.category,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


@dataclass
class SplitResult:
    """Class-disjoint query split plus the record-level s1/s2 halves."""

    s1: DatasetManifest
    s2: DatasetManifest
    s_query: DatasetManifest


def split_dataset(
    manifest: DatasetManifest,
    seed: int,
    query_ways: int,
    s1_fraction: float = 0.5,
) -> SplitResult:
    """Hold out whole writer classes for querying, split the rest record-wise.

    ``query_ways`` writers (entire classes) go to ``s_query``; their writers never
    appear in ``s1``/``s2``. Remaining records are shuffled and divided at
    ``s1_fraction``. Deterministic in ``seed``; record order follows the manifest.
    """
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    if not 0.0 <= s1_fraction <= 1.0:
        raise ValueError(f"s1_fraction must be in [0, 1], got {s1_fraction}")
    writers = manifest.writer_ids()
    if len(writers) <= query_ways:
        raise ValueError(
            f"manifest has {len(writers)} writer classes; need more than query_ways={query_ways}"
        )
    rng = derive_rng(seed, "split")
    query_writers = set(rng.choice(writers, size=query_ways, replace=False).tolist())
    query = [r for r in manifest if r.writer_id in query_writers]
    rest = [r for r in manifest if r.writer_id not in query_writers]
    order = rng.permutation(len(rest))
    n1 = int(round(s1_fraction * len(rest)))
    s1_idx = sorted(order[:n1].tolist())
    s2_idx = sorted(order[n1:].tolist())
    return SplitResult(
        s1=manifest.subset([rest[i] for i in s1_idx]),
        s2=manifest.subset([rest[i] for i in s2_idx]),
        s_query=manifest.subset(query),
    )


class TripletSamplingError(RuntimeError):
    """No valid triplet of the required kind within the retry budget."""


@dataclass(frozen=True)
class Triplet:
    """(positive, anchor, negative) glyph triple.

    positive/anchor: same writer, different characters. negative: different
    writer; same character as the anchor for kind "type1", different for "type2".
    """

    positive: GlyphRecord
    anchor: GlyphRecord
    negative: GlyphRecord
    kind: str  # "type1" | "type2"


def triplet_violations(t: Triplet) -> list[str]:
    """Names of violated triplet constraints (empty when valid)."""
    bad: list[str] = []
    if t.positive.writer_id != t.anchor.writer_id:
        bad.append("positive-anchor same-writer")
    if t.negative.writer_id == t.anchor.writer_id:
        bad.append("negative different-writer")
    if t.positive.character_id == t.anchor.character_id:
        bad.append("positive-anchor different-character")
    if t.positive.record_id == t.anchor.record_id:
        bad.append("positive-anchor distinct-record")
    if t.kind == "type1" and t.negative.character_id != t.anchor.character_id:
        bad.append("type1 negative same-character")
    if t.kind == "type2" and t.negative.character_id == t.anchor.character_id:
        bad.append("type2 negative different-character")
    return bad


def sample_triplets(
    source: DatasetManifest | Sequence[GlyphRecord],
    count: int,
    seed: int,
    retry_budget: int = 1000,
) -> list[Triplet]:
    """Draw ``count`` constraint-satisfying triplets, type1:type2 at 1:1.

    Anchors violating a kind's constraints are redrawn (up to ``retry_budget``
    per triplet) rather than emitted, which keeps the kind ratio exact: for even
    ``count`` exactly half of each kind, for odd counts one extra type1.
    """
    records = list(source)
    if count < 0:
        raise ValueError("count must be non-negative")
    by_writer: dict[str, list[int]] = {}
    by_char: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_writer.setdefault(rec.writer_id, []).append(i)
        by_char.setdefault(rec.character_id, []).append(i)
    if len(by_writer) < 2:
        raise TripletSamplingError("need at least 2 writers to form triplets")
    if not any(
        len({records[i].character_id for i in idx}) >= 2 for idx in by_writer.values()
    ):
        raise TripletSamplingError(
            "need at least one writer with 2 distinct characters (positive-anchor "
            "different-character constraint unsatisfiable)"
        )

    rng = derive_rng(seed, "triplets")
    n = len(records)
    small = n <= 256  # exact scans are cheap enough below this
    out: list[Triplet] = []
    for i in range(count):
        kind = "type1" if i % 2 == 0 else "type2"
        triplet = None
        for _ in range(retry_budget):
            anchor = records[int(rng.integers(n))]
            positives = [
                j
                for j in by_writer[anchor.writer_id]
                if records[j].character_id != anchor.character_id
            ]
            if not positives:
                continue
            negative = None
            if kind == "type1":
                negatives = [
                    j
                    for j in by_char[anchor.character_id]
                    if records[j].writer_id != anchor.writer_id
                ]
                if negatives:
                    negative = records[negatives[int(rng.integers(len(negatives)))]]
            elif small:
                negatives = [
                    j
                    for j in range(n)
                    if records[j].writer_id != anchor.writer_id
                    and records[j].character_id != anchor.character_id
                ]
                if negatives:
                    negative = records[negatives[int(rng.integers(len(negatives)))]]
            else:
                # Rejection sampling: on realistic corpora nearly every record
                # qualifies, so a short inner loop almost never fails.
                for _ in range(64):
                    cand = records[int(rng.integers(n))]
                    if (
                        cand.writer_id != anchor.writer_id
                        and cand.character_id != anchor.character_id
                    ):
                        negative = cand
                        break
            if negative is None:
                continue
            positive = records[positives[int(rng.integers(len(positives)))]]
            triplet = Triplet(positive=positive, anchor=anchor, negative=negative, kind=kind)
            break
        if triplet is None:
            constraint = (
                "type1 negative same-character" if kind == "type1" else "type2 negative different-character"
            )
            raise TripletSamplingError(
                f"could not sample a {kind} triplet in {retry_budget} tries "
                f"(no anchor satisfies: {constraint})"
            )
        out.append(triplet)
    return out
