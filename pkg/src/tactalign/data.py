"""Dataset representation: frames, sample pairs, trajectories and the manifest format.

A manifest is UTF-8 text with one JSON record per line, one record per
tactile/vision pair. Images are referenced by path relative to the manifest
directory and loaded lazily.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

SOURCES = ("ssvtp", "hct")
SPLITS = ("train", "test")
LABEL_ORIGINS = ("human", "pseudo", "backfilled", "none")
CAPTURE_PERIOD = 1.0 / 30.0

# Canonical key order of a manifest record.
RECORD_FIELDS = (
    "trajectory_id",
    "t",
    "tactile_path",
    "vision_path",
    "source",
    "contact",
    "labels",
    "label_origin",
    "split",
)
OPTIONAL_FIELDS = ("excluded",)


class ManifestError(ValueError):
    """Raised for a manifest that cannot be loaded; carries the offending line."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


def _check_raster(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("empty raster")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return image


@dataclass(frozen=True)
class TactileFrame:
    image: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "image", _check_raster(self.image))


@dataclass(frozen=True)
class VisionFrame:
    image: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "image", _check_raster(self.image))


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an RGB raster as float64 in [0, 1]. Supports ``.npy`` and anything Pillow opens."""
    path = Path(path)
    if path.suffix == ".npy":
        image = np.load(path).astype(np.float64)
    else:
        from PIL import Image

        with Image.open(path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return _check_raster(image)


def normalize_label(label: str) -> str:
    return label.strip().lower()


def validate_label(label: str) -> str | None:
    """Return an error message for an invalid (already normalized) label, else None."""
    if not label:
        return "empty label"
    if "," in label:
        return f"label {label!r} contains a comma"
    return None


@dataclass
class SamplePair:
    trajectory_id: str
    t: float
    tactile_path: str
    vision_path: str
    source: str = "hct"
    contact: bool | None = None
    labels: list[str] = field(default_factory=list)
    label_origin: str = "none"
    split: str = "train"

    @property
    def key(self) -> tuple[str, float]:
        return (self.trajectory_id, self.t)

    @property
    def ref(self) -> str:
        """Stable string reference used in reports and audit logs."""
        return f"{self.trajectory_id}@{self.t:.6f}"

    @property
    def needs_annotation(self) -> bool:
        return self.split == "test" and self.label_origin != "human"

    @property
    def label_text(self) -> str:
        return ", ".join(self.labels)

    def tactile_frame(self, root: str | os.PathLike) -> TactileFrame:
        return TactileFrame(load_image(Path(root) / self.tactile_path), self.t)

    def vision_frame(self, root: str | os.PathLike) -> VisionFrame:
        return VisionFrame(load_image(Path(root) / self.vision_path), self.t)

    def validate(self) -> None:
        """Check the record invariants; raises ManifestError with the field at fault."""
        if not isinstance(self.trajectory_id, str) or not self.trajectory_id:
            raise ManifestError("must be a nonempty string", field="trajectory_id")
        if not isinstance(self.t, (int, float)) or isinstance(self.t, bool) or not math.isfinite(self.t):
            raise ManifestError("must be a finite number", field="t")
        for name in ("tactile_path", "vision_path"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ManifestError("must be a nonempty relative path", field=name)
            if os.path.isabs(value):
                raise ManifestError("must be relative", field=name)
        if self.source not in SOURCES:
            raise ManifestError(f"must be one of {SOURCES}", field="source")
        if self.contact is not None and not isinstance(self.contact, bool):
            raise ManifestError("must be a boolean or null", field="contact")
        if not isinstance(self.labels, list) or not all(isinstance(x, str) for x in self.labels):
            raise ManifestError("must be an array of strings", field="labels")
        for label in self.labels:
            problem = validate_label(label)
            if problem:
                raise ManifestError(problem, field="labels")
        if self.label_origin not in LABEL_ORIGINS:
            raise ManifestError(f"must be one of {LABEL_ORIGINS}", field="label_origin")
        if self.labels and self.label_origin == "none":
            raise ManifestError("labeled pair cannot have origin 'none'", field="label_origin")
        if not self.labels and self.label_origin != "none":
            raise ManifestError("unlabeled pair must have origin 'none'", field="label_origin")
        if self.split not in SPLITS:
            raise ManifestError(f"must be one of {SPLITS}", field="split")
        # Test pairs are hand-annotated; 'none' marks a test pair awaiting annotation.
        if self.split == "test" and self.label_origin not in ("human", "none"):
            raise ManifestError("test pairs must carry human labels", field="label_origin")


@dataclass
class Trajectory:
    id: str
    pairs: list[SamplePair] = field(default_factory=list)
    excluded: bool = False

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def source(self) -> str:
        return self.pairs[0].source if self.pairs else "hct"


@dataclass
class DatasetIndex:
    trajectories: list[Trajectory] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self._counts: dict[str, int] | None = None

    def pairs(self) -> Iterator[SamplePair]:
        for traj in self.trajectories:
            yield from traj.pairs

    def __len__(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def trajectory(self, trajectory_id: str) -> Trajectory:
        for traj in self.trajectories:
            if traj.id == trajectory_id:
                return traj
        raise KeyError(trajectory_id)

    def invalidate(self) -> None:
        self._counts = None

    @property
    def counts(self) -> dict[str, int]:
        """Cached pair counts; call :meth:`invalidate` after mutating pairs."""
        if self._counts is None:
            self._counts = self.recount()
        return self._counts

    def recount(self) -> dict[str, int]:
        counts = Counter()
        for p in self.pairs():
            counts["total"] += 1
            counts[p.source] += 1
            if p.contact is True:
                counts["in_contact"] += 1
            elif p.contact is False:
                counts["out_of_contact"] += 1
            else:
                counts["unknown_contact"] += 1
        keys = ("total", "in_contact", "out_of_contact", "unknown_contact", *SOURCES)
        return {k: counts.get(k, 0) for k in keys}

    def copy(self) -> "DatasetIndex":
        trajs = [
            Trajectory(t.id, [replace(p, labels=list(p.labels)) for p in t.pairs], t.excluded)
            for t in self.trajectories
        ]
        return DatasetIndex(trajs, self.root)


def _record_to_pair(record: dict, line: int) -> tuple[SamplePair, bool]:
    if not isinstance(record, dict):
        raise ManifestError("record must be a JSON object", line=line)
    missing = [f for f in RECORD_FIELDS if f not in record]
    if missing:
        raise ManifestError("missing field", line=line, field=missing[0])
    unknown = set(record) - set(RECORD_FIELDS) - set(OPTIONAL_FIELDS)
    if unknown:
        raise ManifestError("unknown field", line=line, field=sorted(unknown)[0])
    labels = record["labels"]
    if isinstance(labels, list) and all(isinstance(x, str) for x in labels):
        labels = [normalize_label(x) for x in labels]
    source = record["source"].lower() if isinstance(record["source"], str) else record["source"]
    pair = SamplePair(
        trajectory_id=record["trajectory_id"],
        t=record["t"],
        tactile_path=record["tactile_path"],
        vision_path=record["vision_path"],
        source=source,
        contact=record["contact"],
        labels=labels,
        label_origin=record["label_origin"],
        split=record["split"],
    )
    try:
        pair.validate()
    except ManifestError as exc:
        raise ManifestError(str(exc).split(": ", 1)[-1], line=line, field=exc.field) from None
    pair.t = float(pair.t)
    excluded = record.get("excluded", False)
    if not isinstance(excluded, bool):
        raise ManifestError("must be a boolean", line=line, field="excluded")
    return pair, excluded


def load_manifest(path: str | os.PathLike) -> DatasetIndex:
    """Load and validate a manifest. Any malformed line raises :class:`ManifestError`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    trajs: dict[str, Trajectory] = {}
    seen: dict[tuple[str, float], int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", line=lineno) from None
            pair, excluded = _record_to_pair(record, lineno)
            if pair.key in seen:
                raise ManifestError(
                    f"duplicate (trajectory_id, t) key, first seen on line {seen[pair.key]}",
                    line=lineno,
                    field="t",
                )
            seen[pair.key] = lineno
            traj = trajs.setdefault(pair.trajectory_id, Trajectory(pair.trajectory_id))
            traj.pairs.append(pair)
            traj.excluded = traj.excluded or excluded
    for traj in trajs.values():
        traj.pairs.sort(key=lambda p: p.t)
    return DatasetIndex(list(trajs.values()), path.parent)


def pair_record(pair: SamplePair, excluded: bool = False) -> dict:
    record = {name: getattr(pair, name) for name in RECORD_FIELDS}
    record["labels"] = list(pair.labels)
    if excluded:
        record["excluded"] = True
    return record


def dumps_manifest(index: DatasetIndex) -> str:
    lines = []
    for traj in index.trajectories:
        for pair in traj.pairs:
            lines.append(json.dumps(pair_record(pair, traj.excluded), ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def save_manifest(index: DatasetIndex, path: str | os.PathLike) -> Path:
    """Write the canonical form of ``index`` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_manifest(index))
    os.replace(tmp, path)
    return path


def _split_population(index: DatasetIndex) -> list[SamplePair]:
    return [p for p in index.pairs() if p.contact is True]


def split_dataset(index: DatasetIndex, test_fraction: float, seed: int) -> DatasetIndex:
    """Assign train/test tags to the in-contact pairs of ``index``.

    SSVTP pairs are split individually. HCT pairs are split by whole
    trajectory so that near-duplicate neighbouring frames never straddle the
    split. Out-of-contact pairs always stay in train. Existing tags are ignored,
    which makes the split a pure function of (index, test_fraction, seed).
    Returns a new index; the input is not modified.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    out = index.copy()
    population = _split_population(out)
    if not population:
        raise ValueError("index has no in-contact pairs to split")
    for p in out.pairs():
        p.split = "train"
    rng = np.random.default_rng(seed)

    ssvtp = sorted((p for p in population if p.source == "ssvtp"), key=lambda p: p.key)
    n_test = int(round(test_fraction * len(ssvtp)))
    for i in rng.permutation(len(ssvtp))[:n_test]:
        ssvtp[i].split = "test"

    groups: dict[str, list[SamplePair]] = {}
    for p in population:
        if p.source == "hct":
            groups.setdefault(p.trajectory_id, []).append(p)
    target = int(round(test_fraction * sum(len(g) for g in groups.values())))
    ids = sorted(groups)
    order = [ids[i] for i in rng.permutation(len(ids))]
    chosen, total = [], 0
    for tid in order:
        if total + len(groups[tid]) <= target:
            chosen.append(tid)
            total += len(groups[tid])
    remaining = [tid for tid in order if tid not in chosen]
    if total < target and remaining:
        # Take one more trajectory if that brings the count closer to the target.
        best = min(remaining, key=lambda tid: abs(total + len(groups[tid]) - target))
        if abs(total + len(groups[best]) - target) < target - total:
            chosen.append(best)
    for tid in chosen:
        for p in groups[tid]:
            p.split = "test"

    for p in out.pairs():
        if p.split == "test" and p.label_origin not in ("human", "none"):
            # Pseudo labels never enter the test set; the pair awaits human annotation.
            p.labels = []
            p.label_origin = "none"
    out.invalidate()
    return out


@dataclass
class WordDistribution:
    counts: Counter
    unique: int
    mean_per_pair: float
    mean_by_origin: dict[str, float]
    labeled_pairs: int

    def most_common(self, n: int | None = None) -> list[tuple[str, int]]:
        return self.counts.most_common(n)

    def to_dict(self) -> dict:
        return {
            "unique": self.unique,
            "labeled_pairs": self.labeled_pairs,
            "mean_per_pair": self.mean_per_pair,
            "mean_by_origin": dict(self.mean_by_origin),
            "counts": dict(self.counts.most_common()),
        }


def vocabulary_stats(index: DatasetIndex | Iterable[SamplePair]) -> WordDistribution:
    pairs = index.pairs() if isinstance(index, DatasetIndex) else index
    counts: Counter = Counter()
    per_origin: dict[str, list[int]] = {}
    for p in pairs:
        if not p.labels:
            continue
        counts.update(p.labels)
        per_origin.setdefault(p.label_origin, []).append(len(p.labels))
    sizes = [n for v in per_origin.values() for n in v]
    return WordDistribution(
        counts=counts,
        unique=len(counts),
        mean_per_pair=float(np.mean(sizes)) if sizes else 0.0,
        mean_by_origin={k: float(np.mean(v)) for k, v in sorted(per_origin.items())},
        labeled_pairs=len(sizes),
    )
