"""Embedding datasets: synthetic cohorts, CSV ingestion and stratified folds."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CENTER_RADIUS = 4.0
AMBIGUOUS_T = (0.4, 0.6)


class DatasetError(ValueError):
    pass


class CsvFormatError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    ids: tuple
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        lab = np.asarray(self.labels)
        if emb.ndim != 2 or emb.shape[1] < 1:
            raise DatasetError(f"embeddings must be a 2-D matrix with dim >= 1, got shape {emb.shape}")
        n = emb.shape[0]
        if lab.shape != (n,) or len(self.ids) != n:
            raise DatasetError(
                f"row count mismatch: {n} embeddings, {lab.shape[0] if lab.ndim else 0} labels, {len(self.ids)} ids"
            )
        if not np.all((lab == 0) | (lab == 1)):
            raise DatasetError("labels must be 0 or 1")
        if not np.all(np.isfinite(emb)):
            bad = int(np.argwhere(~np.isfinite(emb))[0, 0])
            raise DatasetError(f"non-finite embedding value in row {bad}")
        lab = lab.astype(np.int8)
        emb.flags.writeable = False
        lab.flags.writeable = False
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def positive_rate(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    def subset(self, index) -> "EmbeddingDataset":
        index = np.asarray(index, dtype=np.int64)
        return EmbeddingDataset(
            ids=tuple(self.ids[i] for i in index),
            embeddings=self.embeddings[index],
            labels=self.labels[index],
        )

    def equals(self, other: "EmbeddingDataset") -> bool:
        return (
            self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 10000
    dim: int = 16
    n_clusters: int = 4
    target_positive_rate: float = 0.03
    ambiguity: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise DatasetError(f"dim must be >= 1, got {self.dim}")
        if self.n_clusters < 2:
            raise DatasetError("n_clusters must be >= 2 (one per class at least)")
        if self.n_samples < 2 * self.n_clusters:
            raise DatasetError(
                f"n_samples={self.n_samples} is below 2*n_clusters={2 * self.n_clusters}"
            )
        if not 0.0 < self.target_positive_rate < 1.0:
            raise DatasetError("target_positive_rate must lie strictly between 0 and 1")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise DatasetError("ambiguity must lie in [0, 1]")


def _even_split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def generate_synthetic(cfg: SynthConfig) -> EmbeddingDataset:
    """Gaussian clusters with per-cluster class plus a boundary cohort.

    Cluster centres lie on a sphere of radius 4 with unit isotropic noise.
    Ambiguous samples sit between a positive and a negative centre and carry
    labels unrelated to their position. The positive count is fixed at
    round(rate * n); when the ambiguous cohort is too large to be half
    positive within that budget, its positive share shrinks so the target
    rate still holds.
    """
    n, dim, k = cfg.n_samples, cfg.dim, cfg.n_clusters
    rng = np.random.default_rng(cfg.seed)

    n_pos = min(max(round(cfg.target_positive_rate * n), 1), n - 1)
    n_neg = n - n_pos
    k_pos = min(max(round(cfg.target_positive_rate * k), 1), k - 1)
    k_neg = k - k_pos

    centers = rng.normal(size=(k, dim))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    centers = CENTER_RADIUS * centers / norms
    pos_centers, neg_centers = centers[:k_pos], centers[k_pos:]

    n_amb = round(cfg.ambiguity * n)
    amb_pos = min(round(n_amb / 2), n_pos // 2)
    amb_neg = min(n_amb - amb_pos, n_neg)

    blocks, labels = [], []
    for centre, size in zip(pos_centers, _even_split(n_pos - amb_pos, k_pos)):
        blocks.append(centre + rng.normal(size=(size, dim)))
        labels.append(np.ones(size, dtype=np.int8))
    for centre, size in zip(neg_centers, _even_split(n_neg - amb_neg, k_neg)):
        blocks.append(centre + rng.normal(size=(size, dim)))
        labels.append(np.zeros(size, dtype=np.int8))

    n_amb = amb_pos + amb_neg
    if n_amb:
        pi = rng.integers(0, k_pos, size=n_amb)
        ni = rng.integers(0, k_neg, size=n_amb)
        t = rng.uniform(*AMBIGUOUS_T, size=(n_amb, 1))
        mid = t * pos_centers[pi] + (1.0 - t) * neg_centers[ni]
        blocks.append(mid + rng.normal(size=(n_amb, dim)))
        labels.append(np.concatenate([np.ones(amb_pos, np.int8), np.zeros(amb_neg, np.int8)]))

    emb = np.concatenate(blocks)
    lab = np.concatenate(labels)
    order = rng.permutation(n)
    width = len(str(n - 1))
    ids = tuple(f"s{i:0{width}d}" for i in range(n))
    return EmbeddingDataset(ids=ids, embeddings=emb[order], labels=lab[order])


# ---------------------------------------------------------------------------
# CSV


def write_csv(ds: EmbeddingDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"] + [f"e{j}" for j in range(ds.dim)])
        for i in range(len(ds)):
            writer.writerow([ds.ids[i], int(ds.labels[i])] + [repr(float(v)) for v in ds.embeddings[i]])


def load_csv(path) -> EmbeddingDataset:
    """Read ``id,label,e0..e{d-1}``; every defect is reported with its line."""
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "empty file, expected header") from None
        header = [h.strip() for h in header]
        dim = len(header) - 2
        expected = ["id", "label"] + [f"e{j}" for j in range(max(dim, 0))]
        if dim < 1 or header != expected:
            raise CsvFormatError(1, f"malformed header {header!r}; expected id,label,e0,...")
        ids, labels, rows = [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(line, f"expected {len(header)} columns, found {len(row)}")
            label = row[1].strip()
            if label not in ("0", "1"):
                raise CsvFormatError(line, f"label {label!r} is not 0 or 1")
            try:
                values = [float(c) for c in row[2:]]
            except ValueError:
                raise CsvFormatError(line, "non-numeric embedding cell") from None
            if not all(math.isfinite(v) for v in values):
                raise CsvFormatError(line, "non-finite embedding cell")
            ids.append(row[0])
            labels.append(int(label))
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return EmbeddingDataset(ids=tuple(ids), embeddings=np.array(rows), labels=np.array(labels))


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True, eq=False)
class FoldSplit:
    n_folds: int
    assignments: np.ndarray
    labels: np.ndarray = field(repr=False)
    val_fraction: float = 0.125
    seed: int = 0

    def fold(self, i: int):
        """(train, validation, test) index arrays for fold ``i``."""
        if not 0 <= i < self.n_folds:
            raise IndexError(f"fold {i} out of range for {self.n_folds} folds")
        test = np.flatnonzero(self.assignments == i)
        rest = np.flatnonzero(self.assignments != i)
        rng = np.random.default_rng([self.seed, i])
        val_parts = []
        for cls in (0, 1):
            members = rest[self.labels[rest] == cls]
            n_val = round(self.val_fraction * members.size)
            val_parts.append(rng.permutation(members)[:n_val])
        val = np.sort(np.concatenate(val_parts))
        train = np.setdiff1d(rest, val, assume_unique=True)
        return train, val, test

    def to_json(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "assignments": [int(a) for a in self.assignments],
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict, labels) -> "FoldSplit":
        assignments = np.asarray(obj["assignments"], dtype=np.int64)
        labels = np.asarray(labels)
        if assignments.shape != labels.shape:
            raise DatasetError("fold assignments do not match dataset size")
        k = int(obj["n_folds"])
        if assignments.min() < 0 or assignments.max() >= k:
            raise DatasetError("fold assignment out of range")
        return cls(k, assignments, labels, float(obj.get("val_fraction", 0.125)), int(obj.get("seed", 0)))


def split_folds(ds: EmbeddingDataset, n_folds: int = 5, val_fraction: float = 0.125, seed: int = 0) -> FoldSplit:
    if n_folds < 2:
        raise DatasetError("n_folds must be >= 2")
    if not 0.0 < val_fraction < 1.0:
        raise DatasetError("val_fraction must lie in (0, 1)")
    labels = ds.labels
    counts = [int(np.sum(labels == c)) for c in (0, 1)]
    if min(counts) < n_folds:
        raise DatasetError(
            f"stratification needs >= {n_folds} samples per class, have {counts[1]} positive / {counts[0]} negative"
        )
    rng = np.random.default_rng(seed)
    assignments = np.empty(len(ds), dtype=np.int64)
    for cls in (1, 0):
        members = rng.permutation(np.flatnonzero(labels == cls))
        assignments[members] = np.arange(members.size) % n_folds
    assignments.flags.writeable = False
    return FoldSplit(n_folds, assignments, labels, float(val_fraction), int(seed))


def save_folds(split: FoldSplit, path) -> None:
    Path(path).write_text(json.dumps(split.to_json()) + "\n", encoding="utf-8")


def load_folds(path, ds: EmbeddingDataset) -> FoldSplit:
    return FoldSplit.from_json(json.loads(Path(path).read_text(encoding="utf-8")), ds.labels)
