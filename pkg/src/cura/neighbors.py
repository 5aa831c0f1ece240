"""Exact cosine kNN over training embeddings and per-sample cohort statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .objective import normalized_entropy

QUERY_BLOCK = 512


class NeighborError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    reference_embeddings: np.ndarray
    reference_labels: np.ndarray
    k: int
    unit_rows: np.ndarray = field(repr=False)

    def __len__(self):
        return self.reference_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.reference_embeddings.shape[1]


@dataclass(frozen=True, eq=False)
class CohortStats:
    ids: tuple
    q: np.ndarray
    cohort_entropy: np.ndarray
    weight: np.ndarray
    k: int
    lambda_coh: float

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "q", "cohort_entropy", "weight"])
            for i, q, h, w in zip(self.ids, self.q, self.cohort_entropy, self.weight):
                writer.writerow([i, repr(float(q)), repr(float(h)), repr(float(w))])


def default_k(n_train: int) -> int:
    return 200 if n_train >= 100_000 else 100


def _unit(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NeighborError(f"{what} row {int(zero[0])} has zero norm; cosine distance is undefined")
    return rows / norms[:, None]


def build_index(embeddings, labels, k: int) -> NeighborIndex:
    emb = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    if emb.ndim != 2 or lab.shape != (emb.shape[0],):
        raise NeighborError("embeddings must be (n, d) with one label per row")
    if not 1 <= k <= emb.shape[0] - 1:
        raise NeighborError(f"k={k} must lie in [1, n_reference - 1] = [1, {emb.shape[0] - 1}]")
    unit = _unit(emb, "reference")
    return NeighborIndex(emb, lab.astype(np.int64), int(k), unit)


def query(idx: NeighborIndex, rows, exclude_self=None):
    """Neighbour indices and cosine distances, shape (n_query, k).

    ``exclude_self`` gives, per query, a reference index to drop from its
    neighbourhood (-1 for none). Results are ordered by distance, ties by
    ascending reference index.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != idx.dim:
        raise NeighborError(f"query dim {rows.shape[1]} != index dim {idx.dim}")
    n_q = rows.shape[0]
    if exclude_self is not None:
        exclude_self = np.asarray(exclude_self, dtype=np.int64)
        if exclude_self.shape != (n_q,):
            raise NeighborError("exclude_self must give one entry per query row")
    unit_q = _unit(rows, "query")
    nbrs = np.empty((n_q, idx.k), dtype=np.int64)
    dists = np.empty((n_q, idx.k))
    for start in range(0, n_q, QUERY_BLOCK):
        stop = min(start + QUERY_BLOCK, n_q)
        block = 1.0 - unit_q[start:stop] @ idx.unit_rows.T
        if exclude_self is not None:
            ex = exclude_self[start:stop]
            hit = np.flatnonzero(ex >= 0)
            block[hit, ex[hit]] = np.inf
        sel = _kernels.topk_rows(block, idx.k)
        nbrs[start:stop] = sel
        dists[start:stop] = np.take_along_axis(block, sel, axis=1)
    return nbrs, dists


def neighborhood_risk(idx: NeighborIndex, rows, exclude_self=None) -> np.ndarray:
    nbrs, _ = query(idx, rows, exclude_self)
    return idx.reference_labels[nbrs].sum(axis=1) / idx.k


def cohort_entropy(q):
    return normalized_entropy(q)


def precompute_cohorts(idx: NeighborIndex, train_set, lambda_coh: float) -> CohortStats:
    """q, cohort entropy and weight for every training sample, self excluded."""
    if lambda_coh < 0:
        raise NeighborError("lambda_coh must be non-negative")
    emb = train_set.embeddings
    if emb.shape != idx.reference_embeddings.shape or not np.array_equal(emb, idx.reference_embeddings):
        raise NeighborError("training set rows must be exactly the index reference rows")
    n = emb.shape[0]
    q = neighborhood_risk(idx, emb, exclude_self=np.arange(n))
    h = np.asarray(cohort_entropy(q))
    return CohortStats(tuple(train_set.ids), q, h, lambda_coh * h, idx.k, float(lambda_coh))
