"""Discrimination, calibration, selective-prediction and triage metrics.

Selection by uncertainty always orders samples by ascending uncertainty with
ties broken by ascending row index; precision-recall ranking orders by
descending probability, ties by ascending row index. Undefined values in
curve tables are ``None``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .objective import EPS, clamp_prob, normalized_entropy

DECISION_THRESHOLD = 0.5
FRR_TAUS = (0.05, 0.10, 0.15)
DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 21))
WORKLOAD_FRACTIONS = (0.0,) + DEFAULT_FRACTIONS
DEFAULT_BINS = 10


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScoredSet:
    prob: np.ndarray
    uncertainty: np.ndarray
    label: np.ndarray
    method: str = ""
    fold: str = ""

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=np.float64)
        unc = np.asarray(self.uncertainty, dtype=np.float64)
        lab = np.asarray(self.label).astype(np.int64)
        if not (prob.shape == unc.shape == lab.shape) or prob.ndim != 1:
            raise MetricError("prob, uncertainty and label must be 1-D of equal length")
        if not np.all((lab == 0) | (lab == 1)):
            raise MetricError("labels must be 0 or 1")
        if np.any(np.abs(normalized_entropy(prob) - unc) > 1e-9):
            raise MetricError("uncertainty is not the normalised entropy of prob")
        object.__setattr__(self, "prob", prob)
        object.__setattr__(self, "uncertainty", unc)
        object.__setattr__(self, "label", lab)

    def __len__(self):
        return self.prob.shape[0]

    @classmethod
    def from_probs(cls, prob, label, method: str = "", fold: str = "") -> "ScoredSet":
        prob = np.asarray(prob, dtype=np.float64)
        return cls(prob, normalized_entropy(prob), label, method, fold)

    def take(self, index) -> "ScoredSet":
        return ScoredSet(self.prob[index], self.uncertainty[index], self.label[index], self.method, self.fold)

    @classmethod
    def concat(cls, sets, fold: str = "all") -> "ScoredSet":
        sets = list(sets)
        return cls(
            np.concatenate([s.prob for s in sets]),
            np.concatenate([s.uncertainty for s in sets]),
            np.concatenate([s.label for s in sets]),
            sets[0].method if sets else "",
            fold,
        )


def _counts(s: ScoredSet):
    n_pos = int(s.label.sum())
    return n_pos, len(s) - n_pos


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney AUROC with tied scores counted one half."""
    n_pos, n_neg = _counts(s)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s.prob, method="average")
    u = ranks[s.label == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pr_order(s: ScoredSet) -> np.ndarray:
    return np.lexsort((np.arange(len(s)), -s.prob))


def auprc(s: ScoredSet) -> float:
    """Average precision: mean of precision at the rank of each positive."""
    n_pos, _ = _counts(s)
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    y = s.label[_pr_order(s)]
    precision = np.cumsum(y) / np.arange(1, y.size + 1)
    return float(precision[y == 1].sum() / n_pos)


def brier(s: ScoredSet) -> float:
    return float(np.mean((s.prob - s.label) ** 2))


def nll(s: ScoredSet, eps: float = EPS) -> float:
    p = clamp_prob(s.prob, eps)
    y = s.label
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def errors(s: ScoredSet) -> np.ndarray:
    predicted = (s.prob >= DECISION_THRESHOLD).astype(np.int64)
    return (predicted != s.label).astype(np.float64)


def certainty_order(s: ScoredSet) -> np.ndarray:
    return np.lexsort((np.arange(len(s)), s.uncertainty))


def risk_coverage(s: ScoredSet):
    """(coverage, selective risk) for coverage k/n, k = 1..n."""
    n = len(s)
    err = errors(s)[certainty_order(s)]
    k = np.arange(1, n + 1)
    return k / n, np.cumsum(err) / k


def aurc(s: ScoredSet) -> float:
    if len(s) == 0:
        raise MetricError("AURC needs at least one sample")
    _, risk = risk_coverage(s)
    return float(risk.mean())


def _retained_count(fraction: float, n: int) -> int:
    # rounding guards against 0.1 * 1000 = 100.00000000000001
    return min(n, int(math.ceil(round(fraction * n, 9))))


def uncertainty_bins(s: ScoredSet, n_bins: int = DEFAULT_BINS):
    """Equal-width bins on [0, 1]; the last bin is closed on the right."""
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, s.uncertainty, side="right") - 1, 0, n_bins - 1)
    correct = 1.0 - errors(s)
    rows = []
    for b in range(n_bins):
        members = idx == b
        count = int(members.sum())
        rows.append({
            "lo": float(edges[b]),
            "hi": float(edges[b + 1]),
            "count": count,
            "accuracy": float(correct[members].mean()) if count else None,
            "positive_rate": float(s.label[members].mean()) if count else None,
        })
    return rows


def retained_auprc_curve(s: ScoredSet, fractions=DEFAULT_FRACTIONS):
    order = certainty_order(s)
    rows = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise MetricError(f"retained fraction {f} outside (0, 1]")
        kept = s.take(order[:_retained_count(f, len(s))])
        value = auprc(kept) if kept.label.sum() > 0 else None
        rows.append({"fraction": float(f), "auprc": value})
    return rows


def workload_safety_curve(s: ScoredSet, fractions=WORKLOAD_FRACTIONS):
    """Missed positives per 1000 patients when the most certain are automated.

    A missed positive is an automated sample with y = 1 and prob below the
    decision threshold.
    """
    n = len(s)
    order = certainty_order(s)
    missed = ((s.label == 1) & (s.prob < DECISION_THRESHOLD))[order]
    cum = np.concatenate([[0], np.cumsum(missed)])
    rows = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise MetricError(f"automated fraction {f} outside [0, 1]")
        rows.append({"fraction": float(f), "missed_per_1000": 1000.0 * float(cum[_retained_count(f, n)]) / n})
    return rows


def false_reassurance_rate(s: ScoredSet, tau: float) -> float:
    n_pos, _ = _counts(s)
    if n_pos == 0:
        raise MetricError("false reassurance rate needs at least one positive")
    safe = (s.uncertainty < tau) & (s.prob < tau) & (s.label == 1)
    return float(safe.sum() / n_pos)


def frr_sweep(s: ScoredSet, taus=FRR_TAUS):
    return [{"tau": float(t), "frr": false_reassurance_rate(s, t)} for t in taus]


# ---------------------------------------------------------------------------
# reports

SCALARS = ("auroc", "auprc", "brier", "nll", "aurc")
CURVE_COLUMNS = {
    "risk_coverage": ("coverage", "risk"),
    "bins": ("lo", "hi", "count", "accuracy", "positive_rate"),
    "workload_safety": ("fraction", "missed_per_1000"),
    "retained_auprc": ("fraction", "auprc"),
    "frr": ("tau", "frr"),
}


@dataclass
class EvalReport:
    method: str
    fold: str
    n: int
    auroc: float
    auprc: float
    brier: float
    nll: float
    aurc: float
    frr: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict, repr=False)

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in SCALARS}

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "fold": self.fold,
            "n": self.n,
            **self.scalars(),
            "frr": {repr(t): v for t, v in self.frr.items()},
        }

    def write_curves(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, rows in self.curves.items():
            write_table(directory / f"{name}.csv", CURVE_COLUMNS[name], rows)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, columns, rows) -> None:
    """CSV with full round-trip float precision; None becomes an empty cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
    tmp.replace(path)


def evaluate(
    s: ScoredSet,
    n_bins: int = DEFAULT_BINS,
    fractions=DEFAULT_FRACTIONS,
    workload_fractions=WORKLOAD_FRACTIONS,
    taus=FRR_TAUS,
) -> EvalReport:
    coverage, risk = risk_coverage(s)
    sweep = frr_sweep(s, taus)
    curves = {
        "risk_coverage": [{"coverage": float(c), "risk": float(r)} for c, r in zip(coverage, risk)],
        "bins": uncertainty_bins(s, n_bins),
        "workload_safety": workload_safety_curve(s, workload_fractions),
        "retained_auprc": retained_auprc_curve(s, fractions),
        "frr": sweep,
    }
    return EvalReport(
        method=s.method,
        fold=s.fold,
        n=len(s),
        auroc=auroc(s),
        auprc=auprc(s),
        brier=brier(s),
        nll=nll(s),
        aurc=float(risk.mean()),
        frr={row["tau"]: row["frr"] for row in sweep},
        curves=curves,
    )


def aggregate(reports) -> dict:
    """Mean and population standard deviation of each scalar across folds."""
    reports = list(reports)
    out = {}
    for k in SCALARS:
        values = np.array([getattr(r, k) for r in reports])
        out[k] = {"mean": float(values.mean()), "sd": float(values.std())}
    taus = sorted(reports[0].frr) if reports else []
    for t in taus:
        values = np.array([r.frr[t] for r in reports])
        out[f"frr@{t!r}"] = {"mean": float(values.mean()), "sd": float(values.std())}
    return out
