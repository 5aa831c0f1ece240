"""Comparison methods sharing the multi-head architecture and training loop.

* ``internal_baseline``: class-weighted cross-entropy only.
* ``cura``: the full objective with cohort statistics.
* ``mc_dropout``: heads trained with dropout, T stochastic passes at test time.
* ``deep_ensemble``: M_e independently seeded multi-head classifiers.

Every method reports uncertainty as the normalised entropy of its final
probability.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import multihead
from .multihead import HeadSpec, TrainConfig, TrainedModel
from .objective import EPS, ObjectiveConfig, clamp_prob, normalized_entropy

METHODS = ("internal_baseline", "cura", "mc_dropout", "deep_ensemble")
FORMAT = "cura-method/1"


@dataclass(frozen=True)
class MethodSpec:
    kind: str = "cura"
    mc_passes: int = 10
    mc_dropout_rate: float = 0.5
    ensemble_size: int = 5
    base_seeds: tuple = ()

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown method {self.kind!r}; choose from {', '.join(METHODS)}")
        if self.mc_passes < 1:
            raise ValueError("mc_passes must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if not 0.0 <= self.mc_dropout_rate < 1.0:
            raise ValueError("mc_dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "base_seeds", tuple(int(s) for s in self.base_seeds))


def method_objective(spec: MethodSpec, objective: ObjectiveConfig) -> ObjectiveConfig:
    if spec.kind == "cura":
        return objective
    return replace(objective, lambda_ind=0.0, lambda_coh=0.0)


def member_seeds(spec: MethodSpec, seed: int, n_heads: int) -> list[tuple[int, int]]:
    """(init_seed, train_seed) per ensemble member.

    Member j's heads use init seeds ``seed + j*n_heads + m`` so no two
    members share a head draw; member 0 coincides with a single-model run.
    """
    if spec.base_seeds:
        if len(set(spec.base_seeds)) != len(spec.base_seeds):
            raise ValueError("ensemble member seeds must be distinct")
        return [(s, s) for s in spec.base_seeds]
    count = spec.ensemble_size if spec.kind == "deep_ensemble" else 1
    return [(seed + j * n_heads, seed + j) for j in range(count)]


@dataclass(eq=False)
class FittedMethod:
    kind: str
    members: list = field(default_factory=list)
    mc_passes: int = 1
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "method": self.kind,
            "mc_passes": self.mc_passes,
            "seed": self.seed,
            "members": [m.to_json() for m in self.members],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FittedMethod":
        if obj.get("format") != FORMAT:
            raise ValueError(f"unsupported method format {obj.get('format')!r}")
        members = [TrainedModel.from_json(m) for m in obj["members"]]
        return cls(obj["method"], members, obj["mc_passes"], obj["seed"])

    @property
    def input_dim(self) -> int:
        return self.members[0].classifier.input_dim


def fit(
    spec: MethodSpec,
    train_data,
    val_data,
    objective: ObjectiveConfig,
    train_cfg: TrainConfig,
    head_spec: HeadSpec,
    n_heads: int,
    cohorts=None,
):
    """Train one fold of ``spec``; returns (FittedMethod, list of TrainingLog)."""
    objective = method_objective(spec, objective)
    if spec.kind == "mc_dropout":
        head_spec = replace(head_spec, dropout_rate=spec.mc_dropout_rate)
    members, logs = [], []
    for init_seed, train_seed in member_seeds(spec, head_spec.init_seed, n_heads):
        clf = multihead.init_classifier(train_data.dim, n_heads, replace(head_spec, init_seed=init_seed))
        model, log = multihead.train(
            clf, train_data, val_data, objective,
            cohorts if spec.kind == "cura" else None,
            replace(train_cfg, seed=train_seed),
            method=spec.kind,
        )
        members.append(model)
        logs.append(log)
    passes = spec.mc_passes if spec.kind == "mc_dropout" else 1
    return FittedMethod(spec.kind, members, passes, train_cfg.seed), logs


def predict_mc_dropout(model: TrainedModel, batch, passes: int = 10, seed: int = 0):
    """Average of ``passes`` dropout-active forward passes."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    clf = model.classifier
    eps = model.objective.epsilon
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    rng = np.random.default_rng([seed, 2])
    acc = np.zeros(X.shape[0])
    for _ in range(passes):
        for start in range(0, X.shape[0], multihead.PREDICT_BLOCK):
            block = X[start:start + multihead.PREDICT_BLOCK]
            _, p = multihead.forward(clf, block, dropout_active=True, rng=rng, eps=eps)
            acc[start:start + block.shape[0]] += p
    p = acc / passes
    return p, normalized_entropy(p)


def predict_ensemble(models, batch, eps: float = EPS):
    probs = np.array([multihead.predict(m, batch)[0] for m in models])
    p = clamp_prob(probs.mean(axis=0), eps)
    return p, normalized_entropy(p)


def predict(fitted: FittedMethod, batch):
    """Final probability and uncertainty for any method."""
    if fitted.kind == "mc_dropout":
        return predict_mc_dropout(fitted.members[0], batch, fitted.mc_passes, fitted.seed)
    if fitted.kind == "deep_ensemble":
        return predict_ensemble(fitted.members, batch)
    return multihead.predict(fitted.members[0], batch)


def _per_fold(spec, data, folds, objective, train_cfg, head_spec, n_heads):
    out = []
    for i in range(folds.n_folds):
        train_idx, val_idx, _ = folds.fold(i)
        fitted, _ = fit(spec, data.subset(train_idx), data.subset(val_idx), objective, train_cfg, head_spec, n_heads)
        out.append(fitted)
    return out


def run_internal_baseline(data, folds, train_cfg: TrainConfig, head_spec: HeadSpec | None = None, n_heads: int = 32):
    return _per_fold(MethodSpec("internal_baseline"), data, folds, ObjectiveConfig(), train_cfg, head_spec or HeadSpec(), n_heads)


def run_deep_ensemble(
    data, folds, train_cfg: TrainConfig, ensemble_size: int = 5, head_spec: HeadSpec | None = None, n_heads: int = 32
):
    spec = MethodSpec("deep_ensemble", ensemble_size=ensemble_size)
    return _per_fold(spec, data, folds, ObjectiveConfig(), train_cfg, head_spec or HeadSpec(), n_heads)
