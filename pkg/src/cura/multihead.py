"""Multi-head MLP classifier over frozen embeddings.

M independent one-hidden-layer ReLU heads read the same input; the ensemble
prediction is the arithmetic mean of their sigmoid outputs. Training is
mini-batch Adam on any objective from :mod:`cura.objective`, with early
stopping on validation NLL of the mean prediction.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .objective import (
    EPS,
    ObjectiveConfig,
    clamp_prob,
    loss_total,
    normalized_entropy,
    weighted_ce,
)

log = logging.getLogger(__name__)

MODEL_FORMAT = "cura-multihead/1"
PREDICT_BLOCK = 4096


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class HeadSpec:
    hidden_units: int = 64
    activation: str = "relu"
    dropout_rate: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 50
    batch_size: int = 256
    patience: int = 5
    class_weight_mode: str = "balanced"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 25  # epochs trained on L_base alone before L_ind/L_coh switch on

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.class_weight_mode not in ("balanced", "none"):
            raise ValueError("class_weight_mode must be 'balanced' or 'none'")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ValueError("warmup_epochs must lie in [0, max_epochs)")


@dataclass(eq=False)
class MultiHeadClassifier:
    spec: HeadSpec
    W1: np.ndarray  # (M, D, H)
    b1: np.ndarray  # (M, H)
    W2: np.ndarray  # (M, H)
    b2: np.ndarray  # (M,)

    @property
    def n_heads(self) -> int:
        return self.W1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MultiHeadClassifier":
        return MultiHeadClassifier(self.spec, *(p.copy() for p in self.params()))

    def head(self, m: int):
        return self.W1[m], self.b1[m], self.W2[m], self.b2[m]


def init_classifier(input_dim: int, n_heads: int = 32, spec: HeadSpec | None = None) -> MultiHeadClassifier:
    """Fan-in scaled uniform init; head m draws from seed ``init_seed + m``."""
    spec = spec or HeadSpec()
    if input_dim < 1 or n_heads < 1:
        raise ValueError("input_dim and n_heads must be >= 1")
    H = spec.hidden_units
    W1 = np.empty((n_heads, input_dim, H))
    b1 = np.empty((n_heads, H))
    W2 = np.empty((n_heads, H))
    b2 = np.empty(n_heads)
    lim1, lim2 = 1.0 / math.sqrt(input_dim), 1.0 / math.sqrt(H)
    for m in range(n_heads):
        rng = np.random.default_rng(spec.init_seed + m)
        W1[m] = rng.uniform(-lim1, lim1, size=(input_dim, H))
        b1[m] = rng.uniform(-lim1, lim1, size=H)
        W2[m] = rng.uniform(-lim2, lim2, size=H)
        b2[m] = rng.uniform(-lim2, lim2)
    return MultiHeadClassifier(spec, W1, b1, W2, b2)


def dropout_mask(rng, shape, rate: float) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _forward_raw(clf, X, mask):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != clf.input_dim:
        raise ValueError(f"batch has shape {X.shape}, classifier expects dim {clf.input_dim}")
    S, A = _kernels.heads_forward(X, clf.W1, clf.b1, clf.W2, clf.b2, mask)
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite activation in forward pass")
    return X, S, A


def forward(clf: MultiHeadClassifier, batch, dropout_active: bool = False, rng=None, eps: float = EPS):
    """Per-head probabilities (M, B), clamped to [eps, 1-eps], and their mean."""
    mask = _kernels.NO_MASK
    if dropout_active and clf.spec.dropout_rate > 0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        B = np.atleast_2d(batch).shape[0]
        mask = dropout_mask(rng, (clf.n_heads, B, clf.spec.hidden_units), clf.spec.dropout_rate)
    _, S, _ = _forward_raw(clf, batch, mask)
    P = clamp_prob(S, eps)
    return P, P.mean(axis=0)


def mean_prob(clf: MultiHeadClassifier, X, eps: float = EPS) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], PREDICT_BLOCK):
        _, p = forward(clf, X[start:start + PREDICT_BLOCK], eps=eps)
        out[start:start + PREDICT_BLOCK] = p
    return out


def loss_and_grads(clf, X, y, q, w, objective: ObjectiveConfig, mask=_kernels.NO_MASK):
    """Objective breakdown and gradients for every parameter array."""
    X, S, A = _forward_raw(clf, X, mask)
    eps = objective.epsilon
    P = clamp_prob(S, eps)
    pbar = P.mean(axis=0)
    br = loss_total(pbar, y, q, w, objective)
    inside = (S > eps) & (S < 1.0 - eps)
    dlogit = (br.grad_wrt_mean_prob / clf.n_heads)[None, :] * S * (1.0 - S) * inside
    grads = _kernels.heads_backward(X, A, mask, clf.W2, dlogit)
    return br, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    l_base: float
    l_ind: float
    l_coh: float
    l_total: float
    val_nll: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    COLUMNS = ("epoch", "l_base", "l_ind", "l_coh", "l_total", "val_nll")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])


@dataclass(eq=False)
class TrainedModel:
    classifier: MultiHeadClassifier
    method: str = "cura"
    best_epoch: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def to_json(self) -> dict:
        clf = self.classifier
        return {
            "format": MODEL_FORMAT,
            "method": self.method,
            "input_dim": clf.input_dim,
            "n_heads": clf.n_heads,
            "head_spec": asdict(clf.spec),
            "best_epoch": self.best_epoch,
            "objective": asdict(self.objective),
            "train_config": asdict(self.train_config),
            "heads": [
                {
                    "w1": clf.W1[m].ravel().tolist(),
                    "b1": clf.b1[m].tolist(),
                    "w2": clf.W2[m].tolist(),
                    "b2": float(clf.b2[m]),
                }
                for m in range(clf.n_heads)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainedModel":
        if obj.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {obj.get('format')!r}")
        spec = HeadSpec(**obj["head_spec"])
        D, M, H = obj["input_dim"], obj["n_heads"], spec.hidden_units
        heads = obj["heads"]
        if len(heads) != M:
            raise ValueError("head count does not match n_heads")
        W1 = np.array([h["w1"] for h in heads], dtype=np.float64).reshape(M, D, H)
        b1 = np.array([h["b1"] for h in heads], dtype=np.float64).reshape(M, H)
        W2 = np.array([h["w2"] for h in heads], dtype=np.float64).reshape(M, H)
        b2 = np.array([h["b2"] for h in heads], dtype=np.float64)
        objective = dict(obj["objective"])
        objective["class_weights"] = tuple(objective["class_weights"])
        return cls(
            MultiHeadClassifier(spec, W1, b1, W2, b2),
            method=obj["method"],
            best_epoch=obj["best_epoch"],
            objective=ObjectiveConfig(**objective),
            train_config=TrainConfig(**obj["train_config"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def balanced_class_weights(labels) -> tuple[float, float]:
    labels = np.asarray(labels)
    n, n_pos = labels.size, int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("balanced class weights need both classes in the training set")
    return n / (2.0 * n_pos), n / (2.0 * n_neg)


def validation_nll(clf, X, y, eps: float = EPS) -> float:
    p = clamp_prob(mean_prob(clf, X, eps), eps)
    return float(np.mean(weighted_ce(p, y)))


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def train(
    clf: MultiHeadClassifier,
    train_data,
    val_data,
    objective: ObjectiveConfig,
    cohorts=None,
    cfg: TrainConfig | None = None,
    method: str = "cura",
):
    """Fit ``clf`` in place and return (TrainedModel, TrainingLog).

    The returned model holds a copy of the parameters from the epoch with the
    lowest validation NLL.
    """
    cfg = cfg or TrainConfig()
    X = np.ascontiguousarray(train_data.embeddings)
    y = train_data.labels.astype(np.float64)
    n = X.shape[0]
    if cfg.class_weight_mode == "balanced":
        objective = replace(objective, class_weights=balanced_class_weights(train_data.labels))

    q = w = None
    if objective.lambda_coh > 0:
        if cohorts is None:
            raise ValueError("cohort statistics are required when lambda_coh > 0")
        if tuple(cohorts.ids) != tuple(train_data.ids):
            raise ValueError("cohort statistics do not cover the training rows")
        q = np.asarray(cohorts.q, dtype=np.float64)
        w = objective.lambda_coh * np.asarray(cohorts.cohort_entropy, dtype=np.float64)

    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    rate = clf.spec.dropout_rate
    H = clf.spec.hidden_units
    opt = _Adam(clf.params(), cfg)
    log_ = TrainingLog()
    best_nll, best_params, wait = math.inf, clf.copy(), 0

    warm_objective = replace(objective, lambda_ind=0.0, lambda_coh=0.0)
    for epoch in range(1, cfg.max_epochs + 1):
        active = warm_objective if epoch <= cfg.warmup_epochs else objective
        if epoch == cfg.warmup_epochs + 1 and active != warm_objective:
            # select only among models trained with the full objective
            best_nll, wait = math.inf, 0
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            mask = dropout_mask(dropout_rng, (clf.n_heads, sel.size, H), rate) if rate > 0 else _kernels.NO_MASK
            try:
                br, grads = loss_and_grads(
                    clf, X[sel], y[sel],
                    None if q is None else q[sel],
                    None if w is None else w[sel],
                    active, mask,
                )
            except FloatingPointError:
                raise TrainingDivergence(epoch, b, "loss") from None
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergence(epoch, b, "gradient")
            opt.step(clf.params(), grads)
            if not all(np.all(np.isfinite(p)) for p in clf.params()):
                raise TrainingDivergence(epoch, b, "parameter")
            sums += sel.size * np.array([br.l_base, br.l_ind, br.l_coh, br.l_total])
        try:
            val_nll = validation_nll(clf, val_data.embeddings, val_data.labels, objective.epsilon)
        except FloatingPointError:
            raise TrainingDivergence(epoch, b, "validation prediction") from None
        means = sums / n
        log_.records.append(EpochRecord(epoch, *map(float, means), val_nll))
        log.debug("epoch %d total %.5f val_nll %.5f", epoch, means[3], val_nll)
        if val_nll < best_nll:
            best_nll, best_params, wait = val_nll, clf.copy(), 0
            log_.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                log_.stopped_early = epoch < cfg.max_epochs
                break

    model = TrainedModel(best_params, method, log_.best_epoch, objective, cfg)
    return model, log_


def predict(model, batch):
    """Mean probability and normalised-entropy uncertainty, dropout off."""
    clf = model.classifier if isinstance(model, TrainedModel) else model
    eps = model.objective.epsilon if isinstance(model, TrainedModel) else EPS
    p = mean_prob(clf, batch, eps)
    return p, normalized_entropy(p)


# ---------------------------------------------------------------------------
# finite-difference verification


_XP = np.longdouble


def _reference_loss(pbar, y, q, w, objective):
    """Batch-mean L_total in extended precision, written from the definitions.

    Used only by the finite-difference oracle; independent of
    :func:`cura.objective.loss_total`. ``pbar`` may carry leading axes.
    """
    eps = _XP(objective.epsilon)
    ln2 = np.log(_XP(2))
    y = np.asarray(y, dtype=_XP)
    w_pos, w_neg = (_XP(c) for c in objective.class_weights)
    lp, lq = np.log(pbar), np.log1p(-pbar)
    total = -(w_pos * y * lp + w_neg * (1 - y) * lq)
    if objective.lambda_ind > 0:
        a = y * pbar + (1 - y) * (1 - pbar)
        u = -(pbar * lp + (1 - pbar) * lq) / ln2
        x = 2 * pbar - 1
        deficit = (2 * x * np.arctanh(x) + np.log1p(-x * x)) / (2 * ln2)
        u = np.clip(u, eps, 1 - eps)
        deficit = np.clip(deficit, eps, 1 - eps)
        total = total + _XP(objective.lambda_ind) * (-(1 - a) * np.log(u) - a * np.log(deficit))
    if objective.lambda_coh > 0:
        q = np.asarray(q, dtype=_XP)
        w = np.asarray(w, dtype=_XP)
        cw = objective.class_weights if objective.coh_class_weighted else (1.0, 1.0)
        total = total - w * (_XP(cw[0]) * q * lp + _XP(cw[1]) * (1 - q) * lq)
    return total.mean(axis=-1)


def finite_difference_grads(clf: MultiHeadClassifier, X, y, q, w, objective: ObjectiveConfig, step: float = 1e-5):
    """Central-difference gradients for every parameter, by full re-evaluation.

    Each perturbed loss is recomputed from the forward definition of a single
    head with one parameter shifted by +-step; the other heads' probabilities
    are held fixed since no parameter is shared. Arithmetic is carried out in
    extended precision so that rounding in the loss does not swamp small
    gradient entries.
    """
    X = np.asarray(X, dtype=_XP)
    W1, b1, W2_all, b2 = (np.asarray(p, dtype=_XP) for p in clf.params())
    M, D, H = W1.shape
    eps = _XP(objective.epsilon)

    def prob(logits):
        return np.clip(1 / (1 + np.exp(-logits)), eps, 1 - eps)

    Z = np.matmul(X, W1) + b1[:, None, :]  # (M, B, H)
    A = np.maximum(Z, 0)
    logits = (A * W2_all[:, None, :]).sum(axis=-1) + b2[:, None]
    P = prob(logits)
    total = P.sum(axis=0)
    out = [np.empty_like(p) for p in clf.params()]
    for m in range(M):
        others = total - P[m]
        z, a, lo, W2 = Z[m], A[m], logits[m], W2_all[m]

        def fd(shifted):
            up = _reference_loss((others + prob(shifted(_XP(step)))) / M, y, q, w, objective)
            down = _reference_loss((others + prob(shifted(-_XP(step)))) / M, y, q, w, objective)
            return ((up - down) / (2 * _XP(step))).astype(np.float64)

        # W1[d, j] moves pre-activation j of sample b by s * X[b, d]
        def w1(s):
            zp = z.T[None, :, :] + s * X.T[:, None, :]  # (D, H, B)
            delta = (np.maximum(zp, 0) - a.T[None]) * W2[None, :, None]
            return (lo[None, None, :] + delta).reshape(D * H, -1)

        def b1_(s):
            delta = (np.maximum(z.T + s, 0) - a.T) * W2[:, None]
            return lo[None, :] + delta

        out[0][m] = fd(w1).reshape(D, H)
        out[1][m] = fd(b1_)
        out[2][m] = fd(lambda s: lo[None, :] + s * a.T)
        out[3][m] = fd(lambda s: (lo + s)[None, :])[0]
    return out


def preactivations(clf: MultiHeadClassifier, X) -> np.ndarray:
    """Hidden-layer inputs, shape (M, B, H)."""
    X = np.asarray(X, dtype=np.float64)
    return np.einsum("bd,mdh->mbh", X, clf.W1) + clf.b1[:, None, :]


def gradient_check(clf: MultiHeadClassifier, X, y, q, w, objective: ObjectiveConfig, step: float = 1e-5) -> dict:
    """Compare analytic parameter gradients with central differences.

    Relative error per entry is |a - f| / max(|a|, |f|, 1e-8); entries where
    both gradients vanish (dead units) count as exact. Central differences
    are meaningless across a ReLU kink, so callers should keep every
    pre-activation well outside ``step`` of zero (see :func:`preactivations`).
    """
    _, analytic = loss_and_grads(clf, np.ascontiguousarray(X, dtype=np.float64), y, q, w, objective)
    numeric = finite_difference_grads(clf, X, y, q, w, objective, step)
    worst = 0.0
    count = 0
    for a, f in zip(analytic, numeric):
        err = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        worst = max(worst, float(err.max()))
        count += a.size
    return {"max_rel_error": worst, "n_params": count}
