"""Bi-level uncertainty objective over ensemble-mean probabilities.

All functions are vectorised over numpy arrays and accept python scalars.
The training loss is

    L_total = L_base + L_ind + L_coh

where L_base is class-weighted cross-entropy, L_ind aligns the normalised
entropy of the mean prediction with the error proxy 1 - a(x), and L_coh pulls
the prediction toward the neighbourhood event rate q(x) with weight w(x).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

LN2 = float(np.log(2.0))
EPS = 1e-7


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_ind: float = 0.5
    lambda_coh: float = 0.01
    class_weights: tuple[float, float] = (1.0, 1.0)  # (w_pos, w_neg)
    epsilon: float = EPS
    coh_class_weighted: bool = False

    def __post_init__(self):
        if self.lambda_ind < 0 or self.lambda_coh < 0:
            raise ValueError("lambda_ind and lambda_coh must be non-negative")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        w_pos, w_neg = self.class_weights
        if w_pos <= 0 or w_neg <= 0:
            raise ValueError("class weights must be positive")
        object.__setattr__(self, "class_weights", (float(w_pos), float(w_neg)))


@dataclass
class LossBreakdown:
    l_base: float
    l_ind: float
    l_coh: float
    l_total: float
    grad_wrt_mean_prob: np.ndarray = field(repr=False)


@dataclass
class SoftLabelForm:
    gamma: np.ndarray
    target: np.ndarray
    scale: np.ndarray


def clamp_prob(p, eps: float = EPS):
    return np.clip(p, eps, 1.0 - eps)


def weighted_ce(p, y, weights=(1.0, 1.0)):
    """Elementwise ``-[w_pos*y*ln p + w_neg*(1-y)*ln(1-p)]``.

    ``y`` may be a soft target in [0, 1]. With weights (1, 1) this is the
    plain binary cross-entropy.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w_pos, w_neg = weights
    return -(w_pos * y * np.log(p) + w_neg * (1.0 - y) * np.log1p(-p))


def correctness(p_mean, y):
    """Probability mass the prediction assigns to the true label."""
    p_mean = np.asarray(p_mean, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return y * p_mean + (1.0 - y) * (1.0 - p_mean)


def normalized_entropy(p):
    """Binary entropy in nats divided by ln 2, with 0 ln 0 = 0.

    Total on [0, 1]; callers that need a strictly interior value clamp first.
    """
    p = np.asarray(p, dtype=np.float64)
    h = -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)) / LN2 + 0.0  # + 0.0 turns -0.0 into 0.0
    if h.ndim == 0:
        return float(h)
    return h


def _entropy_slope(p):
    # d u / d p = ln((1 - p) / p) / ln 2; atanh keeps precision near p = 0.5
    p = np.asarray(p, dtype=np.float64)
    x = 2.0 * p - 1.0
    with np.errstate(divide="ignore"):
        far = (np.log1p(-p) - np.log(p)) / LN2
    return np.where(np.abs(x) < 0.5, -2.0 * np.arctanh(x) / LN2, far)


def entropy_deficit(p):
    """1 - u(p) without the cancellation of ``1 - normalized_entropy(p)``.

    With x = 2p - 1, 2 ln2 (1 - u) = 2x atanh(x) + ln(1 - x^2), which keeps
    full relative precision near p = 0.5 where u approaches 1. Away from the
    centre u < 0.82 and the direct difference is already exact enough.
    """
    p = np.asarray(p, dtype=np.float64)
    x = 2.0 * p - 1.0
    centre = np.abs(x) < 0.5
    xc = np.where(centre, x, 0.0)
    near = (2.0 * xc * np.arctanh(xc) + np.log1p(-xc * xc)) / (2.0 * LN2)
    out = np.where(centre, near, 1.0 - normalized_entropy(p))
    return float(out) if out.ndim == 0 else out


def _ind_parts(p, y, eps):
    a = correctness(p, y)
    u_raw = normalized_entropy(p)
    v_raw = entropy_deficit(p)
    u = np.clip(u_raw, eps, 1.0 - eps)
    v = np.clip(v_raw, eps, 1.0 - eps)
    free = (u_raw > eps) & (v_raw > eps)
    return a, u, v, free


def loss_ind_terms(p_mean, y, eps: float = EPS):
    """Per-sample individual calibration term (unscaled by lambda_ind)."""
    a, u, v, _ = _ind_parts(p_mean, y, eps)
    return -(1.0 - a) * np.log(u) - a * np.log(v)


def loss_ind(p_mean, y, lambda_ind: float, eps: float = EPS) -> float:
    if lambda_ind == 0:
        return 0.0
    return float(lambda_ind * np.mean(loss_ind_terms(p_mean, y, eps)))


def loss_coh(p_mean, q, w, weights=(1.0, 1.0)) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.mean(w * weighted_ce(p_mean, q, weights)))


def loss_total(p_mean, y, q, w, cfg: ObjectiveConfig) -> LossBreakdown:
    """Batch-mean losses and d(L_total)/d(p_mean_i).

    ``q`` and ``w`` may be None when ``cfg.lambda_coh == 0``. The L_ind
    gradient flows through both the correctness probability and the
    normalised entropy. Where u is clamped its slope is treated as zero.
    """
    p = np.asarray(p_mean, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = p.shape[0]
    if y.shape != p.shape:
        raise ValueError(f"p_mean has shape {p.shape} but y has {y.shape}")
    eps = cfg.epsilon
    w_pos, w_neg = cfg.class_weights

    base_terms = weighted_ce(p, y, cfg.class_weights)
    l_base = float(np.mean(base_terms))
    grad = -w_pos * y / p + w_neg * (1.0 - y) / (1.0 - p)

    l_ind = 0.0
    if cfg.lambda_ind > 0:
        a, u, v, free = _ind_parts(p, y, eps)
        terms = -(1.0 - a) * np.log(u) - a * np.log(v)
        l_ind = float(cfg.lambda_ind * np.mean(terms))
        d_a = np.log(u) - np.log(v)
        d_u = -(1.0 - a) / u + a / v
        du_dp = np.where(free, _entropy_slope(p), 0.0)
        grad = grad + cfg.lambda_ind * (d_a * (2.0 * y - 1.0) + d_u * du_dp)

    l_coh = 0.0
    if cfg.lambda_coh > 0:
        if q is None or w is None:
            raise ValueError("cohort statistics are required when lambda_coh > 0")
        q = np.asarray(q, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        if q.shape != p.shape or w.shape != p.shape:
            raise ValueError("q and w must match p_mean in shape")
        cw = cfg.class_weights if cfg.coh_class_weighted else (1.0, 1.0)
        l_coh = loss_coh(p, q, w, cw)
        grad = grad + w * (-cw[0] * q / p + cw[1] * (1.0 - q) / (1.0 - p))

    l_total = l_base + l_ind + l_coh
    grad = grad / n
    if not (np.isfinite(l_total) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite loss or gradient in loss_total")
    return LossBreakdown(l_base, l_ind, l_coh, l_total, grad)


def soft_label_form(y, q, w) -> SoftLabelForm:
    """Mixing weight, soft target and scale that absorb L_coh into L_base."""
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("cohort weights must be non-negative")
    gamma = w / (1.0 + w)
    target = (y + w * q) / (1.0 + w)
    return SoftLabelForm(gamma=gamma, target=target, scale=1.0 + w)


def verify_soft_label_identity(p, y, q, w):
    """|CE(p,y) + w CE(p,q) - (1+w) CE(p,t)| with unweighted CE."""
    form = soft_label_form(y, q, w)
    lhs = weighted_ce(p, y) + np.asarray(w, dtype=np.float64) * weighted_ce(p, q)
    rhs = form.scale * weighted_ce(p, form.target)
    return np.abs(lhs - rhs)
