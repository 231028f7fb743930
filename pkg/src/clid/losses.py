"""Student objectives: pointwise cross-entropy and four distillation losses.

Every loss returns a :class:`LossOutput` holding the value and its gradient
with respect to the *student logits*. Listwise losses operate on one query
list; lists shorter than two items contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ranker import sigmoid

PROB_FLOOR = 1e-7
LOSS_KINDS = ("pointwise", "listnet", "listmle", "clid")
WEIGHT_RATIO_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray

    @classmethod
    def zero(cls, n):
        return cls(0.0, np.zeros(n))


@dataclass(frozen=True)
class DistillConfig:
    loss_kind: str = "clid"
    alpha: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown distillation loss {self.loss_kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    @classmethod
    def from_weight_ratio(cls, loss_kind, ratio, temperature=1.0):
        return cls(loss_kind, alpha_from_ratio(ratio), temperature)

    @property
    def weight_ratio(self):
        if self.alpha == 0:
            return float("inf")
        return (1.0 - self.alpha) / self.alpha


def alpha_from_ratio(ratio):
    """Invert ``ratio = (1 - alpha) / alpha``."""
    if ratio < 0:
        raise ConfigError("weight ratio must be non-negative")
    return 1.0 / (1.0 + ratio)


def _log_clamped(p):
    return np.log(np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def _logsumexp(s):
    m = np.max(s)
    return m + np.log(np.sum(np.exp(s - m)))


def point_ce(y, p):
    """Mean binary cross-entropy; gradient is ``(p - y) / n`` per logit."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    n = y.size
    value = -np.sum(y * _log_clamped(p) + (1 - y) * _log_clamped(1 - p)) / n
    return LossOutput(float(value), (p - y) / n)


def pointwise_distill(s_t, s_s, tau=1.0):
    """Temperature-softened cross-entropy between teacher and student, per item.

    Averaged over the items passed in, like :func:`point_ce`.
    """
    if not tau > 0:
        raise ConfigError("temperature must be positive")
    s_t = np.atleast_1d(np.asarray(s_t, dtype=np.float64))
    s_s = np.atleast_1d(np.asarray(s_s, dtype=np.float64))
    q = sigmoid(s_t / tau)
    r = sigmoid(s_s / tau)
    n = s_s.size
    value = -np.sum(q * _log_clamped(r) + (1 - q) * _log_clamped(1 - r)) / n
    return LossOutput(float(value), (r - q) / (tau * n))


def _check_list(p_t, other):
    p_t = np.asarray(p_t, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if p_t.shape != other.shape or p_t.ndim != 1:
        raise DataError("teacher and student vectors must be 1-d and equal length")
    return p_t, other


def listnet_distill(p_t, s_s):
    """Cross-entropy between the normalized teacher pCTR and softmax(student logits)."""
    p_t, s_s = _check_list(p_t, s_s)
    n = s_s.size
    if n < 2:
        return LossOutput.zero(n)
    target = p_t / p_t.sum()
    log_soft = s_s - _logsumexp(s_s)
    value = -np.sum(target * log_soft)
    return LossOutput(float(value), np.exp(log_soft) - target)


def teacher_order(p_t):
    """Indices of ``p_t`` in descending order; ties keep ascending index."""
    return np.argsort(-np.asarray(p_t), kind="stable")


def listmle_distill(p_t, s_s):
    """Plackett-Luce negative log-likelihood of the teacher's ranking."""
    p_t, s_s = _check_list(p_t, s_s)
    n = s_s.size
    if n < 2:
        return LossOutput.zero(n)
    order = teacher_order(p_t)
    s = s_s[order]
    # suffix logsumexp, max-subtracted per suffix
    suffix_max = np.maximum.accumulate(s[::-1])[::-1]
    lse = np.empty(n)
    for i in range(n):
        m = suffix_max[i]
        lse[i] = m + np.log(np.sum(np.exp(s[i:] - m)))
    value = np.sum(lse - s)
    # d/ds_k sum_i lse_i = sum_{i<=k} exp(s_k - lse_i)
    grad_sorted = np.empty(n)
    for k in range(n):
        grad_sorted[k] = np.sum(np.exp(s[k] - lse[: k + 1])) - 1.0
    grad = np.empty(n)
    grad[order] = grad_sorted
    return LossOutput(float(value), grad)


def clid_distill(p_t, p_s):
    """Cross-entropy between list-normalized teacher and student pCTR.

    Gradient is taken through ``p_s = sigmoid(s_s)`` so it is with respect
    to the student logits.
    """
    p_t, p_s = _check_list(p_t, p_s)
    n = p_s.size
    if n < 2:
        return LossOutput.zero(n)
    target = p_t / p_t.sum()
    total = p_s.sum()
    value = -np.sum(target * (np.log(p_s) - np.log(total)))
    dL_dp = -target / p_s + 1.0 / total
    return LossOutput(float(value), dL_dp * p_s * (1.0 - p_s))


def distill_loss(kind, *, p_t, s_t, s_s, p_s=None, tau=1.0):
    """Dispatch to one distillation loss for a single list."""
    if kind == "pointwise":
        return pointwise_distill(s_t, s_s, tau)
    if kind == "listnet":
        return listnet_distill(p_t, s_s)
    if kind == "listmle":
        return listmle_distill(p_t, s_s)
    if kind == "clid":
        return clid_distill(p_t, sigmoid(s_s) if p_s is None else p_s)
    raise ConfigError(f"unknown distillation loss {kind!r}")


def student_loss(y, p_s, distill, alpha):
    """Convex mix of mean PointCE on the list and one distillation term.

    ``distill=None`` (or ``alpha == 1``) leaves the bare PointCE untouched.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    ce = point_ce(y, p_s)
    if distill is None or alpha == 1.0:
        return ce
    return LossOutput(alpha * ce.value + (1.0 - alpha) * distill.value,
                      alpha * ce.grad + (1.0 - alpha) * distill.grad)


# -- calibration-compatibility probe -------------------------------------------

@dataclass(frozen=True)
class ProbeReport:
    loss_kind: str
    trials: int
    max_grad_norm: float  # max over trials of the inf-norm at the PointCE optimum
    min_grad_norm: float
    descent_fraction: float  # share of trials where 2x logit scaling lowers the loss

    @property
    def compatible(self):
        return self.max_grad_norm < 1e-8


def _logit(p):
    return np.log(p) - np.log1p(-p)


def compat_probe(loss_kind, n, trials, seed=0, tau=1.0):
    """Evaluate a distillation loss where student = teacher = true click rate.

    ``n`` is either a list size or an inclusive ``(lo, hi)`` range sampled
    per trial. Click rates are uniform on (0.05, 0.95).
    """
    rng = np.random.default_rng(seed)
    norms, descents = [], []
    for _ in range(trials):
        size = n if np.isscalar(n) else int(rng.integers(n[0], n[1] + 1))
        if size < 2:
            raise ConfigError("probe lists need at least two items")
        P = rng.uniform(0.05, 0.95, size)
        s = _logit(P)
        out = distill_loss(loss_kind, p_t=P, s_t=s, s_s=s, p_s=P, tau=tau)
        norms.append(float(np.max(np.abs(out.grad))))
        scaled = distill_loss(loss_kind, p_t=P, s_t=s, s_s=2 * s, p_s=sigmoid(2 * s), tau=tau)
        descents.append(scaled.value < out.value)
    return ProbeReport(loss_kind, trials, max(norms), min(norms), float(np.mean(descents)))
