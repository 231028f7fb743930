"""Ranking and calibration metrics computed per query list."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, DataError, UndefinedMetric

PROB_FLOOR = 1e-7


def _ranked(pred):
    # descending prediction, ties by ascending original index
    return np.argsort(-np.asarray(pred, dtype=np.float64), kind="stable")


def dcg_at_k(labels_in_rank_order, k):
    gains = 2.0 ** np.asarray(labels_in_rank_order[:k], dtype=np.float64) - 1.0
    return float(np.sum(gains / np.log2(np.arange(2, gains.size + 2))))


def list_ndcg(pred, labels, k=10):
    """NDCG@k of one list, or ``None`` when the list has no positive label."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DataError("empty list")
    ideal = dcg_at_k(np.sort(labels)[::-1], k)
    if ideal == 0:
        return None
    return dcg_at_k(labels[_ranked(pred)], k) / ideal


def ndcg_at_k(lists, k=10):
    """Mean NDCG@k over ``(pred, labels)`` lists with at least one positive."""
    scores = [v for v in (list_ndcg(p, y, k) for p, y in lists) if v is not None]
    if not scores:
        return 0.0
    return float(np.mean(scores))


def logloss(pred, labels):
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_FLOOR, 1 - PROB_FLOOR)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise DataError("no samples")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def bin_sizes(n, k):
    """Contiguous bin sizes; the first ``n % k`` bins take one extra sample."""
    k = min(k, n)
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def list_ece(pred, labels, k=10):
    """Sum over equal-count prediction-sorted bins of |sum(y - p)|, divided by n."""
    if k < 1:
        raise ConfigError("number of bins must be at least 1")
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = pred.size
    if n == 0:
        raise DataError("empty list")
    resid = (labels - pred)[_ranked(pred)]
    edges = np.concatenate([[0], np.cumsum(bin_sizes(n, k))])
    sums = np.add.reduceat(resid, edges[:-1])
    return float(np.sum(np.abs(sums)) / n)


def ece(lists, k=10):
    """Mean per-list ECE over ``(pred, labels)`` lists."""
    if k < 1:
        raise ConfigError("number of bins must be at least 1")
    vals = [list_ece(p, y, k) for p, y in lists]
    if not vals:
        raise DataError("no lists")
    return float(np.mean(vals))


def auc(pred, labels):
    """Rank-statistic AUC with half credit for ties; ``None`` if one class is absent."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(pred, kind="mergesort")
    sorted_pred = pred[order]
    ranks = np.empty(pred.size)
    # average ranks over tied blocks
    _, start, counts = np.unique(sorted_pred, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(pred, labels, user_ids):
    """Impression-weighted mean of per-user AUC over users with both classes."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    num = den = 0.0
    for u in np.unique(user_ids):
        m = user_ids == u
        a = auc(pred[m], labels[m])
        if a is None:
            continue
        num += m.sum() * a
        den += m.sum()
    if den == 0:
        raise UndefinedMetric("no user has both positive and negative labels")
    return float(num / den)


@dataclass
class MetricsReport:
    ndcg10: float
    logloss: float
    ece: float
    gauc: float | None
    n_queries: int
    n_samples: int
    n_users: int

    COLUMNS = ("ndcg10", "logloss", "ece", "gauc", "n_queries", "n_samples", "n_users")

    def as_dict(self):
        return asdict(self)

    def to_kv(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def csv_row(self):
        return [_fmt(getattr(self, c)) for c in self.COLUMNS]

    @classmethod
    def from_row(cls, row):
        kw = {}
        for f in fields(cls):
            raw = row[f.name]
            if f.name.startswith("n_"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = None if raw in ("", "None") else float(raw)
        return cls(**kw)

    @classmethod
    def from_kv(cls, text):
        row = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls.from_row(row)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate(pred, labels, offsets, user_ids=None, k=10, ece_bins=10, with_gauc=True):
    """Full report for predictions laid out contiguously by list.

    Without ``user_ids`` every list counts as its own user for GAUC; GAUC is
    left empty when it is undefined or ``with_gauc`` is false.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    lists = [(pred[a:b], labels[a:b]) for a, b in zip(offsets[:-1], offsets[1:])]
    if user_ids is None:
        user_ids = np.repeat(np.arange(len(lists)), np.diff(offsets))
    g = None
    if with_gauc:
        try:
            g = gauc(pred, labels, user_ids)
        except UndefinedMetric:
            g = None
    return MetricsReport(
        ndcg10=ndcg_at_k(lists, k),
        logloss=logloss(pred, labels),
        ece=ece(lists, ece_bins),
        gauc=g,
        n_queries=len(lists),
        n_samples=int(pred.size),
        n_users=int(np.unique(user_ids).size),
    )


def mean_ci(values, confidence=0.95):
    """Mean and Student-t half-width of a confidence interval."""
    from scipy import stats

    v = np.asarray(values, dtype=np.float64)
    n = v.size
    mean = float(v.mean())
    if n < 2:
        return mean, math.nan
    sd = float(v.std(ddof=1))
    t = stats.t.ppf(0.5 + confidence / 2, n - 1)
    return mean, float(t * sd / math.sqrt(n))
