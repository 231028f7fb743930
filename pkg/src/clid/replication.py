"""Desk-scale comparison of Base, pointwise and listwise distillation on synthetic lists.

Every trial trains one teacher and sweeps each distillation method over the
weight-ratio grid. A method's ratio is the one with the best validation
NDCG@10 averaged over trials; test metrics at that ratio are reported.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import gen_synthetic
from .errors import TrainingDivergence
from .losses import WEIGHT_RATIO_GRID
from .metrics import mean_ci
from .trainer import Splits, TrainConfig, evaluate_ranker, run_method, train_teacher

log = logging.getLogger(__name__)

DISTILLED = ("base+pointwise", "clid", "base+listnet", "base+listmle")


@dataclass(frozen=True)
class DeskConfig:
    train_queries: int = 500
    valid_queries: int = 250
    test_queries: int = 1000
    docs: int = 20
    feat_dim: int = 64
    context_strength: float = 2.0
    weight_scale: float = 1.5
    context_scale: float = 3.0
    bias: float = 0.0
    data_seed: int = 0
    trials: int = 5
    base_seed: int = 100
    grid: tuple = tuple(WEIGHT_RATIO_GRID)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, hidden=(32, 16), lr=0.05,
                                                                   batch_lists=8))

    def splits(self):
        n = self.train_queries + self.valid_queries + self.test_queries
        syn = gen_synthetic(n, self.docs, self.feat_dim, self.context_strength, self.data_seed,
                            weight_scale=self.weight_scale, bias=self.bias,
                            context_scale=self.context_scale)
        ds = syn.dataset()
        a, b = self.train_queries, self.train_queries + self.valid_queries
        idx = np.arange(n)
        return Splits(ds.subset(idx[:a]), ds.subset(idx[a:b]), ds.subset(idx[b:]))


@dataclass
class DeskResult:
    ratios: dict  # method -> chosen weight ratio
    test: dict  # method -> per-trial MetricsReport at the chosen ratio
    sweep: dict  # method -> ratio -> per-trial (valid ndcg10, test report) or None if diverged
    elapsed: float

    def mean(self, method, metric):
        return float(np.mean([getattr(r, metric) for r in self.test[method]]))

    def paired_gain(self, method="clid", against="base", metric="ndcg10"):
        """Mean and t-based 95% half-width of the per-trial difference."""
        diff = [getattr(a, metric) - getattr(b, metric)
                for a, b in zip(self.test[method], self.test[against])]
        return mean_ci(diff)

    def checks(self):
        m = lambda k, metric="ndcg10": self.mean(k, metric)
        gain, half = self.paired_gain()
        return {
            "ndcg: clid >= base+pointwise": m("clid") >= m("base+pointwise"),
            "ndcg: base+pointwise >= base": m("base+pointwise") >= m("base"),
            "ndcg: clid - base > 0 (95% CI)": gain - half > 0,
            "ece: clid <= 1.10 x base": m("clid", "ece") <= 1.10 * m("base", "ece"),
            "ece: base+listnet > clid": m("base+listnet", "ece") > m("clid", "ece"),
            "ece: base+listmle > clid": m("base+listmle", "ece") > m("clid", "ece"),
        }

    def table(self):
        lines = [f"{'method':15s} {'ratio':>8s} {'ndcg10':>8s} {'logloss':>8s} {'ece':>8s}"]
        for k in ("base", *DISTILLED):
            ratio = "-" if k == "base" else f"{self.ratios[k]:g}"
            lines.append(f"{k:15s} {ratio:>8s} {self.mean(k, 'ndcg10'):8.4f} "
                         f"{self.mean(k, 'logloss'):8.4f} {self.mean(k, 'ece'):8.4f}")
        return "\n".join(lines)


def _pick_ratio(per_ratio):
    """Best mean validation NDCG among ratios where no trial diverged; ties go to the smaller ratio."""
    best = None
    for ratio, runs in per_ratio.items():
        if any(r is None for r in runs):
            continue
        score = float(np.mean([v for v, _ in runs]))
        if best is None or score > best[0]:
            best = (score, ratio)
    if best is None:
        raise TrainingDivergence("every weight ratio diverged in some trial")
    return best[1]


def run_desk_replication(config=DeskConfig()):
    t0 = time.perf_counter()
    splits = config.splits()
    sweep = {k: {r: [] for r in config.grid} for k in DISTILLED}
    base = []
    for t in range(config.trials):
        cfg = replace(config.train, seed=config.base_seed + t)
        teacher = train_teacher(splits, cfg).params
        base.append(run_method("base", splits, cfg)[0])
        for method in DISTILLED:
            for ratio in config.grid:
                try:
                    rep, res = run_method(method, splits, cfg, teacher=teacher, weight_ratio=ratio)
                except TrainingDivergence as exc:
                    log.info("%s ratio %g trial %d diverged: %s", method, ratio, t, exc)
                    sweep[method][ratio].append(None)
                    continue
                sweep[method][ratio].append((evaluate_ranker(res.params, splits.valid).ndcg10, rep))
    ratios = {k: _pick_ratio(v) for k, v in sweep.items()}
    test = {"base": base}
    test.update({k: [rep for _, rep in sweep[k][ratios[k]]] for k in DISTILLED})
    return DeskResult(ratios, test, sweep, time.perf_counter() - t0)
