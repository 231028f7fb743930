"""Training loops: teacher, distilled student, two-tower baselines, weight-ratio sweep.

The optimisation unit is the query list: each step draws ``batch_lists``
whole lists, sums per-list losses and divides by the number of lists.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import ranker
from .errors import ConfigError, TrainingDivergence
from .losses import DistillConfig, WEIGHT_RATIO_GRID, distill_loss, point_ce, student_loss
from .metrics import MetricsReport, evaluate
from .models import ModelConfig, TwoTower, dropout_mask, init_model, pal_loss

log = logging.getLogger(__name__)

PROTOCOLS = ("teacher_first", "simultaneous")
DEFAULT_EPOCHS = {"teacher_first": 100, "simultaneous": 1}


@dataclass(frozen=True)
class TrainConfig:
    protocol: str = "teacher_first"
    epochs: int | None = None  # 100 for teacher_first, 1 for simultaneous
    batch_lists: int = 8
    lr: float = 0.05
    weight_decay: float = 0.001
    distill: DistillConfig | None = None
    seed: int = 0
    eval_every: int = 1
    hidden: tuple = (64, 32)
    shallow_hidden: int = 256
    dropout: float = 0.0
    batchnorm: bool = False
    shallow_dropout: float = 0.5
    teacher_epochs: int | None = None
    teacher_lr: float | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.protocol])
        if self.epochs < 1 or self.batch_lists < 1:
            raise ConfigError("epochs and batch_lists must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def for_teacher(self):
        return replace(self, epochs=self.teacher_epochs or self.epochs,
                       lr=self.teacher_lr or self.lr, distill=None)


@dataclass(frozen=True)
class Splits:
    train: object
    valid: object
    test: object


@dataclass
class TrainLog:
    records: list = field(default_factory=list)  # (epoch, split, MetricsReport)

    HEADER = ("epoch", "split", "ndcg10", "logloss", "ece", "gauc")

    def add(self, epoch, split, report):
        if self.records and epoch < self.records[-1][0]:
            raise ValueError("epochs must not decrease")
        self.records.append((epoch, split, report))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for epoch, split, r in self.records:
            w.writerow([epoch, split, repr(r.ndcg10), repr(r.logloss), repr(r.ece),
                        "" if r.gauc is None else repr(r.gauc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, counts=(0, 0, 0)):
        out = cls()
        for row in csv.DictReader(io.StringIO(text)):
            rep = MetricsReport(float(row["ndcg10"]), float(row["logloss"]), float(row["ece"]),
                                float(row["gauc"]) if row["gauc"] else None, *counts)
            out.records.append((int(row["epoch"]), row["split"], rep))
        return out

    def series(self, split, metric):
        return [(e, getattr(r, metric)) for e, s, r in self.records if s == split]


@dataclass
class TrainResult:
    params: object  # RankerParams, or TwoTower for the baselines
    log: TrainLog
    teacher: ranker.RankerParams | None = None


def _batches(n_lists, batch_lists, rng):
    order = rng.permutation(n_lists)
    return [order[i:i + batch_lists] for i in range(0, n_lists, batch_lists)]


def _gather(ds, list_ids):
    """Row indices and local offsets for a batch of lists."""
    starts, stops = ds.offsets[list_ids], ds.offsets[list_ids + 1]
    idx = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
    local = np.concatenate([[0], np.cumsum(stops - starts)])
    return idx, local


def _check_finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise TrainingDivergence(f"{what} loss became {value} at epoch {epoch}, step {step}")


def _step(params, x, grad_fn, cfg, rng):
    trace = ranker.forward(params, x, train=True, dropout=cfg.dropout, rng=rng)
    value, dlogit = grad_fn(trace)
    grads = ranker.backward(trace, params, dlogit)
    new = ranker.sgd_step(params, grads, cfg.lr, cfg.weight_decay)
    return ranker.update_running_stats(new, trace), value


def _pointce_grad(y, local):
    n_lists = len(local) - 1

    def fn(trace):
        total, grad = 0.0, np.empty_like(trace.logits)
        for a, b in zip(local[:-1], local[1:]):
            out = point_ce(y[a:b], trace.probs[a:b])
            total += out.value
            grad[a:b] = out.grad / n_lists
        return total / n_lists, grad
    return fn


def _student_grad(y, local, distill, t_logits, t_probs):
    n_lists = len(local) - 1

    def fn(trace):
        total, grad = 0.0, np.empty_like(trace.logits)
        for a, b in zip(local[:-1], local[1:]):
            d = None
            if distill is not None and distill.alpha < 1.0:
                d = distill_loss(distill.loss_kind, p_t=t_probs[a:b], s_t=t_logits[a:b],
                                 s_s=trace.logits[a:b], p_s=trace.probs[a:b],
                                 tau=distill.temperature)
            out = student_loss(y[a:b], trace.probs[a:b], d, distill.alpha if distill else 1.0)
            total += out.value
            grad[a:b] = out.grad / n_lists
        return total / n_lists, grad
    return fn


def evaluate_ranker(params, ds, teacher=False):
    x = ds.teacher_features if teacher else ds.features
    return evaluate(ranker.forward(params, x).probs, ds.labels, ds.offsets)


def train_teacher(splits, config):
    """PointCE on V_t; returns the checkpoint with the best validation LogLoss."""
    cfg = config.for_teacher()
    train = splits.train
    mc = ModelConfig("teacher", train.width, train.privileged.shape[1], tuple(cfg.hidden))
    params = init_model(mc, cfg.seed, cfg.batchnorm)
    rng = np.random.default_rng(cfg.seed)
    xt = train.teacher_features
    tlog = TrainLog()
    best, best_loss = params, np.inf
    for epoch in range(1, cfg.epochs + 1):
        for step, lists in enumerate(_batches(train.n_lists, cfg.batch_lists, rng)):
            idx, local = _gather(train, lists)
            params, value = _step(params, xt[idx], _pointce_grad(train.labels[idx], local), cfg, rng)
            _check_finite(value, "teacher", epoch, step)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rep = evaluate_ranker(params, splits.valid, teacher=True)
            tlog.add(epoch, "valid", rep)
            if rep.logloss < best_loss:
                best, best_loss = params.copy(), rep.logloss
    return TrainResult(best, tlog)


def train_student(splits, teacher, config):
    """Student on V_r with PointCE plus optional distillation from ``teacher``.

    ``teacher_first``: ``teacher`` is frozen and its predictions are fixed
    targets. ``simultaneous``: the teacher (``teacher`` or a fresh init) is
    updated on PointCE every step, then the student distills from the
    updated teacher's predictions. Teacher outputs never receive gradient
    from the distillation term.
    """
    cfg = config
    distill = cfg.distill
    if distill is not None and distill.alpha < 1.0 and teacher is None and cfg.protocol == "teacher_first":
        raise ConfigError("distillation needs teacher parameters")
    train = splits.train
    priv_w = train.privileged.shape[1] if train.privileged is not None else 0
    mc = ModelConfig("student", train.width, priv_w, tuple(cfg.hidden))
    params = init_model(mc, cfg.seed, cfg.batchnorm)
    rng = np.random.default_rng(cfg.seed)
    simultaneous = cfg.protocol == "simultaneous"
    if simultaneous:
        tcfg = cfg.for_teacher()
        if teacher is None:
            tmc = ModelConfig("teacher", train.width, priv_w, tuple(cfg.hidden))
            teacher = init_model(tmc, cfg.seed + 1, cfg.batchnorm)
        else:
            teacher = teacher.copy()
        xt = train.teacher_features
        t_logits = None
    elif teacher is not None and distill is not None:
        t_logits = ranker.forward(teacher, train.teacher_features).logits
    else:
        t_logits = None
    t_probs = None if t_logits is None else ranker.sigmoid(t_logits)

    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        for step, lists in enumerate(_batches(train.n_lists, cfg.batch_lists, rng)):
            idx, local = _gather(train, lists)
            y = train.labels[idx]
            if simultaneous:
                teacher, tval = _step(teacher, xt[idx], _pointce_grad(y, local), tcfg, rng)
                _check_finite(tval, "teacher", epoch, step)
                bl = ranker.forward(teacher, xt[idx]).logits
                bp = ranker.sigmoid(bl)
            elif t_logits is not None:
                bl, bp = t_logits[idx], t_probs[idx]
            else:
                bl = bp = None
            params, value = _step(params, train.features[idx],
                                  _student_grad(y, local, distill, bl, bp), cfg, rng)
            _check_finite(value, "student", epoch, step)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            tlog.add(epoch, "valid", evaluate_ranker(params, splits.valid))
    return TrainResult(params, tlog, teacher if simultaneous else None)


def train_two_tower(splits, config, kind):
    """PAL (product of probabilities) or PriDropOut (logit sum with dropout), trained jointly."""
    cfg = config
    train = splits.train
    mc = ModelConfig(kind, train.width, train.privileged.shape[1], tuple(cfg.hidden),
                     cfg.shallow_hidden, cfg.shallow_dropout)
    model = init_model(mc, cfg.seed, cfg.batchnorm)
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        for step, lists in enumerate(_batches(train.n_lists, cfg.batch_lists, rng)):
            idx, local = _gather(train, lists)
            y = train.labels[idx]
            tm = ranker.forward(model.main, train.features[idx], train=True, dropout=cfg.dropout, rng=rng)
            ts = ranker.forward(model.shallow, train.privileged[idx], train=True, dropout=cfg.dropout, rng=rng)
            n_lists = len(local) - 1
            gm = np.empty_like(tm.logits)
            gs = np.empty_like(ts.logits)
            total = 0.0
            if kind == "pal":
                for a, b in zip(local[:-1], local[1:]):
                    v, g1, g2 = pal_loss(y[a:b], tm.logits[a:b], ts.logits[a:b])
                    total += v
                    gm[a:b], gs[a:b] = g1 / n_lists, g2 / n_lists
            else:
                scale = dropout_mask(ts.logits.shape, model.dropout_rate, rng)
                dropped = ts.logits * scale
                p = ranker.sigmoid(tm.logits + dropped)
                for a, b in zip(local[:-1], local[1:]):
                    out = point_ce(y[a:b], p[a:b])
                    total += out.value
                    gm[a:b] = out.grad / n_lists
                gs = gm * scale
            _check_finite(total, kind, epoch, step)
            main = ranker.sgd_step(model.main, ranker.backward(tm, model.main, gm), cfg.lr, cfg.weight_decay)
            shallow = ranker.sgd_step(model.shallow, ranker.backward(ts, model.shallow, gs), cfg.lr, cfg.weight_decay)
            model = TwoTower(kind, ranker.update_running_stats(main, tm),
                             ranker.update_running_stats(shallow, ts), model.dropout_rate)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            tlog.add(epoch, "valid", evaluate_ranker(model.main, splits.valid))
    return TrainResult(model, tlog)


# -- methods and sweeps ----------------------------------------------------------

METHODS = ("base", "pridropout", "pal", "base+pointwise", "base+listmle", "base+listnet", "clid")
METHOD_LOSS = {"base+pointwise": "pointwise", "base+listmle": "listmle",
               "base+listnet": "listnet", "clid": "clid"}


def method_config(method, config, weight_ratio=1.0, temperature=1.0):
    """Attach the distillation settings a named method needs."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if method in METHOD_LOSS:
        d = DistillConfig.from_weight_ratio(METHOD_LOSS[method], weight_ratio, temperature)
        return replace(config, distill=d)
    return replace(config, distill=None)


def serving_model(result):
    """Parameters that produce serve-time predictions from V_r."""
    return result.params.main if isinstance(result.params, TwoTower) else result.params


def run_method(method, splits, config, teacher=None, weight_ratio=1.0, temperature=1.0):
    """Train one method and report serve-mode metrics on the test split.

    A teacher is trained on demand for distillation methods under the
    teacher-first protocol when none is supplied.
    """
    cfg = method_config(method, config, weight_ratio, temperature)
    if method in ("pal", "pridropout"):
        res = train_two_tower(splits, cfg, method)
    else:
        if method != "base" and teacher is None and cfg.protocol == "teacher_first":
            teacher = train_teacher(splits, cfg).params
        res = train_student(splits, teacher if method != "base" else None, cfg)
    return evaluate_ranker(serving_model(res), splits.test), res


def weight_ratio_sweep(splits, config, grid=WEIGHT_RATIO_GRID, teacher=None, method="clid",
                       split="test"):
    """One student run per weight ratio, all distilling from the same teacher.

    Returns ``(ratio, report)`` pairs; ``report`` is None where training
    diverged, which ListMLE can do at large ratios since it has no finite
    minimiser.
    """
    grid = list(grid)
    if not grid or any(r <= 0 for r in grid):
        raise ConfigError("grid must be non-empty and positive")
    if teacher is None and config.protocol == "teacher_first":
        teacher = train_teacher(splits, config).params
    out = []
    ds = getattr(splits, split)
    for ratio in grid:
        cfg = method_config(method, config, ratio, config.distill.temperature if config.distill else 1.0)
        try:
            res = train_student(splits, teacher, cfg)
        except TrainingDivergence as exc:
            log.warning("ratio %g diverged: %s", ratio, exc)
            out.append((ratio, None))
            continue
        out.append((ratio, evaluate_ranker(res.params, ds)))
        log.info("ratio %g: ndcg10=%.4f logloss=%.4f", ratio, out[-1][1].ndcg10, out[-1][1].logloss)
    return out


def best_ratio(sweep):
    """Ratio with the highest NDCG@10 among the runs that did not diverge."""
    ok = [(rep.ndcg10, -i, r) for i, (r, rep) in enumerate(sweep) if rep is not None]
    if not ok:
        raise TrainingDivergence("every ratio in the sweep diverged")
    return max(ok)[2]
