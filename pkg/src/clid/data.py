"""Ranking data: SVMLight ingestion, query grouping, privileged context, synthetic clicks."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .ranker import sigmoid


@dataclass(frozen=True)
class Sample:
    qid: int
    raw_grade: int
    features: np.ndarray = field(compare=False)

    @property
    def label(self):
        return 1 if self.raw_grade > 0 else 0

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.qid == other.qid
                and self.raw_grade == other.raw_grade
                and np.array_equal(self.features, other.features))

    __hash__ = None


@dataclass(frozen=True)
class QueryList:
    qid: int
    samples: tuple

    def __len__(self):
        return len(self.samples)

    @property
    def features(self):
        return np.vstack([s.features for s in self.samples])

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.float64)


def binarize(grades):
    """Graded relevance 1-4 becomes a click, grade 0 a non-click."""
    return (np.asarray(grades) > 0).astype(np.float64)


def _lines(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            yield from fh
    else:
        yield from source


def parse_svmlight(source, width=None):
    """Read ``<grade> qid:<int> <fid>:<value> ...`` lines into samples.

    ``source`` is a path or any iterable of ``bytes``/``str`` lines. Feature
    ids are 1-based; missing ids densify to 0.0. Without ``width`` the dense
    width is the largest feature id in the file.
    """
    rows = []
    for lineno, raw in enumerate(_lines(source), start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            grade = int(fields[0])
            key, qid = fields[1].split(":", 1)
            if key != "qid":
                raise ValueError("second field must be qid:<int>")
            qid = int(qid)
            feats = {}
            for tok in fields[2:]:
                fid, val = tok.split(":", 1)
                fid = int(fid)
                if fid < 1:
                    raise ValueError(f"feature id {fid} is not 1-based")
                feats[fid] = float(val)
        except (ValueError, IndexError) as exc:
            raise ParseError(lineno, str(exc)) from None
        if grade < 0:
            raise ParseError(lineno, f"negative grade {grade}")
        rows.append((qid, grade, feats))

    if width is None:
        width = max((max(f) for _, _, f in rows if f), default=0)
    samples = []
    for qid, grade, feats in rows:
        x = np.zeros(width)
        for fid, val in feats.items():
            if fid > width:
                raise DataError(f"feature id {fid} exceeds width {width}")
            x[fid - 1] = val
        samples.append(Sample(qid, grade, x))
    return samples


def format_svmlight(samples):
    """Inverse of :func:`parse_svmlight`; zeros are written as explicit entries."""
    out = io.StringIO()
    for s in samples:
        feats = " ".join(f"{i + 1}:{float(v)!r}" for i, v in enumerate(s.features))
        out.write(f"{s.raw_grade} qid:{s.qid} {feats}\n")
    return out.getvalue()


def log1p_transform(x):
    """Signed log transform ``sign(x) * log(1 + |x|)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def group_by_qid(samples):
    """Group samples into lists, ordered by first appearance of each qid."""
    groups = {}
    for s in samples:
        groups.setdefault(s.qid, []).append(s)
    return [QueryList(qid, tuple(members)) for qid, members in groups.items()]


def context_mean(x):
    """Mean of the *other* rows of ``x`` for every row; zeros for a single row."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return np.zeros_like(x)
    return (x.sum(axis=0, keepdims=True) - x) / (n - 1)


@dataclass(frozen=True)
class Representation:
    regular: np.ndarray  # V_r, the serving-time input
    privileged: np.ndarray  # V_p, contextual mean
    teacher: np.ndarray  # V_t = [V_r, V_p]


def build_privileged(qlist):
    """Representation vectors for every sample of one list."""
    x = qlist.features if isinstance(qlist, QueryList) else np.asarray(qlist, dtype=np.float64)
    vp = context_mean(x)
    return Representation(x, vp, np.hstack([x, vp]))


@dataclass
class ListDataset:
    """Samples stored contiguously by list, with offsets marking list bounds."""

    features: np.ndarray
    labels: np.ndarray
    qids: np.ndarray
    offsets: np.ndarray
    privileged: np.ndarray | None = None
    grades: np.ndarray | None = None
    true_prob: np.ndarray | None = None

    def __post_init__(self):
        n = self.features.shape[0]
        if self.offsets[0] != 0 or self.offsets[-1] != n:
            raise DataError("offsets must span all samples")
        if self.labels.shape != (n,) or self.qids.shape != (n,):
            raise DataError("labels/qids length mismatch")

    @property
    def n_lists(self):
        return len(self.offsets) - 1

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    def list_sizes(self):
        return np.diff(self.offsets)

    def slices(self):
        return [slice(a, b) for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    @property
    def teacher_features(self):
        if self.privileged is None:
            raise DataError("privileged vectors not built")
        return np.hstack([self.features, self.privileged])

    def subset(self, list_indices):
        """New dataset holding the given lists, in the given order."""
        sl = self.slices()
        idx = np.concatenate([np.arange(sl[i].start, sl[i].stop) for i in list_indices]) \
            if len(list_indices) else np.zeros(0, dtype=int)
        sizes = [sl[i].stop - sl[i].start for i in list_indices]
        take = lambda a: None if a is None else a[idx]
        return ListDataset(self.features[idx], self.labels[idx], self.qids[idx],
                           np.concatenate([[0], np.cumsum(sizes)]).astype(int),
                           take(self.privileged), take(self.grades), take(self.true_prob))

    @classmethod
    def from_samples(cls, samples, transform=True, privileged=True):
        """Group, optionally log1p-transform, then pool contextual features."""
        lists = group_by_qid(samples)
        if not lists:
            width = 0
            return cls(np.zeros((0, width)), np.zeros(0), np.zeros(0, dtype=np.int64),
                       np.zeros(1, dtype=int), np.zeros((0, width)) if privileged else None,
                       np.zeros(0, dtype=np.int64))
        feats, grades, qids, sizes, priv = [], [], [], [], []
        for ql in lists:
            x = ql.features
            if transform:
                x = log1p_transform(x)
            feats.append(x)
            if privileged:
                priv.append(context_mean(x))
            grades.extend(s.raw_grade for s in ql.samples)
            qids.extend([ql.qid] * len(ql))
            sizes.append(len(ql))
        grades = np.array(grades, dtype=np.int64)
        return cls(np.vstack(feats), binarize(grades), np.array(qids, dtype=np.int64),
                   np.concatenate([[0], np.cumsum(sizes)]).astype(int),
                   np.vstack(priv) if privileged else None, grades)

    def to_samples(self):
        grades = self.grades if self.grades is not None else self.labels.astype(np.int64)
        return [Sample(int(q), int(g), self.features[i].copy())
                for i, (q, g) in enumerate(zip(self.qids, grades))]


def load_svmlight_dataset(path, width=None, transform=True):
    return ListDataset.from_samples(parse_svmlight(path, width), transform=transform)


SPLIT_FILES = ("train.txt", "vali.txt", "test.txt")


def load_split_dir(directory, transform=True):
    """Train/validation/test datasets from a fold directory, padded to a common width."""
    parsed = [parse_svmlight(Path(directory) / name) for name in SPLIT_FILES]
    width = max((s.features.size for part in parsed for s in part), default=0)
    out = []
    for part in parsed:
        padded = [Sample(s.qid, s.raw_grade, np.pad(s.features, (0, width - s.features.size)))
                  for s in part]
        out.append(ListDataset.from_samples(padded, transform=transform))
    return tuple(out)


# -- synthetic contextual clicks -------------------------------------------------

@dataclass
class SyntheticData:
    """Raw synthetic samples plus the latent generator parameters."""

    samples: list
    true_prob: np.ndarray
    weight: np.ndarray
    context_weight: np.ndarray
    bias: float
    meta: dict

    def dataset(self, transform=False):
        ds = ListDataset.from_samples(self.samples, transform=transform)
        ds.true_prob = self.true_prob.copy()
        return ds


def gen_synthetic(num_queries, docs_per_query, feat_dim, context_strength, seed,
                  weight_scale=1.0, bias=0.0, first_qid=1, context_scale=None):
    """Draw lists whose click probability depends on the other documents.

    Every document has i.i.d. standard-normal features and clicks with
    probability ``sigmoid(w.x_i + context_strength * w_c.mean_{j!=i} x_j + b)``.
    ``docs_per_query`` is an int or an inclusive ``(lo, hi)`` range. The
    latent ``w`` is drawn from ``N(0, weight_scale**2 / feat_dim)`` so its norm
    is close to ``weight_scale``; ``w_c`` likewise with ``context_scale``
    (defaults to ``weight_scale``).
    """
    lo, hi = (docs_per_query, docs_per_query) if np.isscalar(docs_per_query) else docs_per_query
    if num_queries < 1:
        raise ConfigError("num_queries must be positive")
    if feat_dim < 2:
        raise ConfigError("feat_dim must be at least 2")
    if lo < 2 or hi < lo:
        raise ConfigError("docs_per_query range must satisfy 2 <= lo <= hi")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(feat_dim) * weight_scale / np.sqrt(feat_dim)
    if context_scale is None:
        context_scale = weight_scale
    w_c = rng.standard_normal(feat_dim) * context_scale / np.sqrt(feat_dim)
    samples, probs = [], []
    for q in range(num_queries):
        n = int(rng.integers(lo, hi + 1))
        x = rng.standard_normal((n, feat_dim))
        logit = x @ w + context_strength * (context_mean(x) @ w_c) + bias
        p = sigmoid(logit)
        y = (rng.random(n) < p).astype(int)
        for i in range(n):
            samples.append(Sample(first_qid + q, int(y[i]), x[i]))
        probs.append(p)
    meta = {
        "seed": seed,
        "num_queries": num_queries,
        "docs_min": lo,
        "docs_max": hi,
        "feat_dim": feat_dim,
        "context_strength": context_strength,
        "weight_scale": weight_scale,
        "context_scale": context_scale,
        "bias": bias,
        "weight": w,
        "context_weight": w_c,
    }
    return SyntheticData(samples, np.concatenate(probs) if probs else np.zeros(0),
                         w, w_c, float(bias), meta)


def split_lists(n_lists, fractions=(0.6, 0.2, 0.2)):
    """Contiguous query-disjoint index ranges with the given proportions."""
    n_train = int(round(fractions[0] * n_lists))
    n_val = int(round(fractions[1] * n_lists))
    return (np.arange(0, n_train), np.arange(n_train, n_train + n_val),
            np.arange(n_train + n_val, n_lists))


def format_meta(meta):
    """Flat ``key=value`` text; arrays become comma-separated reprs."""
    lines = []
    for key, val in meta.items():
        if isinstance(val, np.ndarray):
            val = ",".join(repr(float(v)) for v in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def write_meta(path, meta):
    Path(path).write_text(format_meta(meta), encoding="utf-8")


def read_meta(path):
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    return meta


def _vector(val):
    if isinstance(val, str):
        return np.array([float(v) for v in val.split(",")])
    return np.asarray(val, dtype=np.float64)


def recover_true_prob(samples, meta):
    """Recompute latent click probabilities of raw samples from a sidecar."""
    w, w_c = _vector(meta["weight"]), _vector(meta["context_weight"])
    strength = float(meta["context_strength"])
    b = float(meta["bias"])
    out = []
    for ql in group_by_qid(samples):
        x = ql.features
        out.append(sigmoid(x @ w + strength * (context_mean(x) @ w_c) + b))
    return np.concatenate(out) if out else np.zeros(0)
