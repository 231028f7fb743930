"""Teacher, student and the two shallow-tower baselines built from rankers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ranker
from .errors import ConfigError, ShapeError
from .ranker import sigmoid

MODEL_KINDS = ("base", "teacher", "student", "pal", "pridropout")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    regular_width: int
    privileged_width: int
    hidden: tuple = (64, 32)
    shallow_hidden: int = 256
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def main_dims(self):
        """Main tower over V_r (students, base and the baselines' main tower)."""
        return (self.regular_width, *self.hidden, 1)

    @property
    def teacher_dims(self):
        """Same hidden layers, fed with V_t = [V_r, V_p]."""
        return (self.regular_width + self.privileged_width, *self.hidden, 1)

    @property
    def shallow_dims(self):
        if self.kind not in ("pal", "pridropout"):
            return None
        return (self.privileged_width, self.shallow_hidden, 1)

    @property
    def input_dims(self):
        return self.teacher_dims if self.kind == "teacher" else self.main_dims


def _check_width(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"input width {x.shape[-1]} != model width {params.layer_dims[0]}")
    return x


def score_teacher(params, teacher_features):
    return ranker.forward(params, _check_width(params, teacher_features)).probs


def score_student(params, regular_features):
    return ranker.forward(params, _check_width(params, regular_features)).probs


def score_pal(main_params, shallow_params, regular, privileged, mode="serve"):
    """Train: product of shallow and main tower probabilities. Serve: main tower only."""
    p_main = score_student(main_params, regular)
    if mode == "serve":
        return p_main
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'serve', got {mode!r}")
    return score_student(shallow_params, privileged) * p_main


def dropout_mask(shape, rate, rng):
    """Inverted-dropout multipliers: 0 for dropped entries, 1/(1-rate) for kept."""
    if rate == 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout_logit(s_shallow, rate, rng):
    """Inverted dropout on the shallow tower's per-sample logit."""
    return s_shallow * dropout_mask(s_shallow.shape, rate, rng)


def score_pridropout(main_params, shallow_params, regular, privileged, mode="serve",
                     dropout_rate=0.5, seed=None):
    """Train: sigmoid(main logit + dropped-out shallow logit). Serve: main tower only."""
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError("dropout_rate must lie in [0, 1)")
    s_main = ranker.forward(main_params, _check_width(main_params, regular)).logits
    if mode == "serve":
        return sigmoid(s_main)
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'serve', got {mode!r}")
    s_shallow = ranker.forward(shallow_params, _check_width(shallow_params, privileged)).logits
    rng = np.random.default_rng(seed)
    return sigmoid(s_main + dropout_logit(s_shallow, dropout_rate, rng))


# -- two-tower losses with gradients for both towers ----------------------------

def pal_loss(y, s_main, s_shallow):
    """Mean PointCE on the product probability; gradients w.r.t. both logits."""
    y = np.asarray(y, dtype=np.float64)
    pm, ps = sigmoid(s_main), sigmoid(s_shallow)
    p = pm * ps
    n = y.size
    floor = 1e-7
    value = -np.mean(y * np.log(np.clip(p, floor, 1)) + (1 - y) * np.log(np.clip(1 - p, floor, 1)))
    # dL/ds_main = (p - y) (1 - pm) / (1 - p), symmetric for the shallow tower
    common = (p - y) / np.maximum(1 - p, floor) / n
    return float(value), common * (1 - pm), common * (1 - ps)


@dataclass
class TwoTower:
    """Parameters of a PAL or PriDropOut model."""

    kind: str
    main: ranker.RankerParams
    shallow: ranker.RankerParams
    dropout_rate: float = 0.5
    meta: dict = field(default_factory=dict)

    def serve(self, regular):
        return score_student(self.main, regular)


def init_model(config, seed, batchnorm=False):
    """Initialise the parameters a model kind needs.

    Student and base share ``seed`` and dims, so they start from identical
    weights; the comparison between them isolates the distillation term.
    """
    bn = batchnorm
    if config.kind in ("pal", "pridropout"):
        main = ranker.init_params(config.main_dims, seed, bn)
        shallow = ranker.init_params(config.shallow_dims, seed + 7919, bn)
        return TwoTower(config.kind, main, shallow, config.dropout_rate)
    return ranker.init_params(config.input_dims, seed, bn)
