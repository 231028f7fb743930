"""Feed-forward scoring network with hand-written forward and backward passes.

A ranker maps a ``(batch, in_dim)`` feature matrix to one logit per row.
Hidden layers are ``linear -> [batchnorm] -> PReLU -> [dropout]``; the last
layer is linear and its output goes through a sigmoid head.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, DataError, ShapeError, TrainingDivergence

SLOPE_INIT = 0.25
BN_EPS = 1e-5

MAGIC = b"PFDR"
FORMAT_VERSION = 1


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class RankerParams:
    layer_dims: tuple
    weights: list
    biases: list
    slopes: list
    # populated only when the net was built with batch normalization
    bn_gamma: list | None = None
    bn_beta: list | None = None
    bn_mean: list | None = None
    bn_var: list | None = None

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def batchnorm(self):
        return self.bn_gamma is not None

    def copy(self):
        cp = lambda xs: None if xs is None else [np.array(x, copy=True) for x in xs]
        return RankerParams(
            tuple(self.layer_dims),
            cp(self.weights),
            cp(self.biases),
            list(self.slopes),
            cp(self.bn_gamma),
            cp(self.bn_beta),
            cp(self.bn_mean),
            cp(self.bn_var),
        )

    def validate(self):
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("number of layers does not match layer_dims")
        if dims[-1] != 1:
            raise ShapeError("final layer must output a single logit")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} has shape {w.shape}/{b.shape}")
        if len(self.slopes) != len(dims) - 2:
            raise ShapeError("one activation slope per hidden layer expected")
        for arr in self.weights + self.biases + [np.asarray(self.slopes)]:
            if not np.all(np.isfinite(arr)):
                raise DataError("non-finite parameter value")
        return self


@dataclass
class ParamGrads:
    """Gradients mirroring the trainable fields of :class:`RankerParams`."""

    weights: list
    biases: list
    slopes: list
    bn_gamma: list | None = None
    bn_beta: list | None = None

    def arrays(self):
        out = list(self.weights) + list(self.biases) + [np.asarray(self.slopes, dtype=float)]
        if self.bn_gamma is not None:
            out += list(self.bn_gamma) + list(self.bn_beta)
        return out

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class ForwardTrace:
    inputs: list  # input to every linear layer
    pre: list  # linear outputs of hidden layers
    normed: list  # batch-normalized pre-activations (== pre without BN)
    inv_std: list
    batch_mean: list
    batch_var: list
    acts: list  # PReLU outputs before dropout
    masks: list  # inverted-dropout multipliers, None when not applied
    logits: np.ndarray
    probs: np.ndarray = field(repr=False)
    train: bool = False


def init_params(layer_dims, seed, batchnorm=False):
    """Draw a fresh set of parameters.

    Weights are ``N(0, 1/fan_in)``, biases zero and every PReLU slope 0.25.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigError(f"invalid layer_dims {layer_dims!r}")
    if dims[-1] != 1:
        raise ConfigError("last layer dimension must be 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    hidden = dims[1:-1]
    params = RankerParams(dims, weights, biases, [SLOPE_INIT] * len(hidden))
    if batchnorm:
        params.bn_gamma = [np.ones(h) for h in hidden]
        params.bn_beta = [np.zeros(h) for h in hidden]
        params.bn_mean = [np.zeros(h) for h in hidden]
        params.bn_var = [np.ones(h) for h in hidden]
    return params


def forward(params, features, *, train=False, dropout=0.0, rng=None):
    """Run the network on a batch and record everything backward needs.

    With ``train=True`` batch normalization uses batch statistics and, if
    ``dropout > 0``, hidden activations are dropped using ``rng``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"expected (batch, {params.layer_dims[0]}) features, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite feature value")
    if train and dropout > 0 and rng is None:
        raise ConfigError("dropout in training mode needs an rng")

    inputs, pre, normed, inv_std, bmean, bvar, acts, masks = ([] for _ in range(8))
    a = x
    for layer in range(params.n_layers - 1):
        inputs.append(a)
        z = a @ params.weights[layer].T + params.biases[layer]
        pre.append(z)
        if params.batchnorm:
            if train:
                mu, var = z.mean(axis=0), z.var(axis=0)
            else:
                mu, var = params.bn_mean[layer], params.bn_var[layer]
            istd = 1.0 / np.sqrt(var + BN_EPS)
            zn = (z - mu) * istd
            h = params.bn_gamma[layer] * zn + params.bn_beta[layer]
            bmean.append(mu)
            bvar.append(var)
            inv_std.append(istd)
        else:
            zn = h = z
            bmean.append(None)
            bvar.append(None)
            inv_std.append(None)
        normed.append(zn)
        act = np.where(h > 0, h, params.slopes[layer] * h)
        acts.append(act)
        if train and dropout > 0:
            mask = (rng.random(act.shape) >= dropout) / (1.0 - dropout)
            a = act * mask
        else:
            mask = None
            a = act
        masks.append(mask)
    inputs.append(a)
    logits = (a @ params.weights[-1].T + params.biases[-1])[:, 0]
    return ForwardTrace(inputs, pre, normed, inv_std, bmean, bvar, acts, masks,
                        logits, sigmoid(logits), train)


def backward(trace, params, dL_dlogit):
    """Backpropagate an upstream gradient on the logits to every parameter."""
    g = np.asarray(dL_dlogit, dtype=np.float64)
    batch = trace.logits.shape[0]
    if g.shape != (batch,):
        raise ShapeError(f"upstream gradient has shape {g.shape}, expected ({batch},)")
    if len(trace.inputs) != params.n_layers:
        raise ShapeError("trace does not match params")

    L = params.n_layers
    dW, db = [None] * L, [None] * L
    dslope = [0.0] * (L - 1)
    dgamma = [None] * (L - 1) if params.batchnorm else None
    dbeta = [None] * (L - 1) if params.batchnorm else None

    delta = g[:, None]
    dW[-1] = delta.T @ trace.inputs[-1]
    db[-1] = delta.sum(axis=0)
    da = delta @ params.weights[-1]
    for layer in range(L - 2, -1, -1):
        if trace.masks[layer] is not None:
            da = da * trace.masks[layer]
        if params.batchnorm:
            h = params.bn_gamma[layer] * trace.normed[layer] + params.bn_beta[layer]
        else:
            h = trace.pre[layer]
        neg = h <= 0
        dslope[layer] = float(np.sum(da * np.where(neg, h, 0.0)))
        dh = np.where(neg, params.slopes[layer] * da, da)
        if params.batchnorm:
            zn = trace.normed[layer]
            dgamma[layer] = np.sum(dh * zn, axis=0)
            dbeta[layer] = dh.sum(axis=0)
            dzn = dh * params.bn_gamma[layer]
            istd = trace.inv_std[layer]
            if trace.train:
                m = dzn.shape[0]
                dz = istd / m * (m * dzn - dzn.sum(axis=0) - zn * np.sum(dzn * zn, axis=0))
            else:
                dz = dzn * istd
        else:
            dz = dh
        dW[layer] = dz.T @ trace.inputs[layer]
        db[layer] = dz.sum(axis=0)
        if layer > 0:
            da = dz @ params.weights[layer]
    return ParamGrads(dW, db, dslope, dgamma, dbeta)


def sgd_step(params, grads, lr, weight_decay=0.0):
    """One gradient-descent update; weight decay touches weight matrices only."""
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    if weight_decay < 0:
        raise ConfigError("weight decay must be non-negative")
    if not grads.all_finite():
        raise TrainingDivergence("non-finite gradient")
    new = params.copy()
    for i in range(params.n_layers):
        new.weights[i] = params.weights[i] - lr * (grads.weights[i] + weight_decay * params.weights[i])
        new.biases[i] = params.biases[i] - lr * grads.biases[i]
    new.slopes = [s - lr * gs for s, gs in zip(params.slopes, grads.slopes)]
    if params.batchnorm:
        new.bn_gamma = [p - lr * d for p, d in zip(params.bn_gamma, grads.bn_gamma)]
        new.bn_beta = [p - lr * d for p, d in zip(params.bn_beta, grads.bn_beta)]
    return new


def update_running_stats(params, trace, momentum=0.1):
    """Fold the batch statistics of a training trace into the BN running averages."""
    if not params.batchnorm or not trace.train:
        return params
    new = params.copy()
    for i in range(params.n_layers - 1):
        new.bn_mean[i] = (1 - momentum) * params.bn_mean[i] + momentum * trace.batch_mean[i]
        new.bn_var[i] = (1 - momentum) * params.bn_var[i] + momentum * trace.batch_var[i]
    return new


def predict_logits(params, features):
    return forward(params, features).logits


# -- flat views, used by gradient checks ---------------------------------------

def _trainable(p):
    out = list(p.weights) + list(p.biases) + [np.asarray(p.slopes, dtype=float)]
    if p.batchnorm:
        out += list(p.bn_gamma) + list(p.bn_beta)
    return out


def params_to_vector(params):
    return np.concatenate([a.ravel() for a in _trainable(params)])


def grads_to_vector(grads):
    return np.concatenate([np.ravel(a) for a in grads.arrays()])


def vector_to_params(template, vec):
    """Inverse of :func:`params_to_vector`, reusing ``template``'s running stats."""
    new = template.copy()
    arrays = _trainable(new)
    off = 0
    for a in arrays:
        a[...] = np.reshape(vec[off:off + a.size], a.shape)
        off += a.size
    L = new.n_layers
    new.weights = arrays[:L]
    new.biases = arrays[L:2 * L]
    new.slopes = [float(s) for s in arrays[2 * L]]
    if new.batchnorm:
        h = L - 1
        new.bn_gamma = arrays[2 * L + 1:2 * L + 1 + h]
        new.bn_beta = arrays[2 * L + 1 + h:]
    return new


# -- checkpoint container ------------------------------------------------------

def _write_f64(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(fh, count):
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise DataError("truncated checkpoint")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64)


def dump_params(params, fh: BinaryIO):
    """Serialize to the binary ``PFDR`` container.

    Layout: magic, version byte, flags byte (bit 0 = batchnorm), uint32 layer
    count, uint32 dims, then float64 little-endian arrays in row-major order:
    every (weight, bias) pair, the slopes, and per hidden layer
    (gamma, beta, running mean, running var) when batchnorm is set.
    """
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", FORMAT_VERSION, 1 if params.batchnorm else 0))
    fh.write(struct.pack("<I", len(params.layer_dims)))
    fh.write(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
    for w, b in zip(params.weights, params.biases):
        _write_f64(fh, w)
        _write_f64(fh, b)
    _write_f64(fh, np.asarray(params.slopes, dtype=float))
    if params.batchnorm:
        for i in range(params.n_layers - 1):
            for arr in (params.bn_gamma[i], params.bn_beta[i], params.bn_mean[i], params.bn_var[i]):
                _write_f64(fh, arr)


def load_params(fh: BinaryIO):
    if fh.read(4) != MAGIC:
        raise DataError("not a PFDR checkpoint")
    version, flags = struct.unpack("<BB", fh.read(2))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    if flags & ~1:
        raise DataError(f"unknown checkpoint flags {flags:#04x}")
    (count,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{count}I", fh.read(4 * count))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(_read_f64(fh, fan_in * fan_out).reshape(fan_out, fan_in))
        biases.append(_read_f64(fh, fan_out))
    slopes = [float(s) for s in _read_f64(fh, count - 2)]
    params = RankerParams(tuple(dims), weights, biases, slopes)
    if flags & 1:
        params.bn_gamma, params.bn_beta, params.bn_mean, params.bn_var = [], [], [], []
        for h in dims[1:-1]:
            params.bn_gamma.append(_read_f64(fh, h))
            params.bn_beta.append(_read_f64(fh, h))
            params.bn_mean.append(_read_f64(fh, h))
            params.bn_var.append(_read_f64(fh, h))
    return params.validate()


def save_params(params, path):
    with open(path, "wb") as fh:
        dump_params(params, fh)


def read_params(path):
    with open(path, "rb") as fh:
        return load_params(fh)


def params_to_bytes(params):
    buf = io.BytesIO()
    dump_params(params, buf)
    return buf.getvalue()
