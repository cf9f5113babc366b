"""Bernoulli restricted Boltzmann machine trained with contrastive divergence.

Weights are stored visible-by-hidden, ``W[i, j]`` connects visible unit i to
hidden unit j, so the energy is ``-v^T W h - b^T v - c^T h``.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

logistic = expit

MAX_ENUMERATION_UNITS = 20

_RBM_MAGIC = b"DNRBM\x00\x00\x00"
_FORMAT_VERSION = 1


class CapacityError(ValueError):
    """The model is too large for exhaustive enumeration."""


@dataclass
class Rbm:
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.visible_bias = np.array(self.visible_bias, dtype=np.float64, ndmin=1)
        self.hidden_bias = np.array(self.hidden_bias, dtype=np.float64, ndmin=1)
        d, n = self.weights.shape
        if d < 1 or n < 1:
            raise ValueError("an RBM needs at least one visible and one hidden unit")
        if self.visible_bias.shape != (d,) or self.hidden_bias.shape != (n,):
            raise ValueError(
                f"bias shapes {self.visible_bias.shape}, {self.hidden_bias.shape} "
                f"do not match weights {self.weights.shape}"
            )

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int) -> "Rbm":
        return cls(np.zeros((n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "Rbm":
        return Rbm(self.weights.copy(), self.visible_bias.copy(), self.hidden_bias.copy())

    def parameters(self):
        return self.weights, self.visible_bias, self.hidden_bias


@dataclass(frozen=True)
class CdConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    cd_steps: int = 1
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _check_len(vec, size, what):
    if vec.shape[-1] != size:
        raise ValueError(f"{what} has length {vec.shape[-1]}, expected {size}")


def energy(model: Rbm, v, h) -> float:
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    _check_len(v, model.n_visible, "v")
    _check_len(h, model.n_hidden, "h")
    return float(-(v @ model.weights @ h) - model.visible_bias @ v - model.hidden_bias @ h)


def prob_h_given_v(model: Rbm, v) -> np.ndarray:
    """Hidden activation probabilities; ``v`` may be a vector or a batch of rows."""
    v = np.asarray(v, dtype=np.float64)
    _check_len(v, model.n_visible, "v")
    return logistic(v @ model.weights + model.hidden_bias)


def prob_v_given_h(model: Rbm, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    _check_len(h, model.n_hidden, "h")
    return logistic(h @ model.weights.T + model.visible_bias)


def sample_bernoulli(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(p.shape) < p).astype(np.float64)


def cd_step(model: Rbm, batch, config: CdConfig, rng: np.random.Generator):
    """Apply one CD-k update to ``model`` in place.

    The positive phase clamps the (real-valued) batch and uses hidden
    probabilities. The negative chain samples h, then v, ``cd_steps`` times;
    the final hidden statistics use probabilities.

    Returns:
        (model, reconstruction_error): the same model object, and the mean
        squared difference between the batch and the first reconstruction
        probabilities.
    """
    v0 = np.asarray(batch, dtype=np.float64)
    if v0.ndim == 1:
        v0 = v0[None, :]
    if v0.shape[0] == 0:
        raise ValueError("cannot take a CD step on an empty batch")
    _check_len(v0, model.n_visible, "batch rows")
    size = v0.shape[0]

    ph0 = prob_h_given_v(model, v0)
    ph = ph0
    recon = None
    for _ in range(config.cd_steps):
        h = sample_bernoulli(ph, rng)
        pv = prob_v_given_h(model, h)
        if recon is None:
            recon = pv
        v = sample_bernoulli(pv, rng)
        ph = prob_h_given_v(model, v)

    lr = config.learning_rate / size
    model.weights += lr * (v0.T @ ph0 - v.T @ ph)
    model.visible_bias += lr * (v0.sum(axis=0) - v.sum(axis=0))
    model.hidden_bias += lr * (ph0.sum(axis=0) - ph.sum(axis=0))
    return model, float(np.mean((v0 - recon) ** 2))


def _binary_configs(k: int) -> np.ndarray:
    return np.array(list(itertools.product((0.0, 1.0), repeat=k)), dtype=np.float64).reshape(-1, k)


def _check_enumerable(model: Rbm):
    if model.n_visible + model.n_hidden > MAX_ENUMERATION_UNITS:
        raise CapacityError(
            f"enumeration needs d + n <= {MAX_ENUMERATION_UNITS}, "
            f"got {model.n_visible} + {model.n_hidden}"
        )


def _joint_table(model: Rbm):
    # Negative energies of every binary (v, h) pair, shape (2**d, 2**n).
    vs = _binary_configs(model.n_visible)
    hs = _binary_configs(model.n_hidden)
    neg_e = vs @ model.weights @ hs.T + (vs @ model.visible_bias)[:, None] + (hs @ model.hidden_bias)[None, :]
    return vs, hs, neg_e


def exact_log_likelihood(model: Rbm, data) -> float:
    """Mean log p(v) over ``data`` by summing every joint configuration."""
    _check_enumerable(model)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    vs, hs, neg_e = _joint_table(model)
    log_z = logsumexp(neg_e)
    data_neg_e = data @ model.weights @ hs.T + (data @ model.visible_bias)[:, None] + (hs @ model.hidden_bias)[None, :]
    return float(np.mean(logsumexp(data_neg_e, axis=1)) - log_z)


def exact_gradient(model: Rbm, data):
    """Exact gradient of the mean log-likelihood via full enumeration.

    Both the data-dependent and the model expectations are taken over
    enumerated hidden (and, for the model term, visible) configurations
    weighted by ``exp(-energy)``; the factorised conditionals are not used.

    Returns:
        (dW, db, dc) with the shapes of the model parameters.
    """
    _check_enumerable(model)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _check_len(data, model.n_visible, "data rows")
    vs, hs, neg_e = _joint_table(model)

    p_joint = np.exp(neg_e - logsumexp(neg_e))
    p_v = p_joint.sum(axis=1)
    p_h = p_joint.sum(axis=0)
    model_vh = vs.T @ p_joint @ hs
    model_v = p_v @ vs
    model_h = p_h @ hs

    data_neg_e = data @ model.weights @ hs.T + (hs @ model.hidden_bias)[None, :]
    post_h = np.exp(data_neg_e - logsumexp(data_neg_e, axis=1, keepdims=True)) @ hs
    size = data.shape[0]
    data_vh = data.T @ post_h / size
    data_v = data.mean(axis=0)
    data_h = post_h.mean(axis=0)
    return data_vh - model_vh, data_v - model_v, data_h - model_h


def init_rbm(n_visible: int, n_hidden: int, rng: np.random.Generator, scale: float = 0.01) -> Rbm:
    weights = scale * rng.standard_normal((n_visible, n_hidden))
    return Rbm(weights, np.zeros(n_visible), np.zeros(n_hidden))


def train_rbm(data, n_hidden: int, config: CdConfig = CdConfig(), callback=None) -> Rbm:
    """Train an RBM with minibatch CD-k on shuffled data.

    ``data`` is a matrix (or anything with an ``instances`` attribute).
    ``callback(epoch, mean_error)`` is invoked after every epoch if given.
    """
    x = np.asarray(getattr(data, "instances", data), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training data must be a non-empty matrix")
    rng = np.random.default_rng(config.seed)
    model = init_rbm(x.shape[1], n_hidden, rng)
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        errors = []
        for start in range(0, n, config.batch_size):
            _, err = cd_step(model, x[order[start:start + config.batch_size]], config, rng)
            errors.append(err)
        if callback is not None:
            callback(epoch, float(np.mean(errors)))
    return model


# Checkpoint layout (little-endian): 8-byte magic, u32 version, u32 d, u32 n,
# then W (d*n, row-major), b (d), c (n) as float64.

def rbm_to_bytes(model: Rbm) -> bytes:
    head = _RBM_MAGIC + struct.pack("<III", _FORMAT_VERSION, model.n_visible, model.n_hidden)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.parameters())
    return head + body


def rbm_from_bytes(buf: bytes, offset: int = 0):
    """Parse one RBM record starting at ``offset``; returns (model, next_offset)."""
    if buf[offset:offset + 8] != _RBM_MAGIC:
        raise ValueError("not an RBM checkpoint (bad magic)")
    version, d, n = struct.unpack_from("<III", buf, offset + 8)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported RBM checkpoint version {version}")
    pos = offset + 20
    arrays = []
    for count in (d * n, d, n):
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
        arrays.append(arr.astype(np.float64))
        pos += 8 * count
    return Rbm(arrays[0].reshape(d, n), arrays[1], arrays[2]), pos


def save_rbm(model: Rbm, path):
    with open(path, "wb") as fh:
        fh.write(rbm_to_bytes(model))


def load_rbm(path) -> Rbm:
    with open(path, "rb") as fh:
        model, _ = rbm_from_bytes(fh.read())
    return model
