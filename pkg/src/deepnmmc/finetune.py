"""Top-layer refinement as a classification RBM.

The top RBM of the stack and the clustering weights are fused into one
model over (input, hidden, label) with energy

    E(x, h, z) = -x^T W h - b^T x - c^T h - d_z - h^T U e_z

and trained by CD-1 on (input, cluster label) pairs. Labels for new inputs
come from the closed-form posterior p(z | x).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .dbn import Dbn, encode
from .rbm import CdConfig, Rbm, logistic, rbm_from_bytes, rbm_to_bytes, sample_bernoulli

_CLASS_MAGIC = b"DNCRBM\x00\x00"
_FORMAT_VERSION = 1


@dataclass
class ClassRbm:
    """Top RBM parameters plus label weights ``U`` (n x K) and label bias ``d`` (K)."""

    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    label_weights: np.ndarray
    label_bias: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.visible_bias = np.array(self.visible_bias, dtype=np.float64, ndmin=1)
        self.hidden_bias = np.array(self.hidden_bias, dtype=np.float64, ndmin=1)
        self.label_weights = np.array(self.label_weights, dtype=np.float64, ndmin=2)
        self.label_bias = np.array(self.label_bias, dtype=np.float64, ndmin=1)
        m, n = self.weights.shape
        k = self.label_bias.shape[0]
        if k < 1:
            raise ValueError("need at least one label")
        if (self.visible_bias.shape != (m,) or self.hidden_bias.shape != (n,)
                or self.label_weights.shape != (n, k)):
            raise ValueError("classification RBM parameter shapes are inconsistent")

    @property
    def n_labels(self) -> int:
        return self.label_bias.shape[0]

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    def top_rbm(self) -> Rbm:
        return Rbm(self.weights.copy(), self.visible_bias.copy(), self.hidden_bias.copy())

    def copy(self) -> "ClassRbm":
        return ClassRbm(self.weights.copy(), self.visible_bias.copy(), self.hidden_bias.copy(),
                        self.label_weights.copy(), self.label_bias.copy())


def init_class_rbm(top_layer: Rbm, thetas, K: int | None = None) -> ClassRbm:
    """Copy the top RBM and use each clustering weight vector as a label-weight column."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if K is None:
        K = thetas.shape[0]
    if thetas.shape != (K, top_layer.n_hidden):
        raise ValueError(
            f"expected {K} weight vectors of length {top_layer.n_hidden}, got shape {thetas.shape}"
        )
    return ClassRbm(top_layer.weights.copy(), top_layer.visible_bias.copy(),
                    top_layer.hidden_bias.copy(), thetas.T.copy(), np.zeros(K))


def label_log_posterior(model: ClassRbm, x) -> np.ndarray:
    """log p(z | x) for a vector (shape K) or a batch of rows (shape B x K)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_visible:
        raise ValueError(f"input has length {x.shape[-1]}, expected {model.n_visible}")
    act = x @ model.weights + model.hidden_bias
    # softplus summed over hidden units, for every label
    logits = model.label_bias + np.logaddexp(0.0, act[..., :, None] + model.label_weights).sum(axis=-2)
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def predict_label_probs(model: ClassRbm, x) -> np.ndarray:
    return np.exp(label_log_posterior(model, x))


def class_rbm_cd_step(model: ClassRbm, x, z, lr: float, rng: np.random.Generator) -> ClassRbm:
    """One CD-1 update of the joint model on a pair (or batch of pairs), in place.

    Negative phase: sample h from p(h | x, z); reconstruct x as logistic
    probabilities and draw z from its softmax; finish with hidden
    probabilities given the reconstruction.
    """
    x0 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z0 = np.atleast_1d(np.asarray(z, dtype=np.int64))
    if x0.shape[1] != model.n_visible or z0.shape[0] != x0.shape[0]:
        raise ValueError("inputs and labels do not match the model")
    if (z0 < 0).any() or (z0 >= model.n_labels).any():
        raise ValueError(f"labels must lie in 0..{model.n_labels - 1}")
    size = x0.shape[0]
    k = model.n_labels
    y0 = np.eye(k)[z0]

    h0 = logistic(x0 @ model.weights + model.hidden_bias + y0 @ model.label_weights.T)
    h_sample = sample_bernoulli(h0, rng)
    x1 = logistic(h_sample @ model.weights.T + model.visible_bias)
    py = softmax(model.label_bias + h_sample @ model.label_weights, axis=1)
    u = rng.random((size, 1))
    z1 = np.minimum((np.cumsum(py, axis=1) < u).sum(axis=1), k - 1)
    y1 = np.eye(k)[z1]
    h1 = logistic(x1 @ model.weights + model.hidden_bias + y1 @ model.label_weights.T)

    step = lr / size
    model.weights += step * (x0.T @ h0 - x1.T @ h1)
    model.visible_bias += step * (x0.sum(axis=0) - x1.sum(axis=0))
    model.hidden_bias += step * (h0.sum(axis=0) - h1.sum(axis=0))
    model.label_weights += step * (h0.T @ y0 - h1.T @ y1)
    model.label_bias += step * (y0.sum(axis=0) - y1.sum(axis=0))
    return model


def top_layer_inputs(dbn: Dbn, data) -> np.ndarray:
    """Activations feeding the top RBM: the raw data for a 1-layer stack."""
    x = np.asarray(getattr(data, "instances", data), dtype=np.float64)
    lower = dbn.lower()
    if lower is None:
        return x
    return np.vstack([encode(lower, row) for row in x]) if len(x) else np.empty((0, lower.layer_sizes[-1]))


def finetune(dbn: Dbn, thetas, codes_input, labels, config: CdConfig = CdConfig()) -> ClassRbm:
    """Train the classification RBM on (top-layer input, cluster label) pairs.

    Lower layers of ``dbn`` are not touched; the returned model replaces the
    top layer for prediction.
    """
    x = np.asarray(codes_input, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != labels.shape[0]:
        raise ValueError("need one label per input row")
    model = init_class_rbm(dbn.top, thetas)
    rng = np.random.default_rng(config.seed)
    n = x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            class_rbm_cd_step(model, x[idx], labels[idx], config.learning_rate, rng)
    return model


def predict_pipeline(dbn: Dbn, model: ClassRbm, v) -> int:
    """Most probable label for a raw input vector (lowest label on ties)."""
    v = np.asarray(v, dtype=np.float64)
    lower = dbn.lower()
    x = v if lower is None else encode(lower, v)
    return int(np.argmax(label_log_posterior(model, x)))


def predict_batch(dbn: Dbn, model: ClassRbm, data) -> np.ndarray:
    x = top_layer_inputs(dbn, data)
    return np.argmax(label_log_posterior(model, x), axis=1)


def class_rbm_to_bytes(model: ClassRbm) -> bytes:
    # The top-RBM record followed by u32 K, U (n*K row-major) and d (K).
    buf = _CLASS_MAGIC + struct.pack("<I", _FORMAT_VERSION)
    buf += rbm_to_bytes(model.top_rbm())
    buf += struct.pack("<I", model.n_labels)
    buf += np.ascontiguousarray(model.label_weights, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(model.label_bias, dtype="<f8").tobytes()
    return buf


def class_rbm_from_bytes(buf: bytes) -> ClassRbm:
    if buf[:8] != _CLASS_MAGIC:
        raise ValueError("not a classification-RBM checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    top, pos = rbm_from_bytes(buf, 12)
    (k,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    n = top.n_hidden
    u = np.frombuffer(buf, dtype="<f8", count=n * k, offset=pos).reshape(n, k).astype(np.float64)
    pos += 8 * n * k
    d = np.frombuffer(buf, dtype="<f8", count=k, offset=pos).astype(np.float64)
    return ClassRbm(top.weights, top.visible_bias, top.hidden_bias, u, d)


def save_class_rbm(model: ClassRbm, path):
    with open(path, "wb") as fh:
        fh.write(class_rbm_to_bytes(model))


def load_class_rbm(path) -> ClassRbm:
    with open(path, "rb") as fh:
        return class_rbm_from_bytes(fh.read())
