"""Greedy layer-wise stack of RBMs used as a deterministic encoder."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from .rbm import CdConfig, Rbm, logistic, rbm_from_bytes, rbm_to_bytes, train_rbm

_DBN_MAGIC = b"DNDBN\x00\x00\x00"
_FORMAT_VERSION = 1


@dataclass
class Dbn:
    layers: List[Rbm]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DBN needs at least one layer")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if lower.n_hidden != upper.n_visible:
                raise ValueError(
                    f"layer sizes do not chain: {lower.n_hidden} hidden feeds {upper.n_visible} visible"
                )

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].n_visible] + [layer.n_hidden for layer in self.layers]

    @property
    def top(self) -> Rbm:
        return self.layers[-1]

    def lower(self) -> "Dbn | None":
        """The stack without its top layer, or None for a single RBM."""
        return Dbn(self.layers[:-1]) if len(self.layers) > 1 else None


def layer_seed(seed: int, index: int) -> int:
    """Seed for layer ``index``; layer 0 reuses ``seed`` so a 1-layer DBN is a plain RBM."""
    if index == 0:
        return seed
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def encode(model: Dbn, v) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.layers[0].n_visible:
        raise ValueError(f"expected a vector of length {model.layers[0].n_visible}, got shape {x.shape}")
    for layer in model.layers:
        x = logistic(x @ layer.weights + layer.hidden_bias)
    return x


def encode_batch(model: Dbn, data) -> np.ndarray:
    # Row by row on purpose: a batched GEMM does not round identically to the
    # per-vector product, and encode_batch must agree with encode bit for bit.
    x = np.asarray(getattr(data, "instances", data), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].n_visible:
        raise ValueError(f"expected rows of length {model.layers[0].n_visible}, got shape {x.shape}")
    out = np.empty((x.shape[0], model.layers[-1].n_hidden))
    for i in range(x.shape[0]):
        out[i] = encode(model, x[i])
    return out


def train_dbn(data, layer_sizes: Sequence[int], config: CdConfig = CdConfig(), callback=None) -> Dbn:
    """Greedily train one RBM per entry of ``layer_sizes`` (hidden sizes only).

    Each layer after the first is trained on the hidden probabilities of the
    layer below. ``callback(layer_index, epoch, error)`` reports progress.
    """
    if len(layer_sizes) == 0 or any(int(s) < 1 for s in layer_sizes):
        raise ValueError("layer_sizes must be a non-empty list of positive integers")
    x = np.asarray(getattr(data, "instances", data), dtype=np.float64)
    layers = []
    for index, size in enumerate(layer_sizes):
        layer_cb = None if callback is None else (lambda e, err, _i=index: callback(_i, e, err))
        rbm = train_rbm(x, int(size), replace(config, seed=layer_seed(config.seed, index)), layer_cb)
        layers.append(rbm)
        if index + 1 < len(layer_sizes):
            x = encode_batch(Dbn([rbm]), x)
    return Dbn(layers)


def dbn_to_bytes(model: Dbn) -> bytes:
    sizes = model.layer_sizes
    head = _DBN_MAGIC + struct.pack("<II", _FORMAT_VERSION, len(model.layers))
    head += struct.pack("<" + "I" * len(sizes), *sizes)
    return head + b"".join(rbm_to_bytes(layer) for layer in model.layers)


def dbn_from_bytes(buf: bytes) -> Dbn:
    if buf[:8] != _DBN_MAGIC:
        raise ValueError("not a DBN checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported DBN checkpoint version {version}")
    sizes = list(struct.unpack_from("<" + "I" * (count + 1), buf, 16))
    pos = 16 + 4 * (count + 1)
    layers = []
    for _ in range(count):
        layer, pos = rbm_from_bytes(buf, pos)
        layers.append(layer)
    model = Dbn(layers)
    if model.layer_sizes != sizes:
        raise ValueError(f"checkpoint header sizes {sizes} disagree with layers {model.layer_sizes}")
    return model


def save_dbn(model: Dbn, path):
    with open(path, "wb") as fh:
        fh.write(dbn_to_bytes(model))


def load_dbn(path) -> Dbn:
    with open(path, "rb") as fh:
        return dbn_from_bytes(fh.read())
