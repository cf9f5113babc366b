"""Dataset loading and subsampling for MNIST (IDX) and binary 20-newsgroups."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Raised when an input file does not follow its expected layout."""


class DataConsistencyError(ValueError):
    """Raised when two files that belong together disagree."""


@dataclass(frozen=True)
class Dataset:
    """Row-major instance matrix with values in [0, 1].

    ``labels`` are ground truth and exist only so that metrics can be
    computed; nothing in the training path reads them.
    """

    instances: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.instances, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] == 0:
            raise ValueError(f"instances must be a 2-D matrix with d > 0, got shape {x.shape}")
        if x.size and (np.nanmin(x) < 0.0 or np.nanmax(x) > 1.0 or not np.isfinite(x).all()):
            raise ValueError("instance values must lie in [0, 1]")
        object.__setattr__(self, "instances", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValueError(f"labels length {y.shape} does not match N={x.shape[0]}")
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class SampleSpec:
    train_count: int
    test_count: int
    seed: int = 0

    def __post_init__(self):
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("sample counts must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _read_idx(path, expected_magic: int):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != expected:
        raise DataFormatError(f"{path}: expected {expected} data bytes for dims {dims}, found {body.size}")
    return body.reshape(dims)


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Read an MNIST image/label IDX pair; pixels are scaled to ``byte / 255``."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    if labels.size and labels.max() > 9:
        raise DataFormatError("MNIST labels must lie in 0..9")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), name)


def load_newsgroups_binary(path, name: str = "20news") -> Dataset:
    """Read the binary bag-of-words newsgroups text format.

    Each line holds whitespace-separated 0/1 feature tokens followed by a
    single class label (label-last). Labels are shifted so the smallest
    observed label becomes 0, which maps both 0..19 and 1..20 files to 0..19.
    """
    rows = []
    labels = []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if width is None:
                width = len(tokens)
                if width < 2:
                    raise DataFormatError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(tokens) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: ragged line with {len(tokens)} tokens, expected {width}"
                )
            feats = tokens[:-1]
            bad = [t for t in feats if t not in ("0", "1")]
            if bad:
                raise DataFormatError(f"{path}:{lineno}: non-binary feature token {bad[0]!r}")
            try:
                labels.append(int(tokens[-1]))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: label token {tokens[-1]!r} is not an integer") from None
            rows.append(np.fromiter((t == "1" for t in feats), dtype=np.float64, count=len(feats)))
    if not rows:
        raise DataFormatError(f"{path}: no data lines")
    y = np.asarray(labels, dtype=np.int64)
    y = y - y.min()
    if y.max() > 19:
        raise DataFormatError(f"{path}: labels span more than 20 classes")
    return Dataset(np.vstack(rows), y, name)


def subsample_indices(n_source: int, count: int, seed: int) -> np.ndarray:
    if count > n_source:
        raise ValueError(f"cannot draw {count} rows from {n_source}")
    rng = np.random.default_rng(seed)
    return rng.permutation(n_source)[:count]


def subsample(source: Dataset, count: int, seed: int) -> Dataset:
    """Uniform sample of ``count`` rows without replacement, fixed by ``seed``."""
    idx = subsample_indices(source.n, count, seed)
    labels = None if source.labels is None else source.labels[idx]
    return Dataset(source.instances[idx], labels, source.name)


def split_sample(train: Dataset, test: Dataset, spec: SampleSpec):
    """Draw the train/test subsets described by ``spec``.

    The test draw uses a seed derived from ``spec.seed`` so the two subsets
    are independent even when train and test come from the same source.
    """
    test_seed = int(np.random.SeedSequence([spec.seed, 1]).generate_state(1, np.uint64)[0])
    return subsample(train, spec.train_count, spec.seed), subsample(test, spec.test_count, test_seed)
