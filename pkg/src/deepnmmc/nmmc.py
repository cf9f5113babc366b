"""Nonparametric maximum-margin clustering (NMMC).

Cluster assignments are Gibbs-sampled from a Chinese-restaurant-process prior
times the likelihood ``exp(x . theta_k - lam * |theta_k|^2)``; after every
assignment the per-cluster weights are corrected with a multiclass
passive-aggressive (PA-1) step using the sampled label as the target.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np
from scipy.special import logsumexp


class DegenerateInputError(ValueError):
    """A PA update was requested for an all-zero code with positive loss."""


@dataclass
class NmmcState:
    """Current partition and per-cluster weight vectors.

    ``thetas`` is a ``(K, dim)`` array whose row k is the weight block of
    cluster k. Cluster ids are kept dense: an emptied cluster is deleted at
    once and every larger id shifts down by one.
    """

    assignments: np.ndarray
    thetas: np.ndarray
    counts: np.ndarray
    alpha: float
    lam: float
    C: float

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def N(self) -> int:
        return self.assignments.shape[0]

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    def check(self):
        """Raise AssertionError if the bookkeeping invariants are broken."""
        assigned = self.assignments[self.assignments >= 0]
        assert self.thetas.shape[0] == self.K, "theta blocks and counts disagree"
        assert (self.counts >= 1).all(), "empty cluster present"
        assert int(self.counts.sum()) == assigned.size, "counts do not sum to N"
        assert assigned.size == 0 or assigned.max() < self.K, "assignment id out of range"
        assert np.array_equal(np.bincount(assigned, minlength=self.K), self.counts), "counts stale"

    def scores(self, x) -> np.ndarray:
        """Log-likelihood term ``x . theta_k - lam |theta_k|^2`` for every cluster."""
        return self.thetas @ x - self.lam * np.einsum("kd,kd->k", self.thetas, self.thetas)

    def predict(self, codes) -> np.ndarray:
        """Label codes by the cluster with the highest likelihood score."""
        codes = np.atleast_2d(codes)
        sq = np.einsum("kd,kd->k", self.thetas, self.thetas)
        return np.argmax(codes @ self.thetas.T - self.lam * sq[None, :], axis=1)


class PaUpdateTrace(NamedTuple):
    predicted_label: int
    margin: float
    loss: float
    step: float


@dataclass(frozen=True)
class NmmcConfig:
    alpha_init: float = 4.0
    lam: float = 15.0
    C: float = 0.001
    iterations: int = 100
    seed: int = 0
    new_cluster_df: float = 3.0
    new_cluster_scale: float = 1.0
    alpha_prior_shape: float = 1.0
    alpha_prior_rate: float = 1.0

    def __post_init__(self):
        for name in ("alpha_init", "lam", "C", "new_cluster_df", "new_cluster_scale",
                     "alpha_prior_shape", "alpha_prior_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class CodeTransform:
    """Affine map applied to codes before clustering.

    Codes are centred on the training mean and scaled so that the root mean
    squared row norm equals ``target_norm``; optionally a constant column
    ``bias * target_norm`` is appended so every cluster gets an offset term.
    Rescaling codes by s is equivalent to running on the raw codes with
    ``lam / s**2``, so the target norm fixes the effective regularizer
    independently of how saturated the encoder output is.
    """

    mean: np.ndarray
    factor: float
    bias: float = 0.0

    @classmethod
    def identity(cls, dim: int) -> "CodeTransform":
        return cls(np.zeros(dim), 1.0, 0.0)

    @classmethod
    def fit(cls, codes, target_norm: float, bias: float = 0.0) -> "CodeTransform":
        codes = np.asarray(codes, dtype=np.float64)
        if not target_norm > 0 or bias < 0:
            raise ValueError("target_norm must be positive and bias non-negative")
        mean = codes.mean(axis=0)
        rms = math.sqrt(float(((codes - mean) ** 2).sum(axis=1).mean()))
        if rms == 0.0:
            raise ValueError("all codes are identical; cannot rescale")
        return cls(mean, target_norm / rms, bias * target_norm)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.dim + (self.bias > 0)

    def apply(self, codes) -> np.ndarray:
        x = (np.asarray(codes, dtype=np.float64) - self.mean) * self.factor
        if self.bias > 0:
            x = np.concatenate([x, np.full(x.shape[:-1] + (1,), self.bias)], axis=-1)
        return x

    def code_weights(self, thetas) -> np.ndarray:
        """Weight blocks restricted to the code coordinates (bias column dropped)."""
        return np.asarray(thetas)[:, :self.dim]


def crp_conditional(counts, alpha: float, total: int) -> np.ndarray:
    """CRP predictive: existing cluster k gets ``n_k / (total + alpha)``, a new one ``alpha / (total + alpha)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("cluster counts must be non-negative")
    if counts.sum() != total:
        raise ValueError(f"counts sum to {counts.sum()}, expected {total}")
    denom = total + alpha
    out = np.empty(counts.shape[0] + 1)
    out[:-1] = counts / denom
    out[-1] = alpha / denom
    return out


def likelihood_score(x, theta, lam: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if x.shape != theta.shape:
        raise ValueError(f"x has shape {x.shape} but theta has shape {theta.shape}")
    return math.exp(float(x @ theta) - lam * float(theta @ theta))


def sample_new_theta(dim: int, nu: float, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Zero-mean multivariate t draw with isotropic scale ``scale``."""
    if dim < 1 or not nu > 0:
        raise ValueError("need dim >= 1 and nu > 0")
    z = rng.standard_normal(dim)
    w = rng.chisquare(nu) / nu
    return scale * z / math.sqrt(w)


def assignment_log_weights(state: NmmcState, x, counts, theta_new) -> np.ndarray:
    """Unnormalised log sampling weights over the K existing clusters and one new cluster.

    ``counts`` must already exclude the instance being reassigned.
    """
    total = int(counts.sum())
    logw = np.log(crp_conditional(counts, state.alpha, total))
    logw[:-1] += state.scores(x)
    logw[-1] += float(x @ theta_new) - state.lam * float(theta_new @ theta_new)
    return logw


def assignment_probs(state: NmmcState, x, counts, theta_new) -> np.ndarray:
    logw = assignment_log_weights(state, x, counts, theta_new)
    return np.exp(logw - logsumexp(logw))


def _remove_instance(state: NmmcState, i: int):
    k = state.assignments[i]
    state.assignments[i] = -1
    state.counts[k] -= 1
    if state.counts[k] == 0:
        state.counts = np.delete(state.counts, k)
        state.thetas = np.delete(state.thetas, k, axis=0)
        state.assignments[state.assignments > k] -= 1


def _draw(probs, rng) -> int:
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(probs), u * probs.sum(), side="right"))
    return min(k, probs.shape[0] - 1)


def _place(state: NmmcState, i: int, x, rng, nu: float, scale: float) -> float:
    # Sample a cluster for an unassigned instance i; returns the chosen log weight.
    theta_new = sample_new_theta(state.dim, nu, rng, scale)
    logw = assignment_log_weights(state, x, state.counts, theta_new)
    k = _draw(np.exp(logw - logw.max()), rng)
    if k == state.K:
        state.thetas = np.vstack([state.thetas, theta_new])
        state.counts = np.append(state.counts, 1)
    else:
        state.counts[k] += 1
    state.assignments[i] = k
    return float(logw[k])


def gibbs_assign(state: NmmcState, x, i: int, rng: np.random.Generator,
                 nu: float = 3.0, scale: float = 1.0) -> NmmcState:
    """Resample the cluster of instance ``i`` (with code ``x``) in place.

    A freshly drawn t-distributed weight vector stands in for the
    not-yet-existing cluster; if that option is chosen it becomes the new
    cluster's weights.
    """
    _remove_instance(state, i)
    _place(state, i, np.asarray(x, dtype=np.float64), rng, nu, scale)
    return state


def pa_update(state: NmmcState, x, z_t: int):
    """Multiclass PA-1 step treating ``z_t`` as the correct label.

    The competitor is the best-scoring cluster other than ``z_t`` (lowest id
    on ties). Only the two involved weight blocks move.

    Returns:
        (state, PaUpdateTrace)
    """
    if not 0 <= z_t < state.K:
        raise ValueError(f"label {z_t} outside 0..{state.K - 1}")
    if state.K == 1:
        return state, PaUpdateTrace(-1, math.inf, 0.0, 0.0)
    x = np.asarray(x, dtype=np.float64)
    s = state.thetas @ x
    true_score = s[z_t]
    s[z_t] = -np.inf
    z_hat = int(np.argmax(s))
    margin = float(true_score - s[z_hat])
    loss = max(0.0, 1.0 - margin)
    if loss == 0.0:
        return state, PaUpdateTrace(z_hat, margin, 0.0, 0.0)
    sq = float(x @ x)
    if sq == 0.0:
        raise DegenerateInputError("cannot take a PA step on an all-zero code")
    tau = min(state.C, loss / sq)
    state.thetas[z_t] += tau * x
    state.thetas[z_hat] -= tau * x
    return state, PaUpdateTrace(z_hat, margin, loss, tau)


def resample_alpha(state: NmmcState, prior_shape: float, prior_rate: float,
                   rng: np.random.Generator) -> float:
    """Draw the concentration from its conditional given K and N.

    Uses the auxiliary-variable construction for a Gamma(shape, rate) prior:
    eta ~ Beta(alpha + 1, N), then alpha from a two-component Gamma mixture.
    """
    n, k = state.N, state.K
    eta = rng.beta(state.alpha + 1.0, n)
    rate = prior_rate - math.log(eta)
    odds = (prior_shape + k - 1.0) / (n * rate)
    shape = prior_shape + k if rng.random() < odds / (1.0 + odds) else prior_shape + k - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


@dataclass
class SweepRecord:
    iteration: int
    K: int
    alpha: float
    objective: float
    elapsed_ms: float


@dataclass
class NmmcResult:
    assignments: np.ndarray
    state: NmmcState
    log: List[SweepRecord] = field(default_factory=list)


def initial_state(dim: int, n: int, config: NmmcConfig) -> NmmcState:
    return NmmcState(
        assignments=np.full(n, -1, dtype=np.int64),
        thetas=np.zeros((1, dim)),
        counts=np.zeros(1, dtype=np.int64),
        alpha=config.alpha_init,
        lam=config.lam,
        C=config.C,
    )


def run_nmmc(codes, config: NmmcConfig = NmmcConfig(), callback=None) -> NmmcResult:
    """Cluster the rows of ``codes``.

    One sequential pass seeds the partition (instance 0 opens cluster 0 with
    zero weights, later instances follow the CRP-times-likelihood rule), then
    ``config.iterations`` sweeps visit all instances in a fresh random order,
    doing a Gibbs reassignment followed by a PA step each time. The
    concentration is resampled at the end of every sweep. Row 0 of the log
    describes the initial pass.
    """
    x = np.asarray(codes, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a matrix with at least two rows")
    n, dim = x.shape
    rng = np.random.default_rng(config.seed)
    nu, scale = config.new_cluster_df, config.new_cluster_scale
    state = initial_state(dim, n, config)

    log = []
    start = time.perf_counter()
    state.assignments[0] = 0
    state.counts[0] = 1
    objective = 0.0
    for i in range(1, n):
        objective += _place(state, i, x[i], rng, nu, scale)
        pa_update(state, x[i], int(state.assignments[i]))
    log.append(SweepRecord(0, state.K, state.alpha, objective, 1e3 * (time.perf_counter() - start)))
    if callback is not None:
        callback(log[-1], state)

    for it in range(1, config.iterations + 1):
        start = time.perf_counter()
        objective = 0.0
        for i in rng.permutation(n):
            _remove_instance(state, i)
            objective += _place(state, i, x[i], rng, nu, scale)
            pa_update(state, x[i], int(state.assignments[i]))
        state.alpha = resample_alpha(state, config.alpha_prior_shape, config.alpha_prior_rate, rng)
        log.append(SweepRecord(it, state.K, state.alpha, objective, 1e3 * (time.perf_counter() - start)))
        if callback is not None:
            callback(log[-1], state)
    return NmmcResult(state.assignments.copy(), state, log)
