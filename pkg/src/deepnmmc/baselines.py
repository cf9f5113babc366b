"""Comparison clusterers: k-means, diagonal GMM, PCA, and a conjugate DPM sampler."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
from numba import njit
from scipy.special import gammaln, logsumexp
from sklearn.cluster import KMeans

from .nmmc import SweepRecord


def _check_k(data, K):
    if not 1 <= K <= data.shape[0]:
        raise ValueError(f"K={K} must lie in 1..N={data.shape[0]}")


def kmeans(data, K: int, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm from a single k-means++ seeding (at most 300 iterations)."""
    data = np.asarray(data, dtype=np.float64)
    _check_k(data, K)
    model = KMeans(n_clusters=K, init="k-means++", n_init=1, max_iter=300,
                   algorithm="lloyd", random_state=seed % 2**32)
    return model.fit_predict(data).astype(np.int64)


@dataclass
class GmmResult:
    labels: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: List[float] = field(default_factory=list)


def _diag_log_density(data, means, variances):
    # (N, K) matrix of log N(x_i | mean_k, diag(var_k))
    inv = 1.0 / variances
    quad = (data**2) @ inv.T - 2.0 * data @ (means * inv).T + np.sum(means**2 * inv, axis=1)
    return -0.5 * (quad + np.sum(np.log(2 * np.pi * variances), axis=1))


def gmm_em_fit(data, K: int, seed: int = 0, var_floor: float = 1e-6,
               max_iter: int = 200, tol: float = 1e-6) -> GmmResult:
    """EM for a diagonal-covariance Gaussian mixture initialised from k-means."""
    data = np.asarray(data, dtype=np.float64)
    _check_k(data, K)
    n = data.shape[0]
    resp = np.eye(K)[kmeans(data, K, seed)]
    lls = []
    for _ in range(max_iter + 1):
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = resp.T @ data / nk[:, None]
        variances = resp.T @ (data**2) / nk[:, None] - means**2
        variances = np.maximum(variances, var_floor)
        log_joint = _diag_log_density(data, means, variances) + np.log(weights)
        norm = logsumexp(log_joint, axis=1)
        lls.append(float(norm.sum()))
        resp = np.exp(log_joint - norm[:, None])
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) < tol:
            break
    return GmmResult(np.argmax(log_joint, axis=1), weights, means, variances, lls)


def gmm_em(data, K: int, seed: int = 0) -> np.ndarray:
    return gmm_em_fit(data, K, seed).labels


def pca_project(data, out_dim: int) -> np.ndarray:
    """Project centred data on the leading principal axes.

    Each axis is signed so that its largest-magnitude coordinate is positive.
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if not 1 <= out_dim <= min(n, d):
        raise ValueError(f"out_dim={out_dim} must lie in 1..{min(n, d)}")
    centred = data - data.mean(axis=0)
    cov = centred.T @ centred / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:out_dim]
    axes = evecs[:, order]
    pivot = np.argmax(np.abs(axes), axis=0)
    axes = axes * np.sign(axes[pivot, np.arange(out_dim)])
    return centred @ axes


# ---------------------------------------------------------------------------
# Dirichlet-process mixture of Gaussians with a Normal-inverse-Wishart base
# measure, sampled by collapsed Gibbs.


class NumericalError(ArithmeticError):
    """A Cholesky downdate lost positive definiteness."""


@dataclass(frozen=True)
class DpmPrior:
    mean: np.ndarray
    kappa: float
    df: float
    scatter: np.ndarray
    alpha: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scatter = np.asarray(self.scatter, dtype=np.float64)
        d = mean.shape[0]
        if scatter.shape != (d, d) or not np.allclose(scatter, scatter.T):
            raise ValueError("scatter must be a symmetric d x d matrix")
        np.linalg.cholesky(scatter)  # raises if not positive definite
        if not self.kappa > 0 or not self.alpha > 0 or not self.df > d - 1:
            raise ValueError("need kappa > 0, alpha > 0 and df > dim - 1")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scatter", scatter)

    @classmethod
    def from_data(cls, data, alpha: float = 4.0) -> "DpmPrior":
        """Data-driven defaults: empirical mean, kappa 1, df dim + 2, diagonal empirical scatter."""
        data = np.asarray(data, dtype=np.float64)
        d = data.shape[1]
        var = np.maximum(data.var(axis=0), 1e-6 * max(float(data.var()), 1e-300))
        return cls(data.mean(axis=0), 1.0, d + 2.0, np.diag(var), alpha)


@njit(cache=True)
def chol_rank1(L, x, sign):
    """In-place rank-1 update (sign=+1) or downdate (sign=-1) of lower-triangular L.

    ``x`` is overwritten. Returns False if a downdate would break positive
    definiteness, leaving L partially modified.
    """
    n = x.shape[0]
    for k in range(n):
        lkk = L[k, k]
        r2 = lkk * lkk + sign * x[k] * x[k]
        if r2 <= 0.0:
            return False
        r = math.sqrt(r2)
        c = r / lkk
        s = x[k] / lkk
        L[k, k] = r
        for i in range(k + 1, n):
            L[i, k] = (L[i, k] + sign * s * x[i]) / c
            x[i] = c * x[i] - s * L[i, k]
    return True


@njit(cache=True)
def _student_logpdf(x, loc, L, kappa, nu_n, d):
    # log multivariate-t posterior predictive of a NIW cluster with scatter chol L
    dof = nu_n - d + 1.0
    scale = (kappa + 1.0) / (kappa * dof)
    y = x - loc
    quad = 0.0
    logdet = 0.0
    for i in range(d):
        acc = y[i]
        for j in range(i):
            acc -= L[i, j] * y[j]
        y[i] = acc / L[i, i]
        quad += y[i] * y[i]
        logdet += math.log(L[i, i])
    quad /= scale
    logdet = 2.0 * logdet + d * math.log(scale)
    return (math.lgamma(0.5 * (dof + d)) - math.lgamma(0.5 * dof)
            - 0.5 * d * math.log(dof * math.pi) - 0.5 * logdet
            - 0.5 * (dof + d) * math.log1p(quad / dof))


@njit(cache=True)
def _log_weights(x, chols, means, kappas, nus, counts, K, d, alpha, prior_chol, prior_mean, prior_kappa, prior_nu):
    out = np.empty(K + 1)
    for k in range(K):
        out[k] = math.log(counts[k]) + _student_logpdf(x, means[k], chols[k], kappas[k], nus[k], d)
    out[K] = math.log(alpha) + _student_logpdf(x, prior_mean, prior_chol, prior_kappa, prior_nu, d)
    return out


class NiwClusters:
    """Per-cluster NIW posterior statistics with cached scatter Cholesky factors.

    The posterior scatter of a cluster changes by a rank-1 term whenever a
    point joins or leaves, so its lower Cholesky factor is updated in O(d^2)
    instead of being refactorised.
    """

    def __init__(self, prior: DpmPrior, capacity: int = 16):
        self.prior = prior
        self.d = prior.mean.shape[0]
        self.prior_chol = np.linalg.cholesky(prior.scatter)
        self.K = 0
        self._alloc(capacity)

    def _alloc(self, capacity):
        d = self.d
        old = getattr(self, "chols", None)
        chols = np.zeros((capacity, d, d))
        means = np.zeros((capacity, d))
        kappas = np.zeros(capacity)
        nus = np.zeros(capacity)
        counts = np.zeros(capacity, dtype=np.int64)
        if old is not None:
            k = self.K
            chols[:k], means[:k] = self.chols[:k], self.means[:k]
            kappas[:k], nus[:k], counts[:k] = self.kappas[:k], self.nus[:k], self.counts[:k]
        self.chols, self.means, self.kappas, self.nus, self.counts = chols, means, kappas, nus, counts

    def new_cluster(self) -> int:
        if self.K == self.counts.shape[0]:
            self._alloc(2 * self.K)
        k = self.K
        self.chols[k] = self.prior_chol
        self.means[k] = self.prior.mean
        self.kappas[k] = self.prior.kappa
        self.nus[k] = self.prior.df
        self.counts[k] = 0
        self.K += 1
        return k

    def add(self, k: int, x):
        kappa = self.kappas[k]
        v = np.sqrt(kappa / (kappa + 1.0)) * (x - self.means[k])
        chol_rank1(self.chols[k], v, 1.0)
        self.means[k] = (kappa * self.means[k] + x) / (kappa + 1.0)
        self.kappas[k] = kappa + 1.0
        self.nus[k] += 1.0
        self.counts[k] += 1

    def remove(self, k: int, x) -> bool:
        """Take ``x`` out of cluster k; returns False if the cached factor had to be rebuilt."""
        kappa = self.kappas[k]
        v = np.sqrt(kappa / (kappa - 1.0)) * (x - self.means[k])
        mean = (kappa * self.means[k] - x) / (kappa - 1.0)
        ok = chol_rank1(self.chols[k], v, -1.0)
        self.means[k] = mean
        self.kappas[k] = kappa - 1.0
        self.nus[k] -= 1.0
        self.counts[k] -= 1
        return ok

    def rebuild(self, k: int, members):
        """Recompute cluster k's statistics from its member rows."""
        self.chols[k], self.means[k], self.kappas[k], self.nus[k] = niw_posterior(self.prior, members)
        self.counts[k] = len(members)

    def delete(self, k: int):
        last = self.K - 1
        for arr in (self.chols, self.means, self.kappas, self.nus, self.counts):
            arr[k:last] = arr[k + 1:last + 1]
        self.K -= 1

    def log_weights(self, x, alpha: float) -> np.ndarray:
        p = self.prior
        return _log_weights(x, self.chols, self.means, self.kappas, self.nus, self.counts, self.K,
                            self.d, alpha, self.prior_chol, p.mean, p.kappa, p.df)


def niw_posterior(prior: DpmPrior, members):
    """From-scratch NIW posterior (scatter Cholesky, mean, kappa, df) for a set of rows."""
    members = np.asarray(members, dtype=np.float64).reshape(-1, prior.mean.shape[0])
    n = members.shape[0]
    kappa = prior.kappa + n
    if n:
        xbar = members.mean(axis=0)
        centred = members - xbar
        diff = xbar - prior.mean
        scatter = prior.scatter + centred.T @ centred + (prior.kappa * n / kappa) * np.outer(diff, diff)
        mean = (prior.kappa * prior.mean + n * xbar) / kappa
    else:
        scatter, mean = prior.scatter, prior.mean
    return np.linalg.cholesky(scatter), mean, kappa, prior.df + n


def niw_predictive_logpdf(prior: DpmPrior, members, x) -> float:
    chol, mean, kappa, nu = niw_posterior(prior, members)
    return float(_student_logpdf(np.asarray(x, dtype=np.float64).copy(), mean, chol, kappa, nu, prior.mean.shape[0]))


def crp_log_weights(counts, alpha: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    return np.log(np.append(counts, alpha) / (total + alpha))


@dataclass
class DpmResult:
    labels: np.ndarray
    log: List[SweepRecord]
    recoveries: int = 0


def dpm_gibbs(codes, prior: DpmPrior, iterations: int, seed: int = 0, callback=None) -> DpmResult:
    """Collapsed Gibbs sampling for a DP mixture of full-covariance Gaussians.

    Initialised by one sequential CRP pass like the NMMC sampler; each sweep
    then visits every row in a fresh random order. The concentration stays
    at ``prior.alpha``.
    """
    x = np.ascontiguousarray(codes, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a matrix with at least two rows")
    if x.shape[1] != prior.mean.shape[0]:
        raise ValueError("prior dimension does not match the codes")
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    stats = NiwClusters(prior)
    z = np.full(n, -1, dtype=np.int64)
    recoveries = 0
    log = []

    def place(i):
        logw = stats.log_weights(x[i].copy(), prior.alpha)
        w = np.exp(logw - logw.max())
        k = min(int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right")), stats.K)
        if k == stats.K:
            stats.new_cluster()
        stats.add(k, x[i])
        z[i] = k
        # objective proxy: log of the normalised CRP weight times the predictive density
        return float(logw[k] - math.log(stats.counts[:stats.K].sum() - 1 + prior.alpha))

    start = time.perf_counter()
    objective = 0.0
    for i in range(n):
        objective += place(i)
    log.append(SweepRecord(0, stats.K, prior.alpha, objective, 1e3 * (time.perf_counter() - start)))
    if callback is not None:
        callback(log[-1], z)

    for it in range(1, iterations + 1):
        start = time.perf_counter()
        objective = 0.0
        for i in rng.permutation(n):
            k = z[i]
            z[i] = -1
            if stats.counts[k] == 1:
                stats.delete(k)
                z[z > k] -= 1
            elif not stats.remove(k, x[i]):
                recoveries += 1
                stats.rebuild(k, x[z == k])
            objective += place(i)
        log.append(SweepRecord(it, stats.K, prior.alpha, objective, 1e3 * (time.perf_counter() - start)))
        if callback is not None:
            callback(log[-1], z)
    return DpmResult(z.copy(), log, recoveries)
