"""Reference samplers and initializers.

Gibbs chains serve as the ground-truth posterior approximation the particle
flow is compared against: for the mixture model a blocked sampler
(labels, centers, weights), with a random-walk Metropolis move per center
when the repulsive prior breaks conjugacy; for mixed regression the fully
conjugate label/coefficient alternation.  K-means seeds the particle cloud
the way the experiments initialize it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from mfwgf.errors import AcceptanceRateWarning, DimensionMismatch, SolverFailure
from mfwgf.gmm import GmmConfig, GmmParams, repulsive_log_prior
from mfwgf.measures import ParticleCloud
from mfwgf.model import Dataset
from mfwgf.mor import MorConfig, _design
from mfwgf.rng import PURPOSE_INIT, counter_normals

__all__ = [
    "GibbsReport",
    "gibbs_gmm",
    "gibbs_mor",
    "kmeans_init",
    "init_cloud",
]


@dataclass(frozen=True)
class GibbsReport:
    """Post-burn-in samples (one particle per kept sweep) plus diagnostics."""

    samples: ParticleCloud
    acceptance_rate: Optional[float]
    mh_step: Optional[float]
    warnings: tuple = ()


def _resolve_burn_in(iters: int, burn_in: Optional[int]) -> int:
    if burn_in is None:
        burn_in = iters // 5
    if not 0 <= burn_in < iters:
        raise ValueError(f"burn_in must lie in [0, iters); got {burn_in} of {iters}")
    return burn_in


# ---------------------------------------------------------------------------
# Mixture-of-Gaussians Gibbs
# ---------------------------------------------------------------------------


def _sample_labels(rng, X, centers, log_w, beta2):
    # z_i ~ categorical with probs ∝ w_k exp(-||x_i - m_k||^2 / (2 beta^2))
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logits = log_w[None, :] - d2 / (2.0 * beta2)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(X.shape[0])
    return (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)


def gibbs_gmm(cfg: GmmConfig, data: Dataset, iters: int,
              burn_in: Optional[int] = None, seed: int = 0,
              mh_step: float = 0.2) -> GibbsReport:
    """Blocked Gibbs for the isotropic mixture.

    Sweeps alternate (a) labels given centers/weights, (b) centers given
    labels — an exact conjugate Gaussian draw under the plain Gaussian
    prior, a random-walk Metropolis move per center under the repulsive
    prior — and (c) weights ~ Dirichlet(1 + counts) in unknown-weights
    mode.  The Metropolis step size adapts toward ~0.3 acceptance during
    burn-in and is frozen afterwards; the post-burn-in acceptance rate is
    reported and a warning is attached when it leaves [0.05, 0.8].
    """
    if mh_step <= 0:
        raise ValueError("mh_step must be positive")
    burn_in = _resolve_burn_in(iters, burn_in)
    X = np.asarray(data.observations, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.d:
        raise DimensionMismatch("observations must be (n, d) for the mixture",
                                expected=cfg.d,
                                got=X.shape[1] if X.ndim == 2 else X.ndim)
    n = X.shape[0]
    K, d, beta2 = cfg.K, cfg.d, cfg.beta**2
    rng = np.random.default_rng(seed)

    centers = rng.normal(scale=np.sqrt(cfg.sigma2), size=(K, d))
    if cfg.unknown_weights:
        w = np.full(K, 1.0 / K)
    else:
        w = np.asarray(cfg.weights, dtype=np.float64)

    kept = []
    step = float(mh_step)
    accepted = proposed = 0          # post-burn-in tally
    win_acc = win_prop = 0           # adaptation window
    repulsive = cfg.prior == "repulsive"

    for sweep in range(iters):
        z = _sample_labels(rng, X, centers, np.log(w), beta2)
        counts = np.bincount(z, minlength=K)
        sums = np.zeros((K, d))
        np.add.at(sums, z, X)

        if not repulsive:
            # Conjugate: precision (n_k/beta^2 + 1/sigma^2) I per center.
            prec = counts / beta2 + 1.0 / cfg.sigma2
            mean = sums / beta2 / prec[:, None]
            centers = mean + rng.normal(size=(K, d)) / np.sqrt(prec)[:, None]
        else:
            logits = np.log(w) - np.log(w).mean() if cfg.unknown_weights else None
            cur_prior = repulsive_log_prior(cfg, GmmParams(centers, logits))
            for k in range(K):
                prop = centers.copy()
                prop[k] = centers[k] + step * rng.normal(size=d)
                new_prior = repulsive_log_prior(cfg, GmmParams(prop, logits))
                d_lik = (-(((X[z == k] - prop[k]) ** 2).sum()
                           - ((X[z == k] - centers[k]) ** 2).sum())
                         / (2.0 * beta2))
                log_ratio = d_lik + new_prior - cur_prior
                if np.log(rng.random()) < log_ratio:
                    centers = prop
                    cur_prior = new_prior
                    win_acc += 1
                    if sweep >= burn_in:
                        accepted += 1
                win_prop += 1
                if sweep >= burn_in:
                    proposed += 1
            if sweep < burn_in and win_prop >= 25 * K:
                rate = win_acc / win_prop
                step *= float(np.exp(rate - 0.3))
                win_acc = win_prop = 0

        if cfg.unknown_weights:
            w = rng.dirichlet(1.0 + counts)

        if sweep >= burn_in:
            if cfg.unknown_weights:
                logits = np.log(np.maximum(w, 1e-300))
                kept.append(np.concatenate([centers.ravel(),
                                            logits - logits.mean()]))
            else:
                kept.append(centers.ravel())

    notes: list = []
    acc_rate = accepted / proposed if proposed else None
    if acc_rate is not None and not 0.05 <= acc_rate <= 0.8:
        msg = (f"Metropolis acceptance rate {acc_rate:.3f} outside [0.05, 0.8]; "
               f"frozen step size {step:.3e}")
        notes.append(msg)
        warnings.warn(msg, AcceptanceRateWarning, stacklevel=2)
    return GibbsReport(
        samples=ParticleCloud.uniform(np.asarray(kept)),
        acceptance_rate=acc_rate,
        mh_step=step if repulsive else None,
        warnings=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Mixed-regression Gibbs
# ---------------------------------------------------------------------------


def gibbs_mor(cfg: MorConfig, data: Dataset, iters: int,
              burn_in: Optional[int] = None, seed: int = 0) -> GibbsReport:
    """Conjugate Gibbs for mixed regression over sign labels.

    Alternates s_i | theta ~ +/-1 with the exact conditional, and
    theta | s from the Bayesian-linear-regression posterior with design
    rows s_i x_i: precision X^T X / beta^2 + I / sigma^2 (independent of
    the signs), mean precision^{-1} X^T (s * y) / beta^2.
    """
    burn_in = _resolve_burn_in(iters, burn_in)
    rng = np.random.default_rng(seed)
    beta2 = cfg.beta**2

    if data.n == 0:
        draws = rng.normal(scale=np.sqrt(cfg.sigma2),
                           size=(iters - burn_in, cfg.d))
        return GibbsReport(samples=ParticleCloud.uniform(draws),
                           acceptance_rate=None, mh_step=None)

    X, y = _design(data)
    prec = X.T @ X / beta2 + np.eye(cfg.d) / cfg.sigma2
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure("posterior precision is singular",
                            residual=float("nan")) from exc

    theta = rng.normal(scale=np.sqrt(cfg.sigma2), size=cfg.d)
    kept = []
    for sweep in range(iters):
        # p(s_i = +1 | theta) = logistic(2 y_i x_i . theta / beta^2)
        p_plus = expit(2.0 * y * (X @ theta) / beta2)
        s = np.where(rng.random(data.n) < p_plus, 1.0, -1.0)
        rhs = X.T @ (s * y) / beta2
        mean = np.linalg.solve(prec, rhs)
        # theta = mean + chol^{-T} eta  gives covariance prec^{-1}.
        eta = rng.normal(size=cfg.d)
        theta = mean + np.linalg.solve(chol.T, eta)
        if sweep >= burn_in:
            kept.append(theta.copy())
    return GibbsReport(samples=ParticleCloud.uniform(np.asarray(kept)),
                       acceptance_rate=None, mh_step=None)


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    K = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(K):
            mask = labels == k
            if mask.any():
                centers[k] = X[mask].mean(axis=0)
            else:
                # Reseed an empty cluster at the point farthest from its
                # current center.
                dist = ((X - centers[labels]) ** 2).sum(axis=1)
                centers[k] = X[dist.argmax()]
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    wcss = float(d2[np.arange(X.shape[0]), labels].sum())
    return centers, wcss


def kmeans_init(data: Dataset, K: int, seed: int = 0,
                restarts: int = 4) -> np.ndarray:
    """K cluster centers: greedy farthest-point seeding + Lloyd iterations,
    best of ``restarts`` by within-cluster sum of squares."""
    X = np.asarray(data.observations, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch("k-means needs array observations (n, d)",
                                expected=2, got=X.ndim)
    if K < 1 or K > X.shape[0]:
        raise ValueError(f"K must lie in [1, n]; got K={K}, n={X.shape[0]}")
    rng = np.random.default_rng(seed)
    best_centers, best_wcss = None, np.inf
    for _ in range(max(restarts, 1)):
        seeds = [int(rng.integers(X.shape[0]))]
        while len(seeds) < K:
            d2 = ((X[:, None, :] - X[seeds][None, :, :]) ** 2).sum(axis=2)
            seeds.append(int(d2.min(axis=1).argmax()))
        centers, wcss = _lloyd(X, X[seeds].copy())
        if wcss < best_wcss:
            best_centers, best_wcss = centers, wcss
    return best_centers


def init_cloud(point, noise_scale: float, B: int, seed: int = 0) -> ParticleCloud:
    """B particles at ``point`` plus ``noise_scale`` times standard-normal
    perturbations from the counter-based init stream (reproducible across
    thread counts)."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    point = np.asarray(point, dtype=np.float64).ravel()
    noise = counter_normals(seed, PURPOSE_INIT, 0, B, point.size)
    return ParticleCloud.uniform(point[None, :] + noise_scale * noise)
