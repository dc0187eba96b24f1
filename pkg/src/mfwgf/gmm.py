"""Isotropic Gaussian mixture with a center-repulsive prior.

Data model: Z_i ~ Categorical(w), X_i | Z_i = k ~ N(m_k, beta^2 I_d).
The parameter is the stacked centers m = (m_1..m_K); in unknown-weights
mode K weight logits alpha are appended and w = softmax(alpha).

The repulsive prior multiplies independent N(0, sigma^2 I) center priors
by d_min / (d_min + g0), where d_min is the smallest pairwise center
distance — it pushes centers apart and deliberately breaks conditional
conjugacy.  A plain Gaussian prior is available as the conjugate special
case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from mfwgf.errors import DimensionMismatch, NonFiniteValue
from mfwgf.measures import ComponentLayout, ParticleCloud, align_components
from mfwgf.model import Dataset, LatentModelSpec

__all__ = [
    "GmmConfig",
    "GmmParams",
    "gmm_log_joint",
    "gmm_grad_log_joint",
    "repulsive_log_prior",
    "repulsive_grad_log_prior",
    "gmm_generate",
    "gmm_model",
    "equilateral_centers",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmConfig:
    """Model block for the mixture: K components in R^d with noise std beta.

    ``weights=None`` switches to unknown-weights mode (logits become part
    of the parameter, with a N(0, weight_sigma2 I) prior).  ``prior`` is
    either ``"repulsive"`` (uses g0) or ``"gaussian"``.
    """

    K: int
    d: int
    beta: float
    weights: Optional[tuple] = None
    prior: str = "repulsive"
    g0: float = 1.0
    sigma2: float = 1.0
    weight_sigma2: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.d < 1:
            raise ValueError("K and d must be positive")
        if self.beta <= 0 or self.sigma2 <= 0 or self.g0 <= 0 or self.weight_sigma2 <= 0:
            raise ValueError("beta, sigma2, g0, weight_sigma2 must be positive")
        if self.prior not in ("repulsive", "gaussian"):
            raise ValueError(f"unknown prior type {self.prior!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.K,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("known weights must be a positive K-simplex vector")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @property
    def unknown_weights(self) -> bool:
        return self.weights is None

    @property
    def param_dim(self) -> int:
        return self.K * self.d + (self.K if self.unknown_weights else 0)

    @property
    def layout(self) -> ComponentLayout:
        return ComponentLayout(self.K, self.d, logit_tail=self.unknown_weights)


@dataclass(frozen=True)
class GmmParams:
    """Structured view of the flat parameter vector."""

    centers: np.ndarray  # (K, d)
    logits: Optional[np.ndarray] = None  # (K,) in unknown-weights mode

    def flatten(self) -> np.ndarray:
        parts = [np.asarray(self.centers, dtype=np.float64).ravel()]
        if self.logits is not None:
            parts.append(np.asarray(self.logits, dtype=np.float64).ravel())
        return np.concatenate(parts)


def unflatten(cfg: GmmConfig, theta) -> GmmParams:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != cfg.param_dim:
        raise DimensionMismatch("flat parameter has the wrong length",
                                expected=cfg.param_dim, got=theta.shape[0])
    centers = theta[: cfg.K * cfg.d].reshape(cfg.K, cfg.d)
    logits = theta[cfg.K * cfg.d:] if cfg.unknown_weights else None
    return GmmParams(centers, logits)


def _log_weights(cfg: GmmConfig, params: GmmParams) -> np.ndarray:
    if cfg.unknown_weights:
        a = params.logits
        return a - logsumexp(a)
    return np.log(np.asarray(cfg.weights))


def gmm_log_joint(cfg: GmmConfig, x, z: int, params: GmmParams) -> float:
    """log p(x, z | theta) = log w_z - ||x - m_z||^2 / (2 beta^2) - (d/2) log(2 pi beta^2)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    diff = x - params.centers[z]
    return float(
        _log_weights(cfg, params)[z]
        - diff @ diff / (2.0 * cfg.beta**2)
        - 0.5 * cfg.d * (_LOG_2PI + 2.0 * np.log(cfg.beta))
    )


def gmm_grad_log_joint(cfg: GmmConfig, x, z: int, params: GmmParams) -> np.ndarray:
    """Gradient of the log joint in the flat parameter.

    Center block k gets delta_{kz} (x - m_z)/beta^2; in unknown-weights
    mode the logits block gets e_z - softmax(alpha).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    grad = np.zeros(cfg.param_dim)
    lo = z * cfg.d
    grad[lo: lo + cfg.d] = (x - params.centers[z]) / cfg.beta**2
    if cfg.unknown_weights:
        w = np.exp(_log_weights(cfg, params))
        gw = -w
        gw[z] += 1.0
        grad[cfg.K * cfg.d:] = gw
    return grad


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


def _min_pair(centers: np.ndarray) -> tuple[int, int, float]:
    """Lexicographically first pair (i, j), i < j, attaining the minimum distance."""
    K = centers.shape[0]
    best = (0, 1, np.inf)
    for i in range(K - 1):
        d = np.linalg.norm(centers[i + 1:] - centers[i], axis=1)
        j = int(np.argmin(d))
        if d[j] < best[2]:
            best = (i, i + 1 + j, float(d[j]))
    return best


def repulsive_log_prior(cfg: GmmConfig, params: GmmParams) -> float:
    """log prior up to a constant; degenerates to the Gaussian prior for K = 1.

    Repulsive form: log d_min - log(d_min + g0) - sum_k ||m_k||^2/(2 sigma^2);
    unknown-weights mode adds -||alpha||^2/(2 weight_sigma2).
    """
    m = params.centers
    total = -float(np.einsum("kd,kd->", m, m)) / (2.0 * cfg.sigma2)
    if cfg.prior == "repulsive" and cfg.K >= 2:
        _, _, dmin = _min_pair(m)
        if dmin <= 0.0:
            raise NonFiniteValue("coincident centers: repulsive log-prior is -inf")
        total += np.log(dmin) - np.log(dmin + cfg.g0)
    if cfg.unknown_weights:
        a = params.logits
        total -= float(a @ a) / (2.0 * cfg.weight_sigma2)
    return total


def repulsive_grad_log_prior(cfg: GmmConfig, params: GmmParams) -> np.ndarray:
    """Gradient of :func:`repulsive_log_prior` in the flat parameter.

    The d_min term is non-smooth at ties; the derivative is routed to the
    lexicographically first minimizing pair (a valid subgradient choice,
    and ties are measure-zero along the diffusion).
    """
    m = params.centers
    grad_m = -m / cfg.sigma2
    if cfg.prior == "repulsive" and cfg.K >= 2:
        i, j, dmin = _min_pair(m)
        if dmin <= 0.0:
            raise NonFiniteValue("coincident centers: repulsive log-prior is -inf")
        u = (m[i] - m[j]) / dmin
        coef = 1.0 / dmin - 1.0 / (dmin + cfg.g0)
        grad_m[i] += coef * u
        grad_m[j] -= coef * u
    out = np.empty(cfg.param_dim)
    out[: cfg.K * cfg.d] = grad_m.ravel()
    if cfg.unknown_weights:
        out[cfg.K * cfg.d:] = -params.logits / cfg.weight_sigma2
    return out


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def gmm_generate(cfg: GmmConfig, theta_star: GmmParams, n: int, seed: int,
                 weights=None) -> Dataset:
    """n i.i.d. draws: class ~ Categorical(w), x ~ N(m_class, beta^2 I).

    Class labels are retained in provenance but never exposed to inference.
    In unknown-weights mode pass the true ``weights`` explicitly (or leave
    them to softmax(theta_star.logits)).
    """
    if n < 1:
        raise ValueError("generator requires n >= 1")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
    elif not cfg.unknown_weights:
        w = np.asarray(cfg.weights)
    elif theta_star.logits is not None:
        w = np.exp(theta_star.logits - logsumexp(theta_star.logits))
    else:
        raise ValueError("unknown-weights generation needs true weights")
    rng = np.random.default_rng(seed)
    labels = rng.choice(cfg.K, size=n, p=w / w.sum())
    xs = theta_star.centers[labels] + cfg.beta * rng.standard_normal((n, cfg.d))
    provenance = {
        "model": "gmm",
        "seed": int(seed),
        "n": int(n),
        "config": {
            "K": cfg.K, "d": cfg.d, "beta": cfg.beta,
            "weights": list(w),
            "prior": cfg.prior, "g0": cfg.g0, "sigma2": cfg.sigma2,
        },
        "theta_star": [list(map(float, c)) for c in theta_star.centers],
        "labels": [int(z) for z in labels],
    }
    return Dataset(observations=xs, n=n, provenance=provenance)


def equilateral_centers(scale: float) -> np.ndarray:
    """Three planar centers (s, 0), (0, sqrt(3) s), (-s, 0) — an equilateral
    triangle with side 2s, so the minimum pairwise distance is 2s."""
    s = float(scale)
    return np.array([[s, 0.0], [0.0, np.sqrt(3.0) * s], [-s, 0.0]])


# ---------------------------------------------------------------------------
# Model assembly (scalar contract + vectorized hooks)
# ---------------------------------------------------------------------------


def _xs(data: Dataset) -> np.ndarray:
    return np.asarray(data.observations, dtype=np.float64)


def gmm_model(cfg: GmmConfig, theta_star: Optional[GmmParams] = None) -> LatentModelSpec:
    """Wire the mixture into the generic latent-model interface."""
    Kd = cfg.K * cfg.d
    beta_sq = cfg.beta**2
    const = -0.5 * cfg.d * (_LOG_2PI + 2.0 * np.log(cfg.beta))

    true_flat = None
    if theta_star is not None:
        if cfg.unknown_weights and theta_star.logits is None:
            raise DimensionMismatch(
                "unknown-weights model needs theta* logits (centered log-weights)")
        true_flat = theta_star.flatten()
        if true_flat.shape[0] != cfg.param_dim:
            raise DimensionMismatch("theta* has the wrong flattened length",
                                    expected=cfg.param_dim, got=true_flat.shape[0])
        if cfg.unknown_weights:
            # Softmax is shift-invariant: fix the gauge by centering.
            true_flat = true_flat.copy()
            true_flat[Kd:] -= true_flat[Kd:].mean()

    def log_joint(x, z, theta):
        return gmm_log_joint(cfg, x, z, unflatten(cfg, theta))

    def grad_log_joint(x, z, theta):
        return gmm_grad_log_joint(cfg, x, z, unflatten(cfg, theta))

    def log_prior(theta):
        return repulsive_log_prior(cfg, unflatten(cfg, theta))

    def grad_log_prior(theta):
        return repulsive_grad_log_prior(cfg, unflatten(cfg, theta))

    def log_joint_table(data, thetas):
        X = _xs(data)  # (n, d)
        B = thetas.shape[0]
        centers = thetas[:, :Kd].reshape(B, cfg.K, cfg.d)
        if cfg.unknown_weights:
            logits = thetas[:, Kd:]
            logw = logits - logsumexp(logits, axis=1, keepdims=True)  # (B, K)
        else:
            logw = np.broadcast_to(np.log(np.asarray(cfg.weights)), (B, cfg.K))
        x_sq = np.einsum("id,id->i", X, X)
        m_sq = np.einsum("bkd,bkd->bk", centers, centers)
        cross = np.einsum("bkd,id->bki", centers, X)
        dist_sq = x_sq[None, None, :] + m_sq[:, :, None] - 2.0 * cross  # (B, K, n)
        table = logw[:, :, None] - dist_sq / (2.0 * beta_sq) + const
        return np.swapaxes(table, 1, 2)  # (B, n, K)

    def neg_loglik_drift(data, R, thetas):
        X = _xs(data)
        B = thetas.shape[0]
        centers = thetas[:, :Kd].reshape(B, cfg.K, cfg.d)
        S = R.sum(axis=0)  # (K,)
        C = R.T @ X  # (K, d)
        out = np.empty((B, cfg.param_dim))
        # -sum_i R_ik (x_i - m_k)/beta^2 = (S_k m_k - C_k)/beta^2
        out[:, :Kd] = ((S[None, :, None] * centers - C[None, :, :]) / beta_sq
                       ).reshape(B, Kd)
        if cfg.unknown_weights:
            logits = thetas[:, Kd:]
            w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
            out[:, Kd:] = data.n * w - S[None, :]
        return out

    def grad_log_prior_batch(thetas):
        B = thetas.shape[0]
        centers = thetas[:, :Kd].reshape(B, cfg.K, cfg.d)
        grad = -centers / cfg.sigma2
        if cfg.prior == "repulsive" and cfg.K >= 2:
            pairs = [(i, j) for i in range(cfg.K) for j in range(i + 1, cfg.K)]
            pi = np.array([p[0] for p in pairs])
            pj = np.array([p[1] for p in pairs])
            dvec = centers[:, pi, :] - centers[:, pj, :]  # (B, P, d)
            dist = np.sqrt(np.einsum("bpd,bpd->bp", dvec, dvec))
            if np.any(dist <= 0.0):
                raise NonFiniteValue("coincident centers: repulsive log-prior is -inf",
                                     b=int(np.argwhere(dist <= 0.0)[0][0]))
            # np.argmin returns the first minimum: the lexicographically
            # smallest pair under the (i, j) enumeration above.
            sel = np.argmin(dist, axis=1)
            binds = np.arange(B)
            dmin = dist[binds, sel]
            u = dvec[binds, sel, :] / dmin[:, None]
            coef = (1.0 / dmin - 1.0 / (dmin + cfg.g0))[:, None]
            np.add.at(grad, (binds, pi[sel]), coef * u)
            np.add.at(grad, (binds, pj[sel]), -coef * u)
        out = np.empty((B, cfg.param_dim))
        out[:, :Kd] = grad.reshape(B, Kd)
        if cfg.unknown_weights:
            out[:, Kd:] = -thetas[:, Kd:] / cfg.weight_sigma2
        return out

    def drift_lipschitz_bound(data, resp):
        S = resp.matrix.sum(axis=0) if resp.n else np.zeros(cfg.K)
        bound = float(S.max(initial=0.0)) / beta_sq + 1.0 / cfg.sigma2
        if cfg.unknown_weights:
            bound = max(bound, 0.5 * data.n + 1.0 / cfg.weight_sigma2)
        return bound

    def mean_log_conditional(data, thetas, weights):
        # The log joint is linear in (log w_k, m_k, |m_k|^2) per (i, k), so
        # the particle average needs only those feature means; the per-row
        # normalizer of the conditional cancels in the softmax downstream.
        X = _xs(data)
        B = thetas.shape[0]
        centers = thetas[:, :Kd].reshape(B, cfg.K, cfg.d)
        if cfg.unknown_weights:
            logits = thetas[:, Kd:]
            logw = logits - logsumexp(logits, axis=1, keepdims=True)
            mean_logw = weights @ logw                        # (K,)
        else:
            mean_logw = np.log(np.asarray(cfg.weights))
        mean_centers = np.einsum("b,bkd->kd", weights, centers)
        mean_m_sq = weights @ np.einsum("bkd,bkd->bk", centers, centers)
        # x_i^2 terms are row constants; drop them.
        return (mean_logw - mean_m_sq / (2.0 * beta_sq))[None, :] \
            + (X @ mean_centers.T) / beta_sq

    def align_for_metric(cloud: ParticleCloud, reference) -> ParticleCloud:
        ref = np.asarray(reference, dtype=np.float64).reshape(-1)[:Kd]
        aligned = align_components(cloud, cfg.layout, ref.reshape(cfg.K, cfg.d))
        if cfg.unknown_weights:
            # Center each particle's logit block to match the reference gauge.
            pts = aligned.points.copy()
            pts[:, Kd:] -= pts[:, Kd:].mean(axis=1, keepdims=True)
            aligned = ParticleCloud(pts, aligned.weights.copy())
        return aligned

    return LatentModelSpec(
        K=cfg.K,
        param_dim=cfg.param_dim,
        log_joint=log_joint,
        grad_log_joint=grad_log_joint,
        log_prior=log_prior,
        grad_log_prior=grad_log_prior,
        true_param=true_flat,
        name="gmm",
        log_joint_table=log_joint_table,
        neg_loglik_drift=neg_loglik_drift,
        grad_log_prior_batch=grad_log_prior_batch,
        drift_lipschitz_bound=drift_lipschitz_bound,
        align_for_metric=align_for_metric,
        mean_log_conditional=mean_log_conditional,
    )
