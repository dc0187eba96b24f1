"""Symmetric two-component mixture of linear regressions.

Data model: X_i ~ N(0, I_d), Z_i ~ Uniform{+1, -1},
y_i | X_i, Z_i, theta ~ N(Z_i X_i^T theta, beta^2).  The two regression
lines are mirror images, so theta is identified only up to a global sign;
clouds are sign-aligned post hoc before distances are measured.

Latent classes are exposed to the generic interface as indices {0, 1}
mapping to signs {+1, -1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mfwgf.errors import DimensionMismatch
from mfwgf.measures import ParticleCloud, w2_point_mass
from mfwgf.model import Dataset, LatentModelSpec

__all__ = [
    "MorConfig",
    "mor_log_joint",
    "mor_grad_log_joint",
    "mor_conditional",
    "mor_generate",
    "mor_model",
    "sign_align",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_SIGNS = (1, -1)  # class index 0 -> z = +1, class index 1 -> z = -1


@dataclass(frozen=True)
class MorConfig:
    d: int
    beta: float
    sigma2: float = 1.0  # Gaussian prior variance on theta

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("covariate dimension must be positive")
        if self.beta <= 0 or self.sigma2 <= 0:
            raise ValueError("beta and sigma2 must be positive")


def mor_log_joint(cfg: MorConfig, obs, z: int, theta) -> float:
    """log p(x, y, z | theta) for a sign z in {+1, -1}.

    = -||x||^2/2 - (y - z x^T theta)^2/(2 beta^2)
      - log 2 - log sqrt(2 pi beta^2) - (d/2) log(2 pi).
    """
    if z not in (-1, 1):
        raise ValueError(f"sign latent must be +1 or -1, got {z}")
    x, y = obs
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if x.shape[0] != theta.shape[0]:
        raise DimensionMismatch("covariate and parameter dimensions differ",
                                expected=theta.shape[0], got=x.shape[0])
    resid = y - z * float(x @ theta)
    return float(
        -0.5 * x @ x
        - resid * resid / (2.0 * cfg.beta**2)
        - np.log(2.0)
        - 0.5 * (_LOG_2PI + 2.0 * np.log(cfg.beta))
        - 0.5 * cfg.d * _LOG_2PI
    )


def mor_grad_log_joint(cfg: MorConfig, obs, z: int, theta) -> np.ndarray:
    """Gradient z (y - z x^T theta) x / beta^2 = (z y - x^T theta) x / beta^2."""
    if z not in (-1, 1):
        raise ValueError(f"sign latent must be +1 or -1, got {z}")
    x, y = obs
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    return (z * y - float(x @ theta)) * x / cfg.beta**2


def mor_conditional(cfg: MorConfig, obs, theta) -> float:
    """p(z = +1 | x, y, theta) = logistic(2 y x^T theta / beta^2)."""
    x, y = obs
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    t = 2.0 * y * float(x @ theta) / cfg.beta**2
    # Stable logistic.
    if t >= 0:
        return float(1.0 / (1.0 + np.exp(-t)))
    e = np.exp(t)
    return float(e / (1.0 + e))


def mor_generate(cfg: MorConfig, theta_star, n: int, seed: int) -> Dataset:
    """Draw x ~ N(0, I), z ~ Uniform{+1,-1}, y ~ N(z x^T theta*, beta^2)."""
    if n < 1:
        raise ValueError("generator requires n >= 1")
    theta_star = np.asarray(theta_star, dtype=np.float64).reshape(-1)
    if theta_star.shape[0] != cfg.d:
        raise DimensionMismatch("theta* has the wrong dimension",
                                expected=cfg.d, got=theta_star.shape[0])
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, cfg.d))
    z = rng.choice(np.array([1, -1]), size=n)
    y = z * (X @ theta_star) + cfg.beta * rng.standard_normal(n)
    obs = [(X[i].copy(), float(y[i])) for i in range(n)]
    provenance = {
        "model": "mor",
        "seed": int(seed),
        "n": int(n),
        "config": {"d": cfg.d, "beta": cfg.beta, "sigma2": cfg.sigma2},
        "theta_star": [float(v) for v in theta_star],
        "labels": [int(v) for v in z],
    }
    return Dataset(observations=obs, n=n, provenance=provenance)


def sign_align(cloud: ParticleCloud, reference) -> ParticleCloud:
    """Flip the whole cloud's sign if that brings it closer to the reference.

    The data law is invariant under theta -> -theta, so distances are
    measured after choosing the global sign minimizing w2_point_mass.
    """
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if w2_point_mass(cloud, ref) <= w2_point_mass(cloud, -ref) + 0.0:
        return cloud
    return ParticleCloud(-cloud.points, cloud.weights.copy())


def _design(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([np.asarray(o[0], dtype=np.float64) for o in data.observations])
    y = np.asarray([o[1] for o in data.observations], dtype=np.float64)
    return X, y


def mor_model(cfg: MorConfig, theta_star=None) -> LatentModelSpec:
    """Wire the regression mixture into the generic latent-model interface."""
    beta_sq = cfg.beta**2
    const = -np.log(2.0) - 0.5 * (_LOG_2PI + 2.0 * np.log(cfg.beta)) - 0.5 * cfg.d * _LOG_2PI

    def log_joint(obs, k, theta):
        return mor_log_joint(cfg, obs, _SIGNS[k], theta)

    def grad_log_joint(obs, k, theta):
        return mor_grad_log_joint(cfg, obs, _SIGNS[k], theta)

    def log_prior(theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        return -float(theta @ theta) / (2.0 * cfg.sigma2)

    def grad_log_prior(theta):
        return -np.asarray(theta, dtype=np.float64).reshape(-1) / cfg.sigma2

    def log_joint_table(data, thetas):
        X, y = _design(data)
        proj = thetas @ X.T  # (B, n)
        base = -0.5 * np.einsum("id,id->i", X, X) + const  # (n,)
        out = np.empty((thetas.shape[0], data.n, 2))
        out[:, :, 0] = base[None, :] - (y[None, :] - proj) ** 2 / (2.0 * beta_sq)
        out[:, :, 1] = base[None, :] - (y[None, :] + proj) ** 2 / (2.0 * beta_sq)
        return out

    def neg_loglik_drift(data, R, thetas):
        X, y = _design(data)
        # -sum_i sum_z R_iz (z y_i - x_i^T theta) x_i / beta^2
        #   = (G theta - X^T (s * y)) / beta^2,  s_i = R_i0 - R_i1
        G = X.T @ X
        s = R[:, 0] - R[:, 1]
        rhs = X.T @ (s * y)
        return (thetas @ G.T - rhs[None, :]) / beta_sq

    def grad_log_prior_batch(thetas):
        return -thetas / cfg.sigma2

    def drift_lipschitz_bound(data, resp):
        if data.n == 0:
            return 1.0 / cfg.sigma2
        X, _ = _design(data)
        gram_top = float(np.linalg.eigvalsh(X.T @ X)[-1])
        return gram_top / beta_sq + 1.0 / cfg.sigma2

    def align_for_metric(cloud, reference):
        return sign_align(cloud, reference)

    def mean_log_conditional(data, thetas, weights):
        # Only the sign-dependent cross term y_i <x_i, theta> survives the
        # softmax's row-shift invariance, and it is linear in theta.
        X, y = _design(data)
        proj_mean = X @ (weights @ thetas)  # (n,)
        out = np.empty((data.n, 2))
        out[:, 0] = y * proj_mean / beta_sq
        out[:, 1] = -out[:, 0]
        return out

    return LatentModelSpec(
        K=2,
        param_dim=cfg.d,
        log_joint=log_joint,
        grad_log_joint=grad_log_joint,
        log_prior=log_prior,
        grad_log_prior=grad_log_prior,
        true_param=None if theta_star is None else
        np.asarray(theta_star, dtype=np.float64).reshape(-1),
        name="mor",
        log_joint_table=log_joint_table,
        neg_loglik_drift=neg_loglik_drift,
        grad_log_prior_batch=grad_log_prior_batch,
        drift_lipschitz_bound=drift_lipschitz_bound,
        align_for_metric=align_for_metric,
        mean_log_conditional=mean_log_conditional,
    )
