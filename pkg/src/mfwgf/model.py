"""Abstract Bayesian latent-variable models and the model-generic inference ops.

A model couples n observations X_i with discrete latent classes Z_i in
{0..K-1} and a global parameter theta in R^p through log p(x, z | theta)
and a prior log pi(theta).  Three operations are shared by every model:

- ``responsibilities``: the variational class distributions
  q_{Z_i}(z) proportional to exp( E_{theta ~ cloud} log p(z | X_i, theta) ),
  estimated over the particle cloud (weighted average of log-conditionals,
  then a max-subtracted softmax per row).
- ``sample_potential``: U_n(theta, q') =
  -(1/n) sum_i sum_z log p(X_i, z | theta) q'_{iz}.
- ``drift``: n * grad U_n(theta, q') - grad log pi(theta), the velocity
  field of the parameter update.

Scalar callables define the contract; models may attach vectorized batch
hooks which must agree with the scalar path (the test suite enforces
this), and all generic fallbacks reduce in a fixed ascending order
(observations outer, classes inner) for bit-reproducibility.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from mfwgf.errors import DimensionMismatch, NonFiniteValue
from mfwgf.measures import ParticleCloud

__all__ = [
    "LatentModelSpec",
    "Dataset",
    "Responsibilities",
    "responsibilities",
    "sample_potential",
    "drift",
    "drift_batch",
    "save_dataset",
    "load_dataset",
]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """n observations of a model-defined record type.

    ``observations`` is indexable: row vectors for mixture models, (x, y)
    pairs for regression models.  ``provenance`` records how the data came
    to be (generator config + seed, or a source path).  n = 0 is permitted
    for prior-targeting diagnostics; generators always produce n >= 1.
    """

    observations: Any
    n: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("dataset size cannot be negative")
        if self.n != len(self.observations):
            raise DimensionMismatch("dataset length disagrees with n",
                                    expected=self.n, got=len(self.observations))


@dataclass(frozen=True)
class Responsibilities:
    """Row-stochastic n x K matrix of latent class distributions."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionMismatch("responsibilities must be an n x K matrix",
                                    got=m.shape)
        if m.shape[0] > 0:
            if np.any(m < -1e-15) or np.any(m > 1 + 1e-12):
                raise ValueError("responsibility entries must lie in [0, 1]")
            rows = m.sum(axis=1)
            if np.max(np.abs(rows - 1.0)) > 1e-10:
                raise ValueError("responsibility rows must sum to 1 within 1e-10")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def K(self) -> int:
        return self.matrix.shape[1]


@dataclass
class LatentModelSpec:
    """A Bayesian latent-variable model with K discrete classes.

    Scalar contract (always present):
      log_joint(x, z, theta)      -> log p(x, z | theta)
      grad_log_joint(x, z, theta) -> gradient in theta, shape (p,)
      log_prior(theta)            -> log pi(theta) up to an additive constant
      grad_log_prior(theta)       -> gradient, shape (p,)

    Optional vectorized hooks (must match the scalar path bit-for-bit up
    to reduction order; used by the engine for speed):
      log_joint_table(data, thetas)            -> (B, n, K)
      neg_loglik_drift(data, resp, thetas)     -> (B, p), equal to
          -sum_i sum_z resp[i, z] * grad_log_joint(X_i, z, theta_b)
      grad_log_prior_batch(thetas)             -> (B, p)
      drift_lipschitz_bound(data, resp)        -> float, upper bound on the
          Lipschitz constant of theta -> drift(theta)
      align_for_metric(cloud, reference)       -> ParticleCloud, resolving
          label/sign symmetry before distances are measured
      mean_log_conditional(data, thetas, weights) -> (n, K), equal to
          sum_b weights[b] * log p(z | X_i, theta_b) up to an additive
          per-row constant (the responsibility softmax is row-shift
          invariant, which lets models exploit linearity in sufficient
          statistics instead of materializing the (B, n, K) table)
    """

    K: int
    param_dim: int
    log_joint: Callable[[Any, int, np.ndarray], float]
    grad_log_joint: Callable[[Any, int, np.ndarray], np.ndarray]
    log_prior: Callable[[np.ndarray], float]
    grad_log_prior: Callable[[np.ndarray], np.ndarray]
    true_param: Optional[np.ndarray] = None
    name: str = "custom"
    log_joint_table: Optional[Callable] = None
    neg_loglik_drift: Optional[Callable] = None
    grad_log_prior_batch: Optional[Callable] = None
    drift_lipschitz_bound: Optional[Callable] = None
    align_for_metric: Optional[Callable] = None
    mean_log_conditional: Optional[Callable] = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("model needs at least one latent class")
        if self.param_dim < 1:
            raise ValueError("parameter dimension must be positive")


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def _log_joint_table(model: LatentModelSpec, data: Dataset,
                     thetas: np.ndarray) -> np.ndarray:
    """(B, n, K) table of log p(X_i, z | theta_b), via hook or scalar loop."""
    if model.log_joint_table is not None:
        table = np.asarray(model.log_joint_table(data, thetas), dtype=np.float64)
    else:
        B = thetas.shape[0]
        table = np.empty((B, data.n, model.K))
        for b in range(B):
            for i in range(data.n):
                x = data.observations[i]
                for z in range(model.K):
                    table[b, i, z] = model.log_joint(x, z, thetas[b])
    if not np.all(np.isfinite(table)):
        b, i, z = np.argwhere(~np.isfinite(table))[0]
        raise NonFiniteValue("log joint is not finite", i=int(i), z=int(z), b=int(b))
    return table


def responsibilities(model: LatentModelSpec, data: Dataset,
                     cloud: ParticleCloud) -> Responsibilities:
    """Latent-class update: rows are softmax of the cloud-averaged log-conditionals.

    Entry (i, z) = softmax_z( sum_b w_b * log p(z | X_i, theta_b) ) where
    log p(z | x, theta) = log_joint(x, z, theta) - logsumexp_k log_joint(x, k, theta).
    """
    if cloud.dim != model.param_dim:
        raise DimensionMismatch("cloud dimension must match model parameter dimension",
                                expected=model.param_dim, got=cloud.dim)
    if data.n == 0:
        return Responsibilities(np.zeros((0, model.K)))
    if model.mean_log_conditional is not None:
        mean_log = model.mean_log_conditional(data, cloud.points, cloud.weights)
    else:
        table = _log_joint_table(model, data, cloud.points)  # (B, n, K)
        log_cond = table - logsumexp(table, axis=2, keepdims=True)
        # Weighted average over particles; einsum without BLAS keeps the
        # reduction order fixed regardless of thread count.
        mean_log = np.einsum("b,bik->ik", cloud.weights, log_cond,
                             optimize=False)
    shifted = mean_log - mean_log.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return Responsibilities(expd / expd.sum(axis=1, keepdims=True))


def sample_potential(model: LatentModelSpec, data: Dataset,
                     resp: Responsibilities, theta: np.ndarray) -> float:
    """U_n(theta, q') = -(1/n) sum_i sum_z log p(X_i, z | theta) q'_{iz}."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != model.param_dim:
        raise DimensionMismatch("theta dimension mismatch",
                                expected=model.param_dim, got=theta.shape[0])
    if resp.n != data.n or resp.K != model.K:
        raise DimensionMismatch("responsibilities shape mismatch",
                                expected=(data.n, model.K),
                                got=(resp.n, resp.K))
    if data.n == 0:
        return 0.0
    table = _log_joint_table(model, data, theta[None, :])[0]  # (n, K)
    total = float(np.einsum("ik,ik->", resp.matrix, table, optimize=False))
    if not np.isfinite(total):
        bad = np.argwhere(~np.isfinite(resp.matrix * table))
        i, z = (bad[0] if len(bad) else (0, 0))
        raise NonFiniteValue("sample potential term is not finite", i=int(i), z=int(z))
    return -total / data.n


def drift(model: LatentModelSpec, data: Dataset, resp: Responsibilities,
          theta: np.ndarray) -> np.ndarray:
    """Velocity field n * grad U_n(theta, resp) - grad log pi(theta).

    Assembled observations-outer, classes-inner in ascending order so the
    floating-point result is reproducible.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    out = drift_batch(model, data, resp, theta[None, :])
    return out[0]


def drift_batch(model: LatentModelSpec, data: Dataset, resp: Responsibilities,
                thetas: np.ndarray) -> np.ndarray:
    """Drift evaluated at a (B, p) batch of parameters; returns (B, p)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[1] != model.param_dim:
        raise DimensionMismatch("theta dimension mismatch",
                                expected=model.param_dim, got=thetas.shape[1])
    if resp.n != data.n or resp.K != model.K:
        raise DimensionMismatch("responsibilities shape mismatch",
                                expected=(data.n, model.K), got=(resp.n, resp.K))
    B = thetas.shape[0]

    if data.n == 0:
        lik = np.zeros((B, model.param_dim))
    elif model.neg_loglik_drift is not None:
        lik = np.asarray(model.neg_loglik_drift(data, resp.matrix, thetas),
                         dtype=np.float64)
    else:
        lik = np.zeros((B, model.param_dim))
        R = resp.matrix
        for b in range(B):
            acc = np.zeros(model.param_dim)
            for i in range(data.n):
                x = data.observations[i]
                for z in range(model.K):
                    acc -= R[i, z] * np.asarray(
                        model.grad_log_joint(x, z, thetas[b]), dtype=np.float64)
            lik[b] = acc
    if not np.all(np.isfinite(lik)):
        b = int(np.argwhere(~np.isfinite(lik))[0][0])
        raise NonFiniteValue("likelihood drift is not finite", b=b)

    if model.grad_log_prior_batch is not None:
        gp = np.asarray(model.grad_log_prior_batch(thetas), dtype=np.float64)
    else:
        gp = np.stack([np.asarray(model.grad_log_prior(t), dtype=np.float64)
                       for t in thetas])
    if not np.all(np.isfinite(gp)):
        b = int(np.argwhere(~np.isfinite(gp))[0][0])
        raise NonFiniteValue("prior gradient is not finite", b=b)
    return lik - gp


# ---------------------------------------------------------------------------
# Dataset serialization: CSV + JSON sidecar
# ---------------------------------------------------------------------------


def _obs_columns(data: Dataset) -> tuple[list[str], np.ndarray]:
    first = data.observations[0]
    if isinstance(first, tuple):  # regression record (x, y)
        xs = np.stack([np.asarray(o[0], dtype=np.float64) for o in data.observations])
        ys = np.asarray([o[1] for o in data.observations], dtype=np.float64)
        cols = [f"x{j}" for j in range(xs.shape[1])] + ["y"]
        return cols, np.column_stack([xs, ys])
    arr = np.atleast_2d(np.asarray(data.observations, dtype=np.float64))
    return [f"x{j}" for j in range(arr.shape[1])], arr


def save_dataset(data: Dataset, csv_path, sidecar_path=None) -> None:
    """Write observations to CSV and provenance to a JSON sidecar."""
    if data.n == 0:
        raise ValueError("refusing to serialize an empty dataset")
    cols, arr = _obs_columns(data)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(cols)
        for row in arr:
            writer.writerow([f"{v:.17g}" for v in row])
    sidecar = sidecar_path or (str(csv_path) + ".json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"n": data.n, "columns": cols, "provenance": data.provenance},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path, sidecar_path=None) -> Dataset:
    sidecar = sidecar_path or (str(csv_path) + ".json")
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {"provenance": {"source": str(csv_path)}}
    with open(csv_path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        cols = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=np.float64)
    if cols and cols[-1] == "y":
        obs: Sequence = [(arr[i, :-1].copy(), float(arr[i, -1])) for i in range(len(arr))]
    else:
        obs = arr
    prov = dict(meta.get("provenance", {}))
    prov.setdefault("source", str(csv_path))
    return Dataset(observations=obs, n=len(arr), provenance=prov)
