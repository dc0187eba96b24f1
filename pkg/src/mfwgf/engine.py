"""The alternating particle iteration: E-step responsibilities, M-step
one-step discretized Wasserstein gradient flow on the parameter cloud.

Each iteration first refreshes the latent-class responsibilities from the
current cloud, then moves every particle by the drift evaluated under the
*new* responsibilities.  Two particle schemes realize the gradient step:

- ``langevin``: theta <- theta - tau * drift + sqrt(2 tau) * eta, with eta
  a standard normal drawn from a counter-based stream keyed by
  (seed, iteration, particle) — serial/parallel execution and re-runs
  agree bit for bit.
- ``explicit-kde``: theta <- theta - tau * (drift + score), where the
  score grad log rho is the plug-in Gaussian-KDE estimate from the cloud
  itself; no noise is injected.

A run records per-snapshot clouds and metrics; the distance to a
fixed-point reference cloud is attached afterwards because the reference
itself comes from a longer run.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from mfwgf.errors import (
    DimensionMismatch,
    NonFiniteValue,
    StationarityWarning,
    StepSizeWarning,
    UnsupportedModel,
)
from mfwgf.measures import ParticleCloud, w2_auto, w2_point_mass
from mfwgf.model import (
    Dataset,
    LatentModelSpec,
    Responsibilities,
    drift_batch,
    responsibilities,
)
from mfwgf.rng import PURPOSE_STEP_NOISE, counter_normals

__all__ = [
    "EngineConfig",
    "EngineState",
    "RunTrajectory",
    "Snapshot",
    "FixedPointEstimate",
    "FixedPointReport",
    "kde_score",
    "silverman_bandwidth",
    "mfwgf_step",
    "explicit_step",
    "run",
    "estimate_fixed_point",
    "verify_fixed_point",
    "mean_sample_potential",
    "numerical_errors",
    "write_metrics_csv",
]

_METRIC_NAMES = ("numerical_error", "statistical_error", "potential_mean")


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EngineConfig:
    scheme: str = "langevin"  # or "explicit-kde"
    step_size: float = 1e-3
    step_decay: float = 1.0  # tau_k = step_size * step_decay**k
    iterations: int = 100
    particles: int = 100
    seed: int = 0
    snapshot_every: int = 1
    kde_bandwidth: float | str = "silverman"
    record_metrics: tuple[str, ...] = ("statistical_error", "potential_mean")

    def __post_init__(self):
        if self.scheme not in ("langevin", "explicit-kde"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.step_decay <= 1.0:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.iterations < 0 or self.particles < 1 or self.snapshot_every < 1:
            raise ValueError("iterations >= 0, particles >= 1, snapshot_every >= 1")
        for name in self.record_metrics:
            if name not in _METRIC_NAMES:
                raise ValueError(f"unknown metric {name!r}")
        if isinstance(self.kde_bandwidth, str) and self.kde_bandwidth != "silverman":
            raise ValueError("kde_bandwidth must be positive or 'silverman'")

    def tau(self, k: int) -> float:
        return self.step_size * self.step_decay**k


@dataclass
class EngineState:
    cloud: ParticleCloud
    resp: Optional[Responsibilities]
    iteration: int
    rng_state: tuple  # (seed, next iteration counter)


@dataclass
class Snapshot:
    k: int
    cloud: ParticleCloud
    metrics: dict


@dataclass
class RunTrajectory:
    snapshots: list  # of Snapshot, strictly increasing k
    config: EngineConfig
    warnings: list = field(default_factory=list)

    def cloud_at(self, k: int) -> ParticleCloud:
        for snap in self.snapshots:
            if snap.k == k:
                return snap.cloud
        raise KeyError(f"no snapshot at iteration {k}")

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]


# ---------------------------------------------------------------------------
# KDE score
# ---------------------------------------------------------------------------


def silverman_bandwidth(cloud: ParticleCloud) -> float:
    """Scalar rule-of-thumb bandwidth: mean per-dimension std times
    (4 / ((p + 2) B))^(1/(p+4))."""
    p = cloud.dim
    B = cloud.size
    mean = cloud.weights @ cloud.points
    var = cloud.weights @ (cloud.points - mean) ** 2
    spread = float(np.mean(np.sqrt(var)))
    if spread <= 0:
        raise ValueError("degenerate cloud: zero spread in every dimension")
    return spread * (4.0 / ((p + 2.0) * B)) ** (1.0 / (p + 4.0))


def kde_score(cloud: ParticleCloud, bandwidth: float, query) -> np.ndarray:
    """grad log rho_hat at the query for a Gaussian-kernel KDE.

    Equals the softmax-weighted kernel mean of (theta_b - query)/h^2:
    with s_b = softmax_b(-||query - theta_b||^2 / (2 h^2)) (including the
    log-weights for non-uniform clouds), the score is
    (sum_b s_b theta_b - query) / h^2.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    query = np.asarray(query, dtype=np.float64)
    squeeze = query.ndim == 1
    Q = np.atleast_2d(query)
    if Q.shape[1] != cloud.dim:
        raise DimensionMismatch("query dimension must match the cloud",
                                expected=cloud.dim, got=Q.shape[1])
    logits = -cdist(Q, cloud.points, "sqeuclidean") / (2.0 * bandwidth**2)
    logits = logits + np.log(np.maximum(cloud.weights, 1e-300))[None, :]
    soft = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    score = (soft @ cloud.points - Q) / bandwidth**2
    return score[0] if squeeze else score


def _bandwidth(cfg: EngineConfig, cloud: ParticleCloud) -> float:
    if cfg.kde_bandwidth == "silverman":
        return silverman_bandwidth(cloud)
    bw = float(cfg.kde_bandwidth)
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    return bw


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def _check_guard(model, data, resp, tau, state_or_none, emitted: set) -> None:
    if model.drift_lipschitz_bound is None or "guard" in emitted:
        return
    L = float(model.drift_lipschitz_bound(data, resp))
    if L > 0 and tau > 1.0 / (2.0 * L + 1.0):
        warnings.warn(
            f"step size {tau:.3e} exceeds the stability guard 1/(2L+1) = "
            f"{1.0 / (2.0 * L + 1.0):.3e} for drift Lipschitz bound L = {L:.3e}",
            StepSizeWarning,
            stacklevel=3,
        )
        emitted.add("guard")


def mfwgf_step(model: LatentModelSpec, data: Dataset, state: EngineState,
               cfg: EngineConfig, noise: Optional[np.ndarray] = None,
               _emitted: Optional[set] = None) -> EngineState:
    """One Langevin iteration: refresh responsibilities, then
    theta_b <- theta_b - tau * drift(theta_b) + sqrt(2 tau) * eta_b.

    ``noise`` overrides the counter-based draw (used by tests); by default
    eta_b comes from the stream keyed by (seed, iteration, particle).
    """
    k = state.iteration
    tau = cfg.tau(k)
    cloud = state.cloud
    resp = responsibilities(model, data, cloud)
    _check_guard(model, data, resp, tau, state, _emitted if _emitted is not None else set())
    dr = drift_batch(model, data, resp, cloud.points)
    if not np.all(np.isfinite(dr)):
        b = int(np.argwhere(~np.isfinite(dr))[0][0])
        raise NonFiniteValue("drift is not finite", k=k, b=b)
    if noise is None:
        noise = counter_normals(cfg.seed, PURPOSE_STEP_NOISE, k,
                                cloud.size, cloud.dim)
    new_pts = cloud.points - tau * dr + np.sqrt(2.0 * tau) * noise
    if not np.all(np.isfinite(new_pts)):
        b = int(np.argwhere(~np.isfinite(new_pts))[0][0])
        raise NonFiniteValue("particle update is not finite", k=k, b=b)
    return EngineState(
        cloud=ParticleCloud(new_pts, cloud.weights.copy()),
        resp=resp,
        iteration=k + 1,
        rng_state=(cfg.seed, k + 1),
    )


def explicit_step(model: LatentModelSpec, data: Dataset, state: EngineState,
                  cfg: EngineConfig,
                  score_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                  _emitted: Optional[set] = None) -> EngineState:
    """One deterministic step: theta_b <- theta_b - tau * (drift + score).

    The score grad log rho defaults to the Gaussian-KDE plug-in estimate
    from the current cloud; ``score_fn`` substitutes an exact score (for
    validation against closed forms).  No noise is injected.
    """
    k = state.iteration
    tau = cfg.tau(k)
    cloud = state.cloud
    if score_fn is None and cloud.size < 10:
        raise ValueError("explicit-kde scheme needs at least 10 particles")
    if score_fn is None and np.allclose(cloud.points, cloud.points[0]):
        raise ValueError("degenerate cloud: KDE score undefined when all "
                         "particles coincide")
    resp = responsibilities(model, data, cloud)
    _check_guard(model, data, resp, tau, state, _emitted if _emitted is not None else set())
    dr = drift_batch(model, data, resp, cloud.points)
    if score_fn is not None:
        score = np.atleast_2d(np.asarray(score_fn(cloud.points), dtype=np.float64))
    else:
        score = kde_score(cloud, _bandwidth(cfg, cloud), cloud.points)
    new_pts = cloud.points - tau * (dr + score)
    if not np.all(np.isfinite(new_pts)):
        b = int(np.argwhere(~np.isfinite(new_pts))[0][0])
        raise NonFiniteValue("particle update is not finite", k=k, b=b)
    return EngineState(
        cloud=ParticleCloud(new_pts, cloud.weights.copy()),
        resp=resp,
        iteration=k + 1,
        rng_state=(cfg.seed, k + 1),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mean_sample_potential(model: LatentModelSpec, data: Dataset,
                          resp: Responsibilities, cloud: ParticleCloud) -> float:
    """Cloud average of the sample potential U_n(theta_b, resp)."""
    if data.n == 0:
        return 0.0
    from mfwgf.model import _log_joint_table  # shared table builder

    table = _log_joint_table(model, data, cloud.points)  # (B, n, K)
    per_particle = -np.einsum("bik,ik->b", table, resp.matrix, optimize=False) / data.n
    return float(cloud.weights @ per_particle)


def _aligned_for_truth(model, cloud):
    if model.true_param is None:
        return None
    if model.align_for_metric is not None:
        return model.align_for_metric(cloud, model.true_param)
    return cloud


def _snapshot_metrics(model, data, resp, cloud, record) -> dict:
    out: dict = {}
    if "statistical_error" in record and model.true_param is not None:
        aligned = _aligned_for_truth(model, cloud)
        out["statistical_error_sq"] = w2_point_mass(aligned, model.true_param) ** 2
    if "potential_mean" in record and resp is not None:
        out["mean_potential"] = mean_sample_potential(model, data, resp, cloud)
    return out


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def run(model: LatentModelSpec, data: Dataset, init: ParticleCloud,
        cfg: EngineConfig,
        score_fn: Optional[Callable] = None) -> RunTrajectory:
    """Iterate the configured scheme for ``cfg.iterations`` steps.

    Snapshots are taken at k = 0, every ``snapshot_every`` iterations, and
    at the final iterate.  The trajectory is a pure function of
    (model, data, init, cfg): noise comes from counter-based streams only.
    """
    if init.dim != model.param_dim:
        raise DimensionMismatch("init cloud dimension must match the model",
                                expected=model.param_dim, got=init.dim)
    if init.size != cfg.particles:
        raise DimensionMismatch("init cloud size must match cfg.particles",
                                expected=cfg.particles, got=init.size)
    emitted: set = set()
    state = EngineState(cloud=init, resp=None, iteration=0,
                        rng_state=(cfg.seed, 0))
    t0 = time.perf_counter()
    caught: list = []

    def make_snapshot(st: EngineState) -> Snapshot:
        resp = st.resp
        if resp is None and data.n >= 0:
            resp = responsibilities(model, data, st.cloud)
        metrics = _snapshot_metrics(model, data, resp, st.cloud, cfg.record_metrics)
        metrics["wall_ms"] = (time.perf_counter() - t0) * 1e3
        return Snapshot(k=st.iteration, cloud=st.cloud, metrics=metrics)

    snaps = [make_snapshot(state)]
    with warnings.catch_warnings(record=True) as wrec:
        warnings.simplefilter("always", StepSizeWarning)
        for k in range(cfg.iterations):
            try:
                if cfg.scheme == "langevin":
                    state = mfwgf_step(model, data, state, cfg, _emitted=emitted)
                else:
                    state = explicit_step(model, data, state, cfg,
                                          score_fn=score_fn, _emitted=emitted)
            except Exception as exc:
                raise type(exc)(f"iteration {k}: {exc}") from exc
            if state.iteration % cfg.snapshot_every == 0 or state.iteration == cfg.iterations:
                snaps.append(make_snapshot(state))
    for w in wrec:
        caught.append(str(w.message))
        warnings.warn(w.message, w.category, stacklevel=2)
    return RunTrajectory(snapshots=snaps, config=cfg, warnings=caught)


@dataclass
class FixedPointEstimate:
    """Terminal cloud of an extended run, tagged with a stationarity check.

    ``diagnostic`` is the (Sinkhorn) W2 between the clouds at 90% of the
    extended horizon and at the horizon; ``baseline`` is the W2 between the
    initial and terminal clouds.  A diagnostic above ``warn_ratio x
    baseline`` sets ``warning`` (and emits StationarityWarning).
    """

    cloud: ParticleCloud
    diagnostic: float
    baseline: float
    horizon: int
    warning: bool


def estimate_fixed_point(model: LatentModelSpec, data: Dataset,
                         init: ParticleCloud, cfg: EngineConfig,
                         extension_factor: float = 2.0,
                         warn_ratio: float = 0.1) -> FixedPointEstimate:
    """Run ``extension_factor`` times longer and return the terminal cloud."""
    if extension_factor < 2.0:
        raise ValueError("extension_factor must be at least 2")
    horizon = int(np.ceil(cfg.iterations * extension_factor))
    k90 = int(np.floor(0.9 * horizon))
    longcfg = replace(cfg, iterations=horizon, snapshot_every=max(horizon, 1),
                      record_metrics=())
    emitted: set = set()
    state = EngineState(cloud=init, resp=None, iteration=0, rng_state=(cfg.seed, 0))
    at_k90 = init
    for k in range(horizon):
        if cfg.scheme == "langevin":
            state = mfwgf_step(model, data, state, longcfg, _emitted=emitted)
        else:
            state = explicit_step(model, data, state, longcfg, _emitted=emitted)
        if state.iteration == k90:
            at_k90 = state.cloud
    terminal = state.cloud
    if horizon == 0:
        diagnostic = 0.0
        baseline = 0.0
    else:
        diagnostic = w2_auto(at_k90, terminal).distance
        baseline = w2_auto(init, terminal).distance
    warning = diagnostic > warn_ratio * baseline and baseline > 0
    if warning:
        warnings.warn(
            f"fixed-point estimate still moving: late-run W2 {diagnostic:.3e} "
            f"exceeds {warn_ratio:.0%} of the total displacement {baseline:.3e}",
            StationarityWarning,
            stacklevel=2,
        )
    return FixedPointEstimate(cloud=terminal, diagnostic=diagnostic,
                              baseline=baseline, horizon=horizon, warning=warning)


# ---------------------------------------------------------------------------
# Fixed-point verification (1-D parameter models)
# ---------------------------------------------------------------------------


@dataclass
class FixedPointReport:
    distance: float
    tolerance: float
    passed: bool
    grid: np.ndarray
    density: np.ndarray


def verify_fixed_point(model: LatentModelSpec, data: Dataset,
                       cloud: ParticleCloud, tolerance: float,
                       grid_size: int = 2048) -> FixedPointReport:
    """Check the self-consistency equation on a grid (1-D parameters only).

    With resp computed from the cloud, the candidate stationary density is
    pi(theta) * exp( sum_i sum_z resp_iz log p(X_i, z | theta) ), normalized
    on a grid covering the cloud; the report carries the quantile-based W2
    between the cloud and that density.
    """
    if model.param_dim != 1:
        raise UnsupportedModel("fixed-point verification needs a 1-D parameter")
    resp = responsibilities(model, data, cloud)
    pts = cloud.points[:, 0]
    spread = max(float(pts.std()), 1e-3)
    lo = float(pts.min()) - 6.0 * spread
    hi = float(pts.max()) + 6.0 * spread
    grid = np.linspace(lo, hi, grid_size)

    log_f = np.array([model.log_prior(np.array([g])) for g in grid])
    if data.n > 0:
        from mfwgf.model import _log_joint_table

        table = _log_joint_table(model, data, grid[:, None])  # (G, n, K)
        log_f = log_f + np.einsum("gik,ik->g", table, resp.matrix, optimize=False)
    log_f -= log_f.max()
    dens = np.exp(log_f)
    x_step = grid[1] - grid[0]
    dens /= np.trapz(dens, dx=x_step)

    # Quantiles of the grid density on a shared probability grid.
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * x_step)])
    cdf /= cdf[-1]
    n_u = max(4096, 4 * cloud.size)
    u = (np.arange(n_u) + 0.5) / n_u
    q_dens = np.interp(u, cdf, grid)
    sorted_pts = np.sort(pts)
    q_cloud = sorted_pts[np.minimum((u * cloud.size).astype(int), cloud.size - 1)]
    distance = float(np.sqrt(np.mean((q_dens - q_cloud) ** 2)))
    return FixedPointReport(distance=distance, tolerance=tolerance,
                            passed=distance <= tolerance, grid=grid, density=dens)


# ---------------------------------------------------------------------------
# Post-hoc numerical error and CSV export
# ---------------------------------------------------------------------------


def _error_schedule(n_snapshots: int, budget: Optional[int]) -> np.ndarray:
    """Indices of snapshots at which the (costly) numerical error is computed:
    a dense early prefix plus geometric spacing, always including the ends."""
    if budget is None or n_snapshots <= budget:
        return np.arange(n_snapshots)
    dense = np.arange(budget // 2)
    rest = np.unique(np.geomspace(max(budget // 2, 1), n_snapshots - 1,
                                  budget - budget // 2).astype(int))
    return np.unique(np.concatenate([dense, rest, [n_snapshots - 1]]))


def numerical_errors(traj: RunTrajectory, reference: ParticleCloud,
                     model: Optional[LatentModelSpec] = None,
                     align_target=None,
                     budget: Optional[int] = None) -> dict[int, float]:
    """Squared W2 from each scheduled snapshot cloud to the reference cloud.

    When the model resolves label/sign symmetry, both the snapshots and the
    reference are aligned against ``align_target`` (defaulting to the
    model's true parameter) before measuring.
    """
    align = None
    if model is not None and model.align_for_metric is not None:
        target = align_target if align_target is not None else model.true_param
        if target is not None:
            align = lambda c: model.align_for_metric(c, target)  # noqa: E731
    ref = align(reference) if align else reference
    idx = _error_schedule(len(traj.snapshots), budget)
    out: dict[int, float] = {}
    for i in idx:
        snap = traj.snapshots[i]
        cloud = align(snap.cloud) if align else snap.cloud
        out[snap.k] = w2_auto(cloud, ref).distance ** 2
    return out


def write_metrics_csv(traj: RunTrajectory, path,
                      numerical: Optional[dict[int, float]] = None) -> None:
    """Metrics CSV with columns k, numerical_error_sq, statistical_error_sq,
    mean_potential, wall_ms; unavailable cells are left empty."""
    import csv

    numerical = numerical or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["k", "numerical_error_sq", "statistical_error_sq",
                         "mean_potential", "wall_ms"])
        for snap in traj.snapshots:
            def fmt(v):
                return "" if v is None else f"{v:.17g}"

            writer.writerow([
                snap.k,
                fmt(numerical.get(snap.k)),
                fmt(snap.metrics.get("statistical_error_sq")),
                fmt(snap.metrics.get("mean_potential")),
                fmt(snap.metrics.get("wall_ms")),
            ])
