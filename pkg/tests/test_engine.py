"""Engine checks against processes with known laws.

With no observations the drift reduces to -grad log prior, so the Langevin
scheme becomes an exactly solvable AR(1)/OU recursion and the explicit
scheme a deterministic linear map -- both give closed-form variance
trajectories to test against.  The conjugate single-component Gaussian
model pins the fixed point to a closed-form posterior.
"""

import csv
import io

import numpy as np
import pytest

from mfwgf.engine import (
    EngineConfig,
    EngineState,
    estimate_fixed_point,
    explicit_step,
    kde_score,
    mean_sample_potential,
    mfwgf_step,
    numerical_errors,
    run,
    silverman_bandwidth,
    verify_fixed_point,
    write_metrics_csv,
)
from mfwgf.errors import (
    DimensionMismatch,
    StationarityWarning,
    StepSizeWarning,
    UnsupportedModel,
)
from mfwgf.gmm import GmmConfig, GmmParams, gmm_generate, gmm_model
from mfwgf.measures import ParticleCloud, w2_point_mass
from mfwgf.model import Dataset, LatentModelSpec, responsibilities


def free_model(dim=1, true_param=None):
    """No data, flat prior: drift is identically zero (pure diffusion)."""
    return LatentModelSpec(
        K=1,
        param_dim=dim,
        log_joint=lambda x, z, th: 0.0,
        grad_log_joint=lambda x, z, th: np.zeros(dim),
        log_prior=lambda th: 0.0,
        grad_log_prior=lambda th: np.zeros(dim),
        true_param=true_param,
        name="free",
    )


def ou_model(dim=1, true_param=None):
    """No data, standard-normal prior: drift(theta) = theta."""
    return LatentModelSpec(
        K=1,
        param_dim=dim,
        log_joint=lambda x, z, th: 0.0,
        grad_log_joint=lambda x, z, th: np.zeros(dim),
        log_prior=lambda th: -0.5 * float(th @ th),
        grad_log_prior=lambda th: -th,
        true_param=true_param,
        name="ou",
    )


def no_data():
    return Dataset(np.zeros((0,)), 0)


def point_cloud(value, B, dim=1):
    return ParticleCloud.uniform(np.full((B, dim), float(value)))


# ---------------------------------------------------------------------------
# Langevin scheme: exactly solvable variance laws
# ---------------------------------------------------------------------------


def test_pure_diffusion_variance():
    # Zero drift: after T steps the per-dimension variance is exactly 2*tau*T.
    B, T, tau = 4000, 50, 1e-2
    cfg = EngineConfig(step_size=tau, iterations=T, particles=B, seed=3,
                       snapshot_every=T, record_metrics=())
    traj = run(free_model(), no_data(), point_cloud(0.0, B), cfg)
    pts = traj.final.cloud.points[:, 0]
    target = 2.0 * tau * T
    # Var of the sample variance of N(0, s^2) is 2 s^4 / B.
    se = target * np.sqrt(2.0 / B)
    assert abs(pts.var() - target) < 4.0 * se
    assert abs(pts.mean()) < 4.0 * np.sqrt(target / B)


def test_ou_variance_matches_ar1_recursion():
    # theta <- (1 - tau) theta + sqrt(2 tau) eta from a point mass has
    # variance v_T = 2 tau (1 - (1-tau)^(2T)) / (1 - (1-tau)^2).
    B, T, tau = 4000, 200, 0.05
    cfg = EngineConfig(step_size=tau, iterations=T, particles=B, seed=11,
                       snapshot_every=T, record_metrics=())
    traj = run(ou_model(), no_data(), point_cloud(0.0, B), cfg)
    pts = traj.final.cloud.points[:, 0]
    a = 1.0 - tau
    v_T = 2.0 * tau * (1.0 - a ** (2 * T)) / (1.0 - a**2)
    se = v_T * np.sqrt(2.0 / B)
    assert abs(pts.var() - v_T) < 4.0 * se


def test_ou_mean_decay_is_deterministic():
    # The mean of the cloud follows m_T = (1 - tau)^T m_0 exactly in
    # expectation; with B particles the noise contribution is O(B^{-1/2}).
    B, T, tau, m0 = 2000, 60, 0.05, 5.0
    cfg = EngineConfig(step_size=tau, iterations=T, particles=B, seed=7,
                       snapshot_every=T, record_metrics=())
    traj = run(ou_model(), no_data(), point_cloud(m0, B), cfg)
    m_T = (1.0 - tau) ** T * m0
    v_T = 2.0 * tau * (1.0 - (1.0 - tau) ** (2 * T)) / (1.0 - (1.0 - tau) ** 2)
    assert abs(traj.final.cloud.points.mean() - m_T) < 4.0 * np.sqrt(v_T / B)


def test_run_is_deterministic_and_snapshot_invariant():
    cfg = EngineConfig(step_size=0.02, iterations=40, particles=64, seed=9)
    a = run(ou_model(), no_data(), point_cloud(1.0, 64), cfg)
    b = run(ou_model(), no_data(), point_cloud(1.0, 64), cfg)
    np.testing.assert_array_equal(a.final.cloud.points, b.final.cloud.points)
    # Snapshot cadence must not change the dynamics.
    sparse = EngineConfig(step_size=0.02, iterations=40, particles=64, seed=9,
                          snapshot_every=7)
    c = run(ou_model(), no_data(), point_cloud(1.0, 64), sparse)
    np.testing.assert_array_equal(a.final.cloud.points, c.final.cloud.points)


def test_seed_changes_noise():
    cfg1 = EngineConfig(step_size=0.02, iterations=5, particles=16, seed=1)
    cfg2 = EngineConfig(step_size=0.02, iterations=5, particles=16, seed=2)
    a = run(free_model(), no_data(), point_cloud(0.0, 16), cfg1)
    b = run(free_model(), no_data(), point_cloud(0.0, 16), cfg2)
    assert not np.array_equal(a.final.cloud.points, b.final.cloud.points)


def test_noise_override_gives_exact_arithmetic():
    model = ou_model()
    cfg = EngineConfig(step_size=0.1, iterations=1, particles=3)
    cloud = ParticleCloud.uniform(np.array([[1.0], [2.0], [-3.0]]))
    state = EngineState(cloud=cloud, resp=None, iteration=0, rng_state=(0, 0))
    eta = np.array([[0.5], [-0.25], [1.0]])
    new = mfwgf_step(model, no_data(), state, cfg, noise=eta)
    expected = cloud.points - 0.1 * cloud.points + np.sqrt(0.2) * eta
    np.testing.assert_allclose(new.cloud.points, expected, rtol=0, atol=1e-15)
    assert new.iteration == 1


# ---------------------------------------------------------------------------
# Snapshot schedule
# ---------------------------------------------------------------------------


def test_snapshot_schedule_includes_start_cadence_and_final():
    cfg = EngineConfig(step_size=0.01, iterations=10, particles=8, seed=0,
                       snapshot_every=3)
    traj = run(free_model(), no_data(), point_cloud(0.0, 8), cfg)
    assert [s.k for s in traj.snapshots] == [0, 3, 6, 9, 10]


def test_zero_iterations_single_snapshot():
    cfg = EngineConfig(step_size=0.01, iterations=0, particles=8, seed=0)
    init = point_cloud(2.0, 8)
    traj = run(ou_model(), no_data(), init, cfg)
    assert len(traj.snapshots) == 1
    assert traj.snapshots[0].k == 0
    np.testing.assert_array_equal(traj.snapshots[0].cloud.points, init.points)


def test_cloud_at_and_final():
    cfg = EngineConfig(step_size=0.01, iterations=6, particles=8, seed=0,
                       snapshot_every=2)
    traj = run(free_model(), no_data(), point_cloud(0.0, 8), cfg)
    assert traj.cloud_at(4) is traj.snapshots[2].cloud
    assert traj.final.k == 6
    with pytest.raises(KeyError):
        traj.cloud_at(5)


# ---------------------------------------------------------------------------
# Recorded metrics
# ---------------------------------------------------------------------------


def test_statistical_error_metric_matches_point_mass_distance():
    star = np.array([1.5])
    model = ou_model(true_param=star)
    cfg = EngineConfig(step_size=0.01, iterations=0, particles=32, seed=0)
    init = ParticleCloud.uniform(np.linspace(-1, 1, 32)[:, None])
    traj = run(model, no_data(), init, cfg)
    got = traj.snapshots[0].metrics["statistical_error_sq"]
    assert got == pytest.approx(w2_point_mass(init, star) ** 2, rel=1e-12)
    assert "wall_ms" in traj.snapshots[0].metrics


def test_mean_potential_metric_and_direct_average():
    cfg = GmmConfig(K=2, d=1, beta=1.0, weights=(0.5, 0.5), prior="gaussian")
    star = GmmParams(centers=np.array([[-1.0], [1.0]]))
    model = gmm_model(cfg, star)
    data = gmm_generate(cfg, star, n=20, seed=0)
    cloud = ParticleCloud.uniform(
        np.array([[-1.2, 0.8], [-0.9, 1.1], [-1.0, 1.0]]))
    resp = responsibilities(model, data, cloud)
    # Cloud average of U_n = -(1/n) sum_i sum_z r_iz log p(x_i, z | theta).
    from mfwgf.model import sample_potential

    by_hand = np.mean([sample_potential(model, data, resp, p)
                       for p in cloud.points])
    got = mean_sample_potential(model, data, resp, cloud)
    assert got == pytest.approx(by_hand, rel=1e-12)

    ecfg = EngineConfig(step_size=1e-3, iterations=0, particles=3, seed=0)
    traj = run(model, data, cloud, ecfg)
    assert traj.snapshots[0].metrics["mean_potential"] == pytest.approx(
        got, rel=1e-12)


def test_mean_potential_empty_data_is_zero():
    model = ou_model()
    cloud = point_cloud(1.0, 4)
    resp = responsibilities(model, no_data(), cloud)
    assert mean_sample_potential(model, no_data(), resp, cloud) == 0.0


# ---------------------------------------------------------------------------
# KDE score and bandwidth
# ---------------------------------------------------------------------------


def test_kde_score_single_point_closed_form():
    # One particle at mu: rho_hat = N(mu, h^2 I), score(q) = (mu - q)/h^2.
    mu = np.array([0.7, -0.3])
    cloud = ParticleCloud.uniform(mu[None, :])
    q = np.array([1.0, 1.0])
    got = kde_score(cloud, 0.5, q)
    np.testing.assert_allclose(got, (mu - q) / 0.25, rtol=1e-12)


def test_kde_score_matches_finite_difference():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(30, 2))
    w = rng.uniform(0.5, 1.5, size=30)
    w /= w.sum()
    cloud = ParticleCloud(pts, w)
    h = 0.4

    def log_density(q):
        sq = np.sum((q[None, :] - pts) ** 2, axis=1)
        return float(np.log(np.sum(w * np.exp(-sq / (2 * h * h)))))

    q = np.array([0.3, -0.6])
    eps = 1e-6
    fd = np.array([
        (log_density(q + eps * e) - log_density(q - eps * e)) / (2 * eps)
        for e in np.eye(2)
    ])
    np.testing.assert_allclose(kde_score(cloud, h, q), fd, atol=1e-5)


def test_kde_score_batch_rows_match_single_queries():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(12, 3))
    cloud = ParticleCloud.uniform(pts)
    queries = rng.normal(size=(4, 3))
    batch = kde_score(cloud, 0.7, queries)
    for i in range(4):
        np.testing.assert_allclose(batch[i], kde_score(cloud, 0.7, queries[i]),
                                   rtol=1e-12)


def test_kde_score_validation():
    cloud = ParticleCloud.uniform(np.zeros((5, 2)) + np.arange(5)[:, None])
    with pytest.raises(ValueError):
        kde_score(cloud, 0.0, np.zeros(2))
    with pytest.raises(DimensionMismatch):
        kde_score(cloud, 1.0, np.zeros(3))


def test_silverman_bandwidth_formula():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(200, 3)) * np.array([1.0, 2.0, 0.5])
    cloud = ParticleCloud.uniform(pts)
    p, B = 3, 200
    spread = np.mean(pts.std(axis=0))
    expected = spread * (4.0 / ((p + 2) * B)) ** (1.0 / (p + 4))
    assert silverman_bandwidth(cloud) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        silverman_bandwidth(point_cloud(0.0, 10))


# ---------------------------------------------------------------------------
# Explicit scheme
# ---------------------------------------------------------------------------


def test_explicit_step_with_exact_score_is_linear_map():
    # For the OU drift with score of N(0, v): theta <- theta (1 - tau (1 - 1/v)).
    # Feeding the empirical variance back in gives an exactly predictable
    # variance recursion v <- v (1 - tau (1 - 1/v))^2 with fixed point 1.
    model = ou_model()
    B, T, tau = 400, 300, 0.1
    pts = np.linspace(-1, 1, B)[:, None] * 0.2
    state = EngineState(cloud=ParticleCloud.uniform(pts), resp=None,
                        iteration=0, rng_state=(0, 0))
    cfg = EngineConfig(scheme="explicit-kde", step_size=tau, iterations=1,
                       particles=B)
    v = float(pts.var())
    for _ in range(T):
        cur = float(state.cloud.points.var())
        assert cur == pytest.approx(v, rel=1e-9)
        scale = 1.0 / cur
        state = explicit_step(model, no_data(), state, cfg,
                              score_fn=lambda q, s=scale: -q * s)
        v = v * (1.0 - tau * (1.0 - 1.0 / v)) ** 2
        state = EngineState(cloud=state.cloud, resp=None,
                            iteration=0, rng_state=(0, 0))  # constant tau
    assert abs(np.sqrt(v) - 1.0) < 1e-6
    assert state.cloud.points.var() == pytest.approx(v, rel=1e-9)


def test_explicit_kde_equilibrates_near_unit_gaussian():
    # Plug-in KDE score biases the stationary spread by O(h^2); with
    # B = 1000 that is a few percent, so 10% slack is a real check.
    B, T, tau = 1000, 300, 0.05
    cfg = EngineConfig(scheme="explicit-kde", step_size=tau, iterations=T,
                       particles=B, seed=0, snapshot_every=T,
                       record_metrics=())
    init = ParticleCloud.uniform(np.linspace(-0.5, 0.5, B)[:, None])
    traj = run(ou_model(), no_data(), init, cfg)
    std = traj.final.cloud.points.std()
    assert 0.9 < std < 1.1
    assert abs(traj.final.cloud.points.mean()) < 0.05


def test_explicit_step_guards():
    cfg = EngineConfig(scheme="explicit-kde", step_size=0.01, iterations=1,
                       particles=4)
    state = EngineState(cloud=point_cloud(1.0, 4), resp=None, iteration=0,
                        rng_state=(0, 0))
    with pytest.raises(ValueError):
        explicit_step(ou_model(), no_data(), state, cfg)  # too few particles
    big = EngineState(cloud=point_cloud(1.0, 32), resp=None, iteration=0,
                      rng_state=(0, 0))
    cfg32 = EngineConfig(scheme="explicit-kde", step_size=0.01, iterations=1,
                         particles=32)
    with pytest.raises(ValueError):
        explicit_step(ou_model(), no_data(), big, cfg32)  # coincident cloud


# ---------------------------------------------------------------------------
# Step-size guard
# ---------------------------------------------------------------------------


def test_step_size_warning_fires_once_above_guard():
    cfg_g = GmmConfig(K=2, d=1, beta=0.5, weights=(0.5, 0.5), prior="gaussian")
    star = GmmParams(centers=np.array([[-1.0], [1.0]]))
    model = gmm_model(cfg_g, star)
    assert model.drift_lipschitz_bound is not None
    data = gmm_generate(cfg_g, star, n=50, seed=1)
    init = ParticleCloud.uniform(
        np.tile(star.centers.ravel(), (16, 1)) + 0.01 * np.arange(16)[:, None])
    loud = EngineConfig(step_size=5.0, iterations=3, particles=16, seed=0,
                        record_metrics=())
    with pytest.warns(StepSizeWarning):
        traj = run(model, data, init, loud)
    assert sum("stability guard" in w for w in traj.warnings) == 1

    quiet = EngineConfig(step_size=1e-5, iterations=3, particles=16, seed=0,
                         record_metrics=())
    traj = run(model, data, init, quiet)
    assert traj.warnings == []


# ---------------------------------------------------------------------------
# Fixed point: conjugate single-component model
# ---------------------------------------------------------------------------


def conjugate_setup(n=40, beta=1.0, sigma2=1.0, seed=2):
    cfg = GmmConfig(K=1, d=1, beta=beta, weights=(1.0,), prior="gaussian",
                    sigma2=sigma2)
    star = GmmParams(centers=np.array([[1.0]]))
    model = gmm_model(cfg, star)
    data = gmm_generate(cfg, star, n=n, seed=seed)
    x = np.asarray(data.observations, dtype=np.float64).ravel()
    prec = n / beta**2 + 1.0 / sigma2
    post_mean = (x.sum() / beta**2) / prec
    return model, data, post_mean, 1.0 / prec


def test_fixed_point_matches_conjugate_posterior():
    model, data, post_mean, post_var = conjugate_setup()
    # B stays below the auto-dispatch cap so the stationarity diagnostics
    # inside estimate_fixed_point use the exact assignment distance.
    B = 2000
    cfg = EngineConfig(step_size=2e-3, iterations=600, particles=B, seed=5,
                       record_metrics=(), snapshot_every=600)
    init = ParticleCloud.uniform(np.full((B, 1), post_mean))
    est = estimate_fixed_point(model, data, init, cfg)
    pts = est.cloud.points[:, 0]
    # Discretization bias is O(tau); with tau = 2e-3 it is well inside the
    # 4-sigma Monte Carlo band around the exact posterior moments.
    assert abs(pts.mean() - post_mean) < 4.0 * np.sqrt(post_var / B) + 2e-3
    assert abs(pts.var() - post_var) < 4.0 * post_var * np.sqrt(2.0 / B) + 2e-3
    assert est.horizon == 1200
    assert not est.warning


def test_verify_fixed_point_accepts_posterior_cloud():
    model, data, post_mean, post_var = conjugate_setup()
    rng = np.random.default_rng(8)
    good = ParticleCloud.uniform(
        (post_mean + np.sqrt(post_var) * rng.normal(size=4000))[:, None])
    report = verify_fixed_point(model, data, good, tolerance=0.05)
    assert report.passed
    assert report.distance < 0.05
    # The reported density integrates to one on its grid.
    assert np.trapz(report.density, report.grid) == pytest.approx(1.0, rel=1e-6)

    shifted = ParticleCloud.uniform(good.points + 1.0)
    bad = verify_fixed_point(model, data, shifted, tolerance=0.05)
    assert not bad.passed
    assert bad.distance > 0.5


def test_verify_fixed_point_rejects_multidim():
    cfg = GmmConfig(K=2, d=1, beta=1.0, weights=(0.5, 0.5), prior="gaussian")
    star = GmmParams(centers=np.array([[-1.0], [1.0]]))
    model = gmm_model(cfg, star)
    data = gmm_generate(cfg, star, n=10, seed=0)
    with pytest.raises(UnsupportedModel):
        verify_fixed_point(model, data, point_cloud(0.0, 8, dim=2), 0.1)


def test_estimate_fixed_point_warns_when_still_moving():
    model = ou_model()
    B = 200
    cfg = EngineConfig(step_size=0.01, iterations=2, particles=B, seed=0,
                       record_metrics=())
    init = point_cloud(10.0, B)
    with pytest.warns(StationarityWarning):
        est = estimate_fixed_point(model, no_data(), init, cfg)
    assert est.warning
    assert est.diagnostic > 0.1 * est.baseline
    with pytest.raises(ValueError):
        estimate_fixed_point(model, no_data(), init, cfg, extension_factor=1.5)


# ---------------------------------------------------------------------------
# Numerical-error schedule and CSV export
# ---------------------------------------------------------------------------


def test_numerical_errors_all_snapshots_without_budget():
    cfg = EngineConfig(step_size=0.05, iterations=30, particles=100, seed=3,
                       record_metrics=())
    traj = run(ou_model(), no_data(), point_cloud(4.0, 100), cfg)
    ref = traj.final.cloud
    errs = numerical_errors(traj, ref)
    assert sorted(errs) == [s.k for s in traj.snapshots]
    assert errs[30] == pytest.approx(0.0, abs=1e-12)
    assert errs[0] == pytest.approx(w2_point_mass(ref, np.array([4.0])) ** 2,
                                    rel=1e-9)


def test_numerical_errors_budget_keeps_ends_dense_prefix():
    cfg = EngineConfig(step_size=0.05, iterations=300, particles=40, seed=3,
                       record_metrics=())
    traj = run(ou_model(), no_data(), point_cloud(1.0, 40), cfg)
    errs = numerical_errors(traj, traj.final.cloud, budget=40)
    ks = sorted(errs)
    assert len(ks) <= 41
    assert ks[0] == 0 and ks[-1] == 300
    # Dense early prefix: the first budget//2 snapshots are all present.
    assert ks[:20] == list(range(20))


def test_write_metrics_csv_columns_and_gaps(tmp_path):
    star = np.array([0.0])
    cfg = EngineConfig(step_size=0.05, iterations=4, particles=50, seed=1)
    traj = run(ou_model(true_param=star), no_data(), point_cloud(2.0, 50), cfg)
    numerical = numerical_errors(traj, traj.final.cloud)
    del numerical[2]  # leave a hole to test empty cells
    path = tmp_path / "metrics.csv"
    write_metrics_csv(traj, path, numerical=numerical)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert rows[0] == ["k", "numerical_error_sq", "statistical_error_sq",
                       "mean_potential", "wall_ms"]
    assert len(rows) == 1 + len(traj.snapshots)
    by_k = {int(r[0]): r for r in rows[1:]}
    assert by_k[2][1] == ""
    assert float(by_k[0][1]) == pytest.approx(numerical[0], rel=1e-9)
    assert float(by_k[0][2]) == pytest.approx(4.0, rel=1e-9)  # W2^2 to 0
    # Empty data: mean_potential recorded as 0.
    assert float(by_k[0][3]) == 0.0
    assert all(float(r[4]) >= 0.0 for r in rows[1:])


def test_write_metrics_csv_without_numerical(tmp_path):
    cfg = EngineConfig(step_size=0.05, iterations=2, particles=20, seed=1)
    traj = run(ou_model(), no_data(), point_cloud(1.0, 20), cfg)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(traj, path)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert all(r[1] == "" for r in rows[1:])


# ---------------------------------------------------------------------------
# Config and input validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"scheme": "implicit"},
    {"step_size": 0.0},
    {"step_size": -1.0},
    {"step_decay": 0.0},
    {"step_decay": 1.5},
    {"iterations": -1},
    {"particles": 0},
    {"snapshot_every": 0},
    {"record_metrics": ("speed",)},
    {"kde_bandwidth": "scott"},
])
def test_engine_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        EngineConfig(**kwargs)


def test_tau_decay_schedule():
    cfg = EngineConfig(step_size=0.2, step_decay=0.5)
    assert cfg.tau(0) == 0.2
    assert cfg.tau(3) == pytest.approx(0.2 * 0.125)


def test_run_rejects_mismatched_init():
    cfg = EngineConfig(step_size=0.01, iterations=1, particles=8)
    with pytest.raises(DimensionMismatch):
        run(ou_model(), no_data(), point_cloud(0.0, 8, dim=2), cfg)
    with pytest.raises(DimensionMismatch):
        run(ou_model(), no_data(), point_cloud(0.0, 9), cfg)
