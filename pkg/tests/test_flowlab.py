"""Grid-level flow schemes against exactly solvable 1-D cases.

The quadratic potential keeps every scheme inside the Gaussian family, so
one-step and steady-state behavior have closed forms: the heat kernel adds
2*tau to the variance, the OU relaxation has an exponential variance law,
the proximal step maps the std through s -> (s + sqrt(s^2 + 4 tau (1+tau)))
/ (2 (1+tau)), and e^{-V}/Z is stationary for the PDE solver.
"""

import numpy as np
import pytest
from scipy.special import ndtri

from mfwgf.flowlab import (
    Density1D,
    Potential1D,
    contraction_check,
    density_quantiles,
    explicit_step_1d,
    fp_solve,
    free_energy,
    free_energy_minimizer_quantiles,
    jko_step_1d,
    jko_step_quantiles,
    langevin_step_1d,
    langevin_vs_fp,
    make_grid,
    order_sweep,
    quadratic_potential,
    quantiles_to_density,
    quartic_potential,
    w2_densities_1d,
)

GRID = make_grid(-8.0, 8.0, 4096)
QUAD = quadratic_potential()


def flat_potential():
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=np.float64))  # noqa: E731
    return Potential1D(v=zero, dv=zero, lam=0.0)


def midlevels(n):
    return (np.arange(n) + 0.5) / n


# ---------------------------------------------------------------------------
# PDE solver: heat kernel, OU law, stationarity, conservation
# ---------------------------------------------------------------------------


def test_fp_zero_potential_is_heat_equation():
    rho0 = Density1D.gaussian(GRID, 0.0, 0.5)
    out = fp_solve(rho0, flat_potential(), horizon=0.3, dt=1e-3)
    assert out.variance() == pytest.approx(0.25 + 2 * 0.3, rel=1e-6)
    assert out.mean() == pytest.approx(0.0, abs=1e-12)


def test_fp_quadratic_variance_relaxation():
    # d var/dt = -2 var + 2 gives var(t) = 1 + (var0 - 1) e^{-2t}.
    rho0 = Density1D.gaussian(GRID, 0.0, 0.4)
    t = 0.5
    out = fp_solve(rho0, QUAD, horizon=t, dt=1e-3)
    v_exact = 1.0 + (0.16 - 1.0) * np.exp(-2.0 * t)
    assert out.variance() == pytest.approx(v_exact, rel=1e-4)


def test_fp_gibbs_density_is_exact_fixed_point():
    pi = Density1D.from_potential(GRID, QUAD)
    out = fp_solve(pi, QUAD, horizon=0.25, dt=5e-3)
    assert np.max(np.abs(out.values - pi.values)) < 1e-9


def test_fp_conserves_mass_and_positivity():
    rho0 = Density1D.gaussian(GRID, 2.0, 0.3)
    out = fp_solve(rho0, quartic_potential(), horizon=0.4, dt=2e-3)
    assert np.trapz(out.values, out.grid) == pytest.approx(1.0, abs=1e-9)
    assert out.values.min() >= 0.0


def test_fp_validation():
    rho0 = Density1D.gaussian(GRID, 0.0, 1.0)
    with pytest.raises(ValueError):
        fp_solve(rho0, QUAD, horizon=-1.0)
    with pytest.raises(ValueError):
        fp_solve(rho0, QUAD, horizon=1.0, theta=1.5)
    with pytest.raises(ValueError):
        fp_solve(rho0, QUAD, horizon=1.0, dt=0.0)


# ---------------------------------------------------------------------------
# Langevin transition on densities
# ---------------------------------------------------------------------------


def test_langevin_step_gaussian_one_step_law():
    # Drift shrinks by (1 - tau), the heat kernel adds 2 tau:
    # N(m, s^2) -> N((1-tau) m, (1-tau)^2 s^2 + 2 tau).
    rho = Density1D.gaussian(GRID, 0.7, 0.5)
    tau = 0.05
    out = langevin_step_1d(rho, QUAD, tau)
    assert out.mean() == pytest.approx((1 - tau) * 0.7, abs=1e-10)
    assert out.variance() == pytest.approx((1 - tau) ** 2 * 0.25 + 2 * tau,
                                           rel=1e-4)
    assert np.trapz(out.values, out.grid) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        langevin_step_1d(rho, QUAD, 0.0)


def test_langevin_iterates_follow_ar1_law():
    # T applications compose to the exact AR(1) Gaussian recursion:
    # mean (1-tau)^T m0, variance a^T v0 + 2 tau (1 - a^T)/(1 - a), a=(1-tau)^2.
    m0, s0, tau, T = 1.5, 0.4, 0.02, 200
    rho = Density1D.gaussian(GRID, m0, s0)
    for _ in range(T):
        rho = langevin_step_1d(rho, QUAD, tau)
    a = (1.0 - tau) ** 2
    v_T = a**T * s0**2 + 2 * tau * (1.0 - a**T) / (1.0 - a)
    assert rho.mean() == pytest.approx((1 - tau) ** T * m0, rel=1e-9)
    assert rho.variance() == pytest.approx(v_T, rel=1e-3)


# ---------------------------------------------------------------------------
# Proximal (minimizing movement) step
# ---------------------------------------------------------------------------


def test_jko_gaussian_std_recursion():
    # Minimizing s^2/2 - log s + (s - s0)^2 / (2 tau) over Gaussians gives
    # s1 = (s0 + sqrt(s0^2 + 4 tau (1 + tau))) / (2 (1 + tau)).
    s0, tau, n = 0.6, 0.25, 4096
    u = midlevels(n)
    q0 = s0 * ndtri(u)
    q1 = jko_step_quantiles(q0, QUAD, tau)
    s1 = (s0 + np.sqrt(s0**2 + 4 * tau * (1 + tau))) / (2 * (1 + tau))
    coef = np.dot(q1, ndtri(u)) / np.dot(ndtri(u), ndtri(u))
    assert coef == pytest.approx(s1, rel=1e-4)
    # The output is still (numerically) a centered Gaussian quantile array.
    assert np.sqrt(np.mean((q1 - coef * ndtri(u)) ** 2)) < 1e-3

    s2 = (s1 + np.sqrt(s1**2 + 4 * tau * (1 + tau))) / (2 * (1 + tau))
    q2 = jko_step_quantiles(q1, QUAD, tau)
    coef2 = np.dot(q2, ndtri(u)) / np.dot(ndtri(u), ndtri(u))
    assert coef2 == pytest.approx(s2, rel=1e-4)


def test_jko_discrete_minimizer_is_fixed_point():
    u = midlevels(2048)
    q_init = 0.5 * ndtri(u) + 1.0
    q_star = free_energy_minimizer_quantiles(q_init, QUAD)
    moved = jko_step_quantiles(q_star, QUAD, tau=0.3)
    assert np.max(np.abs(moved - q_star)) < 1e-6


def test_jko_grid_step_decreases_free_energy():
    rho = Density1D.gaussian(GRID, 1.2, 0.35)
    energies = [free_energy(rho, QUAD)]
    for _ in range(5):
        rho = jko_step_1d(rho, QUAD, tau=0.2)
        energies.append(free_energy(rho, QUAD))
    assert all(b < a for a, b in zip(energies, energies[1:]))
    # Limit point: the standard Gaussian has free energy 1/2 - log sqrt(2 pi e).
    target = 0.5 - np.log(np.sqrt(2 * np.pi * np.e))
    assert energies[-1] > target - 1e-9


def test_jko_validation():
    q = ndtri(midlevels(256))
    with pytest.raises(ValueError):
        jko_step_quantiles(q, QUAD, tau=0.0)
    with pytest.raises(ValueError):
        quantiles_to_density(q[::-1], GRID)


# ---------------------------------------------------------------------------
# Deterministic transport step
# ---------------------------------------------------------------------------


def test_explicit_step_exact_score_scales_gaussian():
    # With the exact score -x/s^2 the map is linear: x (1 - tau (1 - 1/s^2)).
    s, tau = 0.5, 0.05
    rho = Density1D.gaussian(GRID, 0.0, s)
    out = explicit_step_1d(rho, QUAD, tau, score=lambda x: -x / s**2)
    scale = 1.0 - tau * (1.0 - 1.0 / s**2)
    assert out.variance() == pytest.approx(scale**2 * s**2, rel=1e-3)
    assert out.mean() == pytest.approx(0.0, abs=1e-10)


def test_explicit_step_rejects_folding_map():
    # tau (1 - 1/s^2) > 1 makes the drift map decreasing (it folds mass over).
    rho = Density1D.gaussian(GRID, 0.0, 2.0)
    with pytest.raises(ValueError, match="reduce tau"):
        explicit_step_1d(rho, QUAD, tau=2.0, score=lambda x: -x / 4.0)


# ---------------------------------------------------------------------------
# Distances, quantiles, energies
# ---------------------------------------------------------------------------


def test_w2_gaussians_closed_form():
    a = Density1D.gaussian(GRID, -0.5, 0.4)
    b = Density1D.gaussian(GRID, 1.0, 0.9)
    exact = np.hypot(1.5, 0.5)
    assert w2_densities_1d(a, b) == pytest.approx(exact, rel=1e-4)
    assert w2_densities_1d(a, a) == pytest.approx(0.0, abs=1e-12)


def test_w2_triangle_inequality():
    a = Density1D.gaussian(GRID, -1.0, 0.5)
    b = Density1D.gaussian(GRID, 0.0, 1.0)
    c = Density1D.gaussian(GRID, 2.0, 0.3)
    assert w2_densities_1d(a, c) <= (w2_densities_1d(a, b)
                                     + w2_densities_1d(b, c)) + 1e-9


def test_quantile_density_round_trips():
    rho = Density1D.gaussian(GRID, 0.3, 0.8)
    u = midlevels(4096)
    q = density_quantiles(rho, u)
    assert np.all(np.diff(q) > 0)
    back = quantiles_to_density(q, GRID)
    # Reconstruction is faithful up to tail truncation (the extreme
    # quantiles sit where the density underflows the grid).
    assert w2_densities_1d(rho, back) < 0.02
    q2 = density_quantiles(back, u)
    assert np.max(np.abs(q2 - q)[40:-40]) < 0.02
    with pytest.raises(ValueError):
        density_quantiles(rho, np.array([0.0, 0.5]))


def test_free_energy_gaussian_closed_form():
    rho = Density1D.gaussian(GRID, 0.3, 0.7)
    exact = (0.3**2 + 0.7**2) / 2 - np.log(0.7 * np.sqrt(2 * np.pi * np.e))
    assert free_energy(rho, QUAD) == pytest.approx(exact, abs=1e-8)


def test_density_constructor_validation():
    with pytest.raises(ValueError):
        Density1D(GRID, np.full_like(GRID, 2.0 / 16.0 * 3))  # mass 3
    with pytest.raises(ValueError):
        Density1D.gaussian(GRID, 0.0, -1.0)
    with pytest.raises(ValueError):
        Density1D(GRID, -np.ones_like(GRID))
    with pytest.raises(ValueError):
        make_grid(1.0, -1.0)
    bad = np.concatenate([np.linspace(0, 1, 8), [5.0]])
    with pytest.raises(ValueError):
        Density1D.normalized(bad, np.ones(9))


# ---------------------------------------------------------------------------
# Reports: order sweep, contraction, cumulative gap
# ---------------------------------------------------------------------------


def test_order_sweep_flags_identical_scheme_pair():
    rho0 = Density1D.gaussian(GRID, 0.5, 0.6)
    fit = order_sweep(QUAD, rho0, ("jko", "jko"),
                      taus=np.geomspace(1e-3, 1e-1, 5))
    assert fit.degenerate
    assert fit.trim == 0.01
    assert np.isnan(fit.exponent)


def test_order_sweep_validation():
    rho0 = Density1D.gaussian(GRID, 0.0, 1.0)
    taus = np.geomspace(1e-3, 1e-1, 5)
    with pytest.raises(ValueError):
        order_sweep(QUAD, rho0, ("jko", "euler"), taus)
    with pytest.raises(ValueError):
        order_sweep(QUAD, rho0, ("jko",), taus)
    with pytest.raises(ValueError):
        order_sweep(QUAD, rho0, ("fp", "langevin"), taus, trim=0.5)
    with pytest.raises(ValueError):
        order_sweep(QUAD, rho0, ("fp", "langevin"), np.geomspace(1e-3, 1e-1, 3))
    with pytest.raises(ValueError):
        order_sweep(QUAD, rho0, ("fp", "langevin"), np.geomspace(1e-2, 2e-2, 4))


def test_contraction_ratios_track_the_convex_bound():
    # For V''= 1 the proximal iteration contracts squared distance by
    # (1 + tau)^{-2} per step; the report threshold is 1/(1 + tau lam) + 1e-3.
    pi = Density1D.from_potential(GRID, QUAD)
    rho0 = Density1D.gaussian(GRID, 1.0, 0.8)
    rep = contraction_check(QUAD, pi, rho0, tau=0.5, steps=6)
    assert rep.passed and rep.failed_step is None
    assert rep.threshold == pytest.approx(1.0 / 1.5 + 1e-3, rel=1e-9)
    assert np.all(rep.ratios < rep.threshold)
    bound = 1.0 / (1.0 + 0.5) ** 2
    assert np.max(np.abs(rep.ratios - bound)) < 0.01
    assert rep.ratios.max() <= bound + 1e-6
    assert rep.reference_gap < 1e-2
    assert len(rep.distances) == len(rep.ratios) + 1


def test_langevin_vs_fp_report_shape():
    rho0 = Density1D.gaussian(GRID, 1.0, 0.5)
    horizons = [0.25, 0.5, 1.0, 2.0]
    rep = langevin_vs_fp(QUAD, rho0, tau=0.05, horizons=horizons)
    np.testing.assert_allclose(rep.horizons, horizons)
    assert rep.tau == 0.05
    assert np.all(rep.gaps > 0)
    assert np.isfinite(rep.slope) and 0.0 <= rep.r2 <= 1.0
    # The discretization gap cannot grow faster than the tau-biased
    # stationary offset allows; for a strongly convex potential it
    # saturates, so the fitted growth exponent stays well under 2.
    assert rep.slope < 2.2
