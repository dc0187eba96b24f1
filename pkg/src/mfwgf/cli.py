"""Config-driven experiment runner.

Subcommands
-----------
generate        write a synthetic dataset (CSV + JSON sidecar) and manifest
run             run the particle flow, export metrics CSV and clouds
sweep           run per sweep value, fit log-error slopes, tabulate
compare-gibbs   run the flow and a Gibbs chain, compare aligned posteriors
flowlab         1-D scheme-order / contraction / cumulative-gap presets
check           fast self-contained health battery (exit 1 on violation)

Every output directory receives a ``manifest.json`` with the config echo,
all seeds, and SHA-256 hashes of inputs and outputs, sufficient to re-run
bit-identically.  Flags override file values: ``--seed`` replaces the
engine seed (and the data seed for ``generate``), ``--out`` the output
directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from copy import deepcopy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mfwgf import __version__
from mfwgf import flowlab as fl
from mfwgf.baselines import gibbs_gmm, gibbs_mor, init_cloud, kmeans_init
from mfwgf.config import (
    ExperimentConfig,
    build_dataset,
    build_engine_config,
    build_model,
    load_config,
    validate_config,
)
from mfwgf.engine import (
    EngineConfig,
    estimate_fixed_point,
    numerical_errors,
    run,
    write_metrics_csv,
)
from mfwgf.errors import ConfigError, MfwgfError
from mfwgf.gmm import GmmConfig
from mfwgf.measures import ParticleCloud, save_cloud, w2_point_mass
from mfwgf.model import Dataset, save_dataset
from mfwgf.mor import MorConfig
from mfwgf.rng import PURPOSE_INIT, counter_normals

__all__ = [
    "main",
    "SlopeFit",
    "loglinear_fit",
    "pre_plateau_fit",
    "compare_clouds",
    "contour_grid",
]


# ---------------------------------------------------------------------------
# Small analysis helpers (shared with the acceptance suite)
# ---------------------------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float          # per unit of x (per iteration for error curves)
    intercept: float
    r2: float
    window: int           # number of points in the fitted window
    plateau_found: bool   # True when a qualifying prefix window exists


def loglinear_fit(x, y) -> tuple:
    """Least-squares line through (x, log y); returns (slope, intercept, r2)."""
    x = np.asarray(x, dtype=np.float64)
    ly = np.log(np.asarray(y, dtype=np.float64))
    slope, intercept = np.polyfit(x, ly, 1)
    pred = slope * x + intercept
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(slope), float(intercept), r2


def pre_plateau_fit(ks, errors, r2_min: float = 0.9,
                    min_points: int = 10) -> SlopeFit:
    """Slope of log error over the pre-plateau window.

    Error curves decay log-linearly and then flatten at a noise floor
    (finite-sample W2 between clouds near the same law never reaches
    zero).  The fitted window is the largest prefix of the positive-error
    series whose linear fit in (k, log error) keeps R^2 >= ``r2_min``,
    with at least ``min_points`` points: growing the prefix past the knee
    drags R^2 below the bar, so the largest passing prefix ends near the
    knee.  When even the shortest prefix fails the bar (or the series is
    shorter than ``min_points``) the whole series is fitted instead and
    ``plateau_found`` is False.
    """
    ks = np.asarray(ks, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    keep = errors > 0
    ks, errors = ks[keep], errors[keep]
    if ks.size < 2:
        raise ValueError("need at least two positive error values")

    best = None
    for end in range(min_points, ks.size + 1):
        slope, intercept, r2 = loglinear_fit(ks[:end], errors[:end])
        if r2 >= r2_min:
            best = SlopeFit(slope, intercept, r2, end, True)
    if best is not None:
        return best
    slope, intercept, r2 = loglinear_fit(ks, errors)
    return SlopeFit(slope, intercept, r2, int(ks.size), False)


def compare_clouds(a: ParticleCloud, b: ParticleCloud, batches: int = 20) -> dict:
    """Componentwise mean comparison of two sample clouds.

    Standard errors: cloud ``a`` (particles) uses std/sqrt(B); cloud ``b``
    (a chain) uses batch means to absorb autocorrelation.  Returns means,
    differences, combined SEs, z-scores, and marginal std ratios.
    """
    mean_a = a.weights @ a.points
    mean_b = b.weights @ b.points
    var_a = a.weights @ (a.points - mean_a) ** 2
    var_b = b.weights @ (b.points - mean_b) ** 2
    se_a = np.sqrt(var_a / a.size)
    nb = max(2, min(batches, b.size))
    cuts = np.array_split(np.arange(b.size), nb)
    bmeans = np.stack([b.points[c].mean(axis=0) for c in cuts])
    se_b = bmeans.std(axis=0, ddof=1) / np.sqrt(nb)
    combined = np.sqrt(se_a**2 + se_b**2)
    diff = mean_a - mean_b
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(combined > 0, diff / combined, 0.0)
        std_ratio = np.sqrt(var_a / np.maximum(var_b, 1e-300))
    return {
        "mean_a": mean_a.tolist(),
        "mean_b": mean_b.tolist(),
        "diff": diff.tolist(),
        "se_combined": combined.tolist(),
        "z": z.tolist(),
        "std_ratio": std_ratio.tolist(),
        "max_abs_z": float(np.abs(z).max()),
    }


def contour_grid(samples_a: np.ndarray, samples_b: np.ndarray,
                 bins: int = 64, smooth: float = 1.5) -> dict:
    """Kernel-smoothed 2-D histograms of two point sets on a shared grid."""
    from scipy.ndimage import gaussian_filter

    both = np.vstack([samples_a, samples_b])
    lo = both.min(axis=0)
    hi = both.max(axis=0)
    pad = 0.05 * np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad, hi + pad
    rng = [[lo[0], hi[0]], [lo[1], hi[1]]]
    out = {}
    for name, pts in (("a", samples_a), ("b", samples_b)):
        h, xe, ye = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=rng)
        h = gaussian_filter(h, sigma=smooth)
        out[name] = h / h.sum()
    out["x_edges"], out["y_edges"] = xe, ye
    return out


# ---------------------------------------------------------------------------
# Output plumbing
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_outdir(out: str, force: bool) -> str:
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise ConfigError(f"output directory {out!r} is not empty; "
                          f"pass --force to overwrite")
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(outdir: str, command: str, cfg: Optional[ExperimentConfig],
                    seeds: dict, inputs: dict, results: Optional[dict] = None,
                    skip_hash: tuple = ("manifest.json",)) -> None:
    outputs = {}
    for name in sorted(os.listdir(outdir)):
        path = os.path.join(outdir, name)
        if os.path.isfile(path) and name not in skip_hash:
            outputs[name] = _sha256(path)
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config": None if cfg is None else cfg.raw,
        "seeds": seeds,
        "input_hashes": inputs,
        "output_hashes": outputs,
    }
    if results is not None:
        manifest["results"] = results
    _write_json(os.path.join(outdir, "manifest.json"), manifest)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------


def _prior_scales(model_cfg) -> np.ndarray:
    if isinstance(model_cfg, GmmConfig):
        scales = [np.sqrt(model_cfg.sigma2)] * (model_cfg.K * model_cfg.d)
        if model_cfg.unknown_weights:
            scales += [np.sqrt(model_cfg.weight_sigma2)] * model_cfg.K
        return np.asarray(scales)
    return np.full(model_cfg.d, np.sqrt(model_cfg.sigma2))


def _build_init(block: Optional[dict], model, model_cfg, data: Dataset,
                ecfg: EngineConfig) -> ParticleCloud:
    block = block or {}
    default_kind = "kmeans" if isinstance(model_cfg, GmmConfig) else "prior"
    kind = block.get("kind", default_kind)
    seed = block.get("seed", ecfg.seed)
    noise = float(block.get("noise_scale", 0.5))
    if kind == "kmeans":
        if not isinstance(model_cfg, GmmConfig):
            raise ConfigError("init.kind=kmeans only applies to the mixture "
                              "model")
        centers = kmeans_init(data, model_cfg.K, seed=seed,
                              restarts=block.get("restarts", 4))
        point = centers.ravel()
        if model_cfg.unknown_weights:
            point = np.concatenate([point, np.zeros(model_cfg.K)])
        return init_cloud(point, noise, ecfg.particles, seed)
    if kind == "point":
        point = np.asarray(block.get("point"), dtype=np.float64)
        if point.shape != (model.param_dim,):
            raise ConfigError(f"init.point: expected {model.param_dim} numbers")
        return init_cloud(point, noise, ecfg.particles, seed)
    # Prior draw (the Gaussian envelope of the prior; the repulsive factor
    # only thins already-rare coincident centers).
    scales = _prior_scales(model_cfg)
    pts = counter_normals(seed, PURPOSE_INIT, 0, ecfg.particles,
                          scales.size) * scales[None, :]
    return ParticleCloud.uniform(pts)


def _thin_to(cloud: ParticleCloud, size: int) -> ParticleCloud:
    if cloud.size <= size:
        return cloud
    idx = np.linspace(0, cloud.size - 1, size).astype(int)
    return ParticleCloud.uniform(cloud.points[idx])


def _reference_cloud(kind: str, model, model_cfg, data, init, ecfg,
                     metrics_block: dict, gibbs_block: Optional[dict]):
    """Reference for the optimization-error column, per metrics.reference."""
    if kind == "none":
        return None, {}
    if kind == "true_param":
        if model.true_param is None:
            raise ConfigError("metrics.reference=true_param needs "
                              "model.theta_star")
        return ParticleCloud.uniform(model.true_param[None, :]), {}
    if kind == "fixed_point":
        est = estimate_fixed_point(
            model, data, init, ecfg,
            extension_factor=float(metrics_block.get("extension_factor", 2.0)))
        info = {"diagnostic_w2": est.diagnostic, "baseline_w2": est.baseline,
                "horizon": est.horizon, "stationarity_warning": est.warning}
        return est.cloud, info
    # Gibbs reference
    gb = gibbs_block or {}
    giter = gb.get("iterations", 2000)
    gseed = gb.get("seed", 1)
    if isinstance(model_cfg, GmmConfig):
        rep = gibbs_gmm(model_cfg, data, giter, gb.get("burn_in"),
                        gseed, gb.get("mh_step", 0.2))
    else:
        rep = gibbs_mor(model_cfg, data, giter, gb.get("burn_in"), gseed)
    info = {"gibbs_acceptance": rep.acceptance_rate,
            "gibbs_warnings": list(rep.warnings)}
    return _thin_to(rep.samples, ecfg.particles), info


def _run_single(cfg: ExperimentConfig, outdir: str,
                seed_override: Optional[int]) -> dict:
    """Shared body of cmd_run and each sweep member.  Returns fit summary."""
    model, model_cfg, theta_star = build_model(cfg.block("model"))
    data = build_dataset(cfg.block("data"), model_cfg, theta_star)
    ecfg = build_engine_config(cfg.block("engine"), seed_override)
    init = _build_init(cfg.block("init"), model, model_cfg, data, ecfg)

    if "generate" in (cfg.block("data") or {}):
        save_dataset(data, os.path.join(outdir, "dataset.csv"))
    save_cloud(init, os.path.join(outdir, "init_cloud.pcld"))

    traj = run(model, data, init, ecfg)
    save_cloud(traj.final.cloud, os.path.join(outdir, "final_cloud.pcld"))

    metrics_block = cfg.block("metrics", {}) or {}
    ref_kind = metrics_block.get("reference", "none")
    reference, ref_info = _reference_cloud(
        ref_kind, model, model_cfg, data, init, ecfg, metrics_block,
        cfg.block("gibbs"))
    numerical = None
    summary: dict = {"reference": ref_kind, **ref_info}
    if reference is not None:
        save_cloud(reference, os.path.join(outdir, "reference_cloud.pcld"))
        numerical = numerical_errors(
            traj, reference, model,
            budget=metrics_block.get("error_budget"))
        ks = sorted(numerical)
        errs = [numerical[k] for k in ks]
        try:
            fit = pre_plateau_fit(ks, errs)
            summary["fit"] = {
                "slope_per_iteration": fit.slope, "r2": fit.r2,
                "window": fit.window, "plateau_found": fit.plateau_found,
            }
        except ValueError:
            summary["fit"] = None
    write_metrics_csv(traj, os.path.join(outdir, "metrics.csv"), numerical)

    final = traj.final
    summary["iterations"] = ecfg.iterations
    summary["terminal_statistical_error_sq"] = final.metrics.get(
        "statistical_error_sq")
    summary["terminal_mean_potential"] = final.metrics.get("mean_potential")
    summary["engine_warnings"] = list(traj.warnings)
    _write_json(os.path.join(outdir, "fit.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    data_block = cfg.block("data") or {}
    if "generate" not in data_block:
        raise ConfigError("generate: config needs a data.generate block")
    outdir = _ensure_outdir(args.out or cfg.block("output") or "out/generate",
                            args.force)
    model, model_cfg, theta_star = build_model(cfg.block("model"))
    data = build_dataset(data_block, model_cfg, theta_star,
                         seed_override=args.seed)
    csv_path = os.path.join(outdir, "dataset.csv")
    save_dataset(data, csv_path)
    seed = args.seed if args.seed is not None else \
        data_block["generate"].get("seed", 0)
    _write_manifest(outdir, "generate", cfg, {"data": seed}, {})
    print(f"wrote {data.n} observations to {csv_path}")
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    outdir = _ensure_outdir(args.out or cfg.block("output") or "out/run",
                            args.force)
    summary = _run_single(cfg, outdir, args.seed)
    seeds = {
        "engine": args.seed if args.seed is not None else
        (cfg.block("engine") or {}).get("seed", 0),
        "data": ((cfg.block("data") or {}).get("generate") or {}).get("seed"),
    }
    inputs = {}
    data_block = cfg.block("data") or {}
    if "load" in data_block:
        inputs["dataset"] = _sha256(data_block["load"]["path"])
    _write_manifest(outdir, "run", cfg, seeds, inputs, summary)
    stat = summary.get("terminal_statistical_error_sq")
    print(f"run complete: {summary['iterations']} iterations, terminal "
          f"statistical error {stat if stat is None else f'{stat:.6g}'}")
    return 0


def _sweep_member_config(raw: dict, parameter: str, value) -> dict:
    member = deepcopy(raw)
    member.pop("sweep", None)
    model = member.get("model", {})
    if parameter == "snr":
        target = float(value)
        if model.get("kind") == "gmm":
            centers = np.asarray(_centers_of(model), dtype=np.float64)
            dmin = _min_separation(centers)
            model["beta"] = dmin / target
        else:
            theta = np.asarray(model.get("theta_star"), dtype=np.float64)
            model["beta"] = float(np.linalg.norm(theta)) / target
    elif parameter == "n":
        gen = member.get("data", {}).get("generate")
        if gen is None:
            raise ConfigError("sweep over n needs data.generate")
        base_n = gen["n"]
        gen["n"] = int(value)
        eng = member.setdefault("engine", {})
        base_step = eng.get("step_size", 1e-3)
        # Drift scales with n, so the stable step scales with 1/n.
        eng["step_size"] = base_step * base_n / int(value)
    elif parameter == "separation":
        dmin_target, beta = float(value[0]), float(value[1])
        if model.get("kind") != "gmm":
            raise ConfigError("sweep over separation needs the mixture model")
        centers = np.asarray(_centers_of(model), dtype=np.float64)
        dmin_base = _min_separation(centers)
        factor = dmin_target / dmin_base
        scaled = (centers * factor).tolist()
        if isinstance(model.get("theta_star"), dict):
            model["theta_star"]["centers"] = scaled
        else:
            model["theta_star"] = {"centers": scaled}
        model.pop("center_scale", None)
        model["beta"] = beta
        # The natural step scale grows with the separation (tau ~ 1e-4 d);
        # keeping tau/d fixed puts equal-SNR members on the same clock.
        eng = member.setdefault("engine", {})
        eng["step_size"] = eng.get("step_size", 1e-3) * factor
    return member


def _centers_of(model_block: dict) -> list:
    spec = model_block.get("theta_star")
    if spec is None and "center_scale" in model_block:
        from mfwgf.gmm import equilateral_centers

        return equilateral_centers(model_block["center_scale"]).tolist()
    if isinstance(spec, dict):
        return spec["centers"]
    if isinstance(spec, list):
        return spec
    raise ConfigError("sweep needs model.theta_star centers")


def _min_separation(centers: np.ndarray) -> float:
    diff = centers[:, None, :] - centers[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2))
    iu = np.triu_indices(centers.shape[0], 1)
    return float(d[iu].min())


def _value_tag(value) -> str:
    if isinstance(value, (list, tuple)):
        return "_".join(_value_tag(v) for v in value)
    return str(value).replace(".", "p").replace("-", "m")


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    sweep = cfg.block("sweep")
    if sweep is None:
        raise ConfigError("sweep: config needs a sweep block")
    outdir = _ensure_outdir(args.out or cfg.block("output") or "out/sweep",
                            args.force)
    parameter, values = sweep["parameter"], sweep["values"]

    def member(value):
        tag = f"{parameter}_{_value_tag(value)}"
        mdir = os.path.join(outdir, tag)
        os.makedirs(mdir, exist_ok=True)
        try:
            raw = _sweep_member_config(cfg.raw, parameter, value)
            summary = _run_single(validate_config(raw), mdir, args.seed)
            return value, tag, summary, None
        except Exception as exc:  # single-run failures do not stop the sweep
            return value, tag, None, f"{type(exc).__name__}: {exc}"

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(member, values))
    else:
        results = [member(v) for v in values]

    rows = []
    failures = 0
    for value, tag, summary, err in results:
        if err is not None:
            failures += 1
            rows.append([json.dumps(value), "", "", "", "", f"failed: {err}"])
            continue
        fit = summary.get("fit") or {}
        rows.append([
            json.dumps(value),
            f"{fit.get('slope_per_iteration', float('nan')):.10g}",
            f"{fit.get('r2', float('nan')):.6g}",
            fit.get("window", ""),
            f"{summary.get('terminal_statistical_error_sq') or float('nan'):.10g}",
            "ok",
        ])
    _write_csv(os.path.join(outdir, "slopes.csv"),
               [parameter, "slope_per_iteration", "r2", "window",
                "terminal_statistical_error_sq", "status"], rows)
    _write_manifest(outdir, "sweep", cfg,
                    {"engine_override": args.seed}, {},
                    {"failures": failures, "members": len(values)})
    print(f"sweep complete: {len(values) - failures}/{len(values)} members ok")
    return 0 if failures == 0 else 1


def cmd_compare_gibbs(cfg: ExperimentConfig, args) -> int:
    outdir = _ensure_outdir(
        args.out or cfg.block("output") or "out/compare-gibbs", args.force)
    model, model_cfg, theta_star = build_model(cfg.block("model"))
    if model.true_param is None:
        raise ConfigError("compare-gibbs needs model.theta_star for "
                          "label/sign alignment")
    data = build_dataset(cfg.block("data"), model_cfg, theta_star)
    ecfg = build_engine_config(cfg.block("engine"), args.seed)
    init = _build_init(cfg.block("init"), model, model_cfg, data, ecfg)
    traj = run(model, data, init, ecfg)
    mf_cloud = traj.final.cloud

    gb = cfg.block("gibbs", {}) or {}
    if isinstance(model_cfg, GmmConfig):
        rep = gibbs_gmm(model_cfg, data, gb.get("iterations", 3000),
                        gb.get("burn_in"), gb.get("seed", 1),
                        gb.get("mh_step", 0.2))
    else:
        rep = gibbs_mor(model_cfg, data, gb.get("iterations", 3000),
                        gb.get("burn_in"), gb.get("seed", 1))

    align = model.align_for_metric or (lambda c, ref: c)
    mf_aligned = align(mf_cloud, model.true_param)
    gibbs_aligned = align(rep.samples, model.true_param)
    save_cloud(mf_aligned, os.path.join(outdir, "mf_cloud.pcld"))
    save_cloud(gibbs_aligned, os.path.join(outdir, "gibbs_cloud.pcld"))

    stats = compare_clouds(mf_aligned, gibbs_aligned)
    stats["gibbs_acceptance"] = rep.acceptance_rate
    stats["gibbs_warnings"] = list(rep.warnings)
    stats["engine_warnings"] = list(traj.warnings)
    stats["within_3se"] = bool(stats["max_abs_z"] <= 3.0)

    bins = gb.get("contour_bins", 64)
    pairs = [(j, j + 1) for j in range(0, model.param_dim - 1, 2)]
    for j0, j1 in pairs:
        grids = contour_grid(mf_aligned.points[:, [j0, j1]],
                             gibbs_aligned.points[:, [j0, j1]], bins=bins)
        xc = 0.5 * (grids["x_edges"][1:] + grids["x_edges"][:-1])
        yc = 0.5 * (grids["y_edges"][1:] + grids["y_edges"][:-1])
        rows = []
        for ix in range(bins):
            for iy in range(bins):
                rows.append([f"{xc[ix]:.10g}", f"{yc[iy]:.10g}",
                             f"{grids['a'][ix, iy]:.10g}",
                             f"{grids['b'][ix, iy]:.10g}"])
        _write_csv(os.path.join(outdir, f"contour_{j0}_{j1}.csv"),
                   [f"coord{j0}", f"coord{j1}", "density_mf", "density_gibbs"],
                   rows)

    _write_json(os.path.join(outdir, "summary.json"), stats)
    _write_manifest(outdir, "compare-gibbs", cfg, {
        "engine": ecfg.seed, "gibbs": gb.get("seed", 1),
        "data": ((cfg.block("data") or {}).get("generate") or {}).get("seed"),
    }, {}, {"max_abs_z": stats["max_abs_z"], "within_3se": stats["within_3se"]})
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"compare-gibbs: max |z| = {stats['max_abs_z']:.3f} "
          f"({'within' if stats['within_3se'] else 'OUTSIDE'} 3 SE)")
    return 0


_ORDER_THRESHOLDS = {
    ("fp", "langevin"): (1.4, 0.95),
    ("fp", "jko"): (1.4, None),
    ("explicit", "jko"): (1.8, None),
}


def _flowlab_objects(block: dict):
    pot_name = block.get("potential", "quartic")
    if pot_name == "quadratic":
        pot = fl.quadratic_potential()
    elif pot_name == "quartic":
        pot = fl.quartic_potential(block.get("quartic_coeff", 0.1))
    else:
        raise ConfigError("flowlab.potential: expected quadratic or quartic")
    g = block.get("grid", {}) or {}
    grid = fl.make_grid(g.get("lo", -8.0), g.get("hi", 8.0),
                        g.get("cells", 4096))
    r = block.get("rho0", {}) or {}
    mean, std = r.get("mean", 0.5), r.get("std", 0.8)
    rho0 = fl.Density1D.gaussian(grid, mean, std)
    return pot, grid, rho0, (mean, std)


def cmd_flowlab(cfg: ExperimentConfig, args) -> int:
    block = cfg.block("flowlab")
    if block is None:
        raise ConfigError("flowlab: config needs a flowlab block")
    outdir = _ensure_outdir(args.out or cfg.block("output") or "out/flowlab",
                            args.force)
    preset = block["preset"]
    pot, grid, rho0, (mean, std) = _flowlab_objects(block)
    levels = block.get("levels", 4096)
    report: dict = {"preset": preset}

    if preset == "orders":
        taus = block.get("taus", [0.1, 0.05, 0.02, 0.01, 0.005])
        pairs = [tuple(p) for p in block.get("pairs",
                 [["fp", "langevin"], ["explicit", "jko"]])]
        score0 = None
        if block.get("exact_score", True):
            score0 = lambda x, m=mean, s=std: -(x - m) / s**2  # noqa: E731
        rows, fits, ok = [], {}, True
        for pair in pairs:
            fit = fl.order_sweep(pot, rho0, pair, taus, levels=levels,
                                 score0=score0,
                                 trim=block.get("trim", 0.01))
            for tau, err in zip(fit.taus, fit.errors):
                rows.append(["-".join(pair), f"{tau:.10g}", f"{err:.10g}"])
            entry = {"exponent": fit.exponent, "r2": fit.r2,
                     "degenerate": fit.degenerate, "trim": fit.trim}
            slope_min, r2_min = _ORDER_THRESHOLDS.get(pair, (None, None))
            if slope_min is not None:
                entry["pass"] = (not fit.degenerate
                                 and fit.exponent >= slope_min
                                 and (r2_min is None or fit.r2 >= r2_min))
                ok = ok and entry["pass"]
            fits["-".join(pair)] = entry
        _write_csv(os.path.join(outdir, "orders.csv"),
                   ["scheme_pair", "tau", "error_w2"], rows)
        report.update({"fits": fits, "pass": ok})

    elif preset == "contraction":
        tau = block.get("tau", 0.5)
        steps = block.get("steps", 40)
        pi_star = fl.Density1D.from_potential(grid, pot)
        rep = fl.contraction_check(pot, pi_star, rho0, tau, steps,
                                   levels=levels)
        rows = [[k, f"{r:.10g}", f"{d:.10g}"]
                for k, (r, d) in enumerate(zip(rep.ratios, rep.distances[1:]))]
        _write_csv(os.path.join(outdir, "contraction.csv"),
                   ["step", "squared_ratio", "distance"], rows)
        report.update({
            "threshold": rep.threshold, "pass": rep.passed,
            "failed_step": rep.failed_step,
            "reference_gap": rep.reference_gap,
            "steps_taken": int(rep.ratios.size),
        })

    else:  # cumulative
        tau = block.get("tau", 0.005)
        horizons = block.get("horizons", [0.5, 1.0, 2.0, 4.0])
        rep = fl.langevin_vs_fp(pot, rho0, tau, horizons)
        rows = [[f"{t:.10g}", f"{g:.10g}"]
                for t, g in zip(rep.horizons, rep.gaps)]
        _write_csv(os.path.join(outdir, "cumulative.csv"),
                   ["horizon", "gap_w2"], rows)
        report.update({"slope": rep.slope, "r2": rep.r2,
                       "pass": bool(rep.slope <= 2.2)})

    _write_json(os.path.join(outdir, "report.json"), report)
    _write_manifest(outdir, "flowlab", cfg, {}, {}, report)
    print(f"flowlab {preset}: {'pass' if report.get('pass') else 'FAIL'}")
    return 0


def cmd_check(cfg: Optional[ExperimentConfig], args) -> int:
    """Fast health battery; exit 1 on any threshold violation."""
    checks: list[tuple[str, bool, str]] = []

    grid = fl.make_grid(-8.0, 8.0, 2048)
    quad = fl.quadratic_potential()

    rep = fl.contraction_check(quad, fl.Density1D.from_potential(grid, quad),
                               fl.Density1D.gaussian(grid, 2.0, 1.0),
                               tau=0.5, steps=25, levels=2048)
    checks.append(("proximal contraction ratios <= 0.6677", rep.passed,
                   f"max ratio {rep.ratios.max():.4f} vs {rep.threshold:.4f}"))

    quart = fl.quartic_potential()
    rho0 = fl.Density1D.gaussian(grid, 0.5, 0.8)
    fit = fl.order_sweep(quart, rho0, ("explicit", "jko"),
                         [0.1, 0.05, 0.02, 0.01, 0.005], levels=2048,
                         score0=lambda x: -(x - 0.5) / 0.8**2)
    checks.append(("explicit-vs-proximal one-step order >= 1.8",
                   fit.exponent >= 1.8,
                   f"fitted exponent {fit.exponent:.3f}"))

    from mfwgf.gmm import GmmParams, equilateral_centers, gmm_generate, gmm_model

    gcfg = GmmConfig(K=3, d=2, beta=0.5,
                     weights=(1 / 3, 1 / 3, 1 / 3), sigma2=25.0)
    theta = GmmParams(equilateral_centers(1.0))
    gdata = gmm_generate(gcfg, theta, 200, seed=7)
    gmodel = gmm_model(gcfg, theta)
    # Snapshot every iteration: the posterior precision is ~n/(K beta^2),
    # so the cloud relaxes in tens of iterations and the decay phase must
    # be densely sampled for the prefix fit to see it.
    ecfg = EngineConfig(step_size=2e-4, iterations=150, particles=200,
                        seed=11, snapshot_every=1)
    init = _build_init({"kind": "kmeans", "seed": 3}, gmodel, gcfg, gdata, ecfg)
    traj_a = run(gmodel, gdata, init, ecfg)
    traj_b = run(gmodel, gdata, init, ecfg)
    same = all(
        np.array_equal(sa.cloud.points, sb.cloud.points)
        for sa, sb in zip(traj_a.snapshots, traj_b.snapshots))
    checks.append(("repeated run is bit-identical", same, ""))

    est = estimate_fixed_point(gmodel, gdata, init, ecfg)
    numerical = numerical_errors(traj_a, est.cloud, gmodel)
    ks = sorted(numerical)
    sfit = pre_plateau_fit(ks, [numerical[k] for k in ks])
    checks.append(("mixture optimization error decays log-linearly "
                   "(R^2 >= 0.9)", sfit.plateau_found and sfit.slope < 0,
                   f"slope {sfit.slope:.5f}, r2 {sfit.r2:.3f}, "
                   f"window {sfit.window}"))

    failed = 0
    for name, ok, detail in checks:
        tag = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"{tag}: {name}{suffix}")
        failed += 0 if ok else 1
    if args.out:
        outdir = _ensure_outdir(args.out, args.force)
        _write_json(os.path.join(outdir, "check.json"), {
            "checks": [{"name": n, "pass": bool(ok), "detail": d}
                       for n, ok, d in checks],
            "failed": failed,
        })
        _write_manifest(outdir, "check", cfg, {}, {})
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfwgf",
        description="Particle mean-field variational inference experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "generate": "write a synthetic dataset",
        "run": "run the particle flow and export metrics",
        "sweep": "run per sweep value and tabulate slopes",
        "compare-gibbs": "compare the flow against a Gibbs chain",
        "flowlab": "1-D scheme order / contraction / cumulative presets",
        "check": "fast self-check battery",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the engine seed (and the data seed "
                            "for generate)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for sweep members")
        p.add_argument("--force", action="store_true",
                       help="overwrite non-empty output directories")
    return parser


_DISPATCH = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "compare-gibbs": cmd_compare_gibbs,
    "flowlab": cmd_flowlab,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "check":
            cfg = load_config(args.config) if args.config else None
            return cmd_check(cfg, args)
        if args.config is None:
            raise ConfigError(f"{args.command}: --config is required")
        cfg = load_config(args.config)
        return _DISPATCH[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MfwgfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
