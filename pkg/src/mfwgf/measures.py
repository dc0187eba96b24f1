"""Empirical measures on parameter space and Wasserstein-2 distances.

A variational distribution is represented by a :class:`ParticleCloud` — a
weighted point set in R^p.  This module provides the quadratic-cost optimal
transport distances used everywhere else:

- ``w2_point_mass``: closed form against a Dirac measure,
  sqrt(sum_b w_b ||theta_b - point||^2).
- ``w2_1d``: the sorted-sample specialization for equal-size uniform 1-D
  clouds (monotone matching is optimal in one dimension).
- ``w2_exact``: minimum-cost assignment for equal-size uniform clouds
  (Jonker–Volgenant via scipy), or the full transport linear program for
  general weights below a size cap.
- ``w2_sinkhorn``: debiased entropic surrogate (Sinkhorn divergence) for
  clouds too large for the exact solvers.
- ``align_components``: per-particle relabeling of mixture blocks against
  reference centers, so that label switching does not pollute distances.

Clouds serialize to a small columnar binary container (see README for the
byte layout) and to CSV with one particle per row, weight column last.
"""

from __future__ import annotations

import csv
import io
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import csr_matrix
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from mfwgf.errors import DimensionMismatch, SizeCapExceeded

__all__ = [
    "ParticleCloud",
    "W2Report",
    "ComponentLayout",
    "w2_point_mass",
    "w2_1d",
    "w2_exact",
    "w2_sinkhorn",
    "w2_auto",
    "align_components",
    "median_pairwise_sq",
    "save_cloud",
    "load_cloud",
    "cloud_to_csv",
    "cloud_from_csv",
]

_WEIGHT_TOL = 1e-12


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleCloud:
    """B weighted points in R^p representing a variational distribution.

    Invariants (checked on construction): weights are nonnegative and sum
    to one within 1e-12; every point has the same dimension p >= 1; B >= 1.
    """

    points: np.ndarray  # (B, p) float64
    weights: np.ndarray  # (B,) float64

    def __post_init__(self):
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(self.points, dtype=np.float64)))
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DimensionMismatch("cloud points must form a (B, p) array with B, p >= 1",
                                    got=pts.shape)
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64)).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise DimensionMismatch("one weight per particle required",
                                    expected=pts.shape[0], got=w.shape[0])
        if np.any(w < 0):
            raise ValueError("cloud weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"cloud weights must sum to 1 within {_WEIGHT_TOL}, "
                             f"got {w.sum()!r}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "ParticleCloud":
        """Cloud with equal weights 1/B."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, atol=_WEIGHT_TOL, rtol=0))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


@dataclass(frozen=True)
class W2Report:
    """Diagnostic wrapper around a W2 computation.

    ``method`` is one of ``exact-assignment``, ``sorted-1d``,
    ``sinkhorn-divergence``, ``point-mass``.  ``iterations`` and
    ``dual_gap`` (the worst marginal violation) are populated by the
    entropic solver only.
    """

    distance: float
    method: str
    iterations: int = 0
    dual_gap: float | None = None
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("W2 distance cannot be negative")


@dataclass(frozen=True)
class ComponentLayout:
    """Block structure of a mixture parameter vector: K center blocks of
    size d, optionally followed by K tail scalars (e.g. weight logits)
    that permute together with the blocks."""

    K: int
    d: int
    logit_tail: bool = False

    @property
    def param_dim(self) -> int:
        return self.K * self.d + (self.K if self.logit_tail else 0)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def w2_point_mass(cloud: ParticleCloud, point) -> float:
    """W2 distance to a Dirac: sqrt(sum_b w_b ||theta_b - point||^2)."""
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    if point.shape[0] != cloud.dim:
        raise DimensionMismatch("point dimension must equal cloud dimension",
                                expected=cloud.dim, got=point.shape[0])
    sq = np.einsum("bi,bi->b", cloud.points - point, cloud.points - point)
    return float(np.sqrt(max(float(cloud.weights @ sq), 0.0)))


def w2_1d(a: ParticleCloud, b: ParticleCloud) -> float:
    """Monotone-matching W2 for equal-size uniform 1-D clouds."""
    if a.dim != 1 or b.dim != 1:
        raise DimensionMismatch("w2_1d requires 1-dimensional clouds",
                                expected=1, got=(a.dim, b.dim))
    if a.size != b.size:
        raise DimensionMismatch(
            "w2_1d requires equal cloud sizes; use w2_exact for the general case",
            expected=a.size, got=b.size)
    if not (a.is_uniform and b.is_uniform):
        raise ValueError("w2_1d requires uniform weights; use w2_exact instead")
    xs = np.sort(a.points[:, 0])
    ys = np.sort(b.points[:, 0])
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


def _transport_lp(a: ParticleCloud, b: ParticleCloud) -> float:
    """Exact squared-W2 between weighted clouds via the transport LP."""
    na, nb = a.size, b.size
    cost = cdist(a.points, b.points, "sqeuclidean").reshape(-1)
    # Marginal constraints: row sums = a.weights, column sums = b.weights.
    # One constraint is redundant; HiGHS copes, so keep the symmetric form.
    rows, cols, data = [], [], []
    for i in range(na):
        rows.extend([i] * nb)
        cols.extend(range(i * nb, (i + 1) * nb))
        data.extend([1.0] * nb)
    for j in range(nb):
        rows.extend([na + j] * na)
        cols.extend(range(j, na * nb, nb))
        data.extend([1.0] * na)
    A = csr_matrix((data, (rows, cols)), shape=(na + nb, na * nb))
    rhs = np.concatenate([a.weights, b.weights])
    res = linprog(cost, A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def w2_exact(a: ParticleCloud, b: ParticleCloud, *, cap: int = 250_000) -> W2Report:
    """Exact W2 via minimum-cost assignment or the transport LP.

    Equal-size uniform clouds use the assignment form; anything else uses
    the LP, provided size_a * size_b <= cap.
    """
    if a.dim != b.dim:
        raise DimensionMismatch("clouds must share a dimension",
                                expected=a.dim, got=b.dim)
    if a.size == b.size and a.is_uniform and b.is_uniform:
        cost = cdist(a.points, b.points, "sqeuclidean")
        ri, ci = linear_sum_assignment(cost)
        sq = float(cost[ri, ci].mean())
        return W2Report(distance=float(np.sqrt(max(sq, 0.0))), method="exact-assignment")
    if a.size * b.size > cap:
        raise SizeCapExceeded(
            f"transport LP size {a.size}x{b.size} exceeds cap {cap}; "
            "use w2_sinkhorn for clouds this large")
    sq = _transport_lp(a, b)
    return W2Report(distance=float(np.sqrt(sq)), method="exact-assignment")


def median_pairwise_sq(a: ParticleCloud, b: ParticleCloud) -> float:
    """Median squared pairwise distance between two clouds (epsilon scale)."""
    cost = cdist(a.points, b.points, "sqeuclidean")
    return float(np.median(cost))


def w2_auto(a: ParticleCloud, b: ParticleCloud, *, exact_cap: int = 2048) -> W2Report:
    """Measurement policy: exact assignment when affordable, Sinkhorn above.

    Equal-size uniform clouds with at most ``exact_cap`` particles use the
    assignment solver; anything larger falls back to the debiased entropic
    divergence at epsilon = 0.01 x median pairwise squared distance.
    """
    if (a.size == b.size and a.size <= exact_cap
            and a.is_uniform and b.is_uniform):
        return w2_exact(a, b)
    return w2_sinkhorn(a, b)


def _sym_potential(cost: np.ndarray, logw: np.ndarray, eps: float,
                   max_iter: int, tol: float) -> np.ndarray:
    """Fixed point of the symmetric entropic problem OT_eps(a, a)."""
    p = np.zeros(cost.shape[0])
    for _ in range(max_iter):
        upd = -eps * logsumexp((p[None, :] - cost) / eps + logw[None, :], axis=1)
        nxt = 0.5 * (p + upd)
        if np.max(np.abs(nxt - p)) < tol * max(eps, 1e-30):
            p = nxt
            break
        p = nxt
    return p


def w2_sinkhorn(
    a: ParticleCloud,
    b: ParticleCloud,
    epsilon: float | None = None,
    max_iter: int = 2000,
    tol: float = 1e-9,
) -> W2Report:
    """Debiased entropic OT (Sinkhorn divergence), square-rooted.

    The divergence S_eps(a,b) = OT_eps(a,b) - (OT_eps(a,a)+OT_eps(b,b))/2
    is nonnegative, vanishes iff a = b, and approaches W2^2 as eps -> 0.
    Iterations run in the log domain with epsilon scaling.  ``epsilon``
    defaults to 0.01 x the median pairwise squared distance.

    Non-convergence within ``max_iter`` is reported via the ``warnings``
    field instead of raising.
    """
    if a.dim != b.dim:
        raise DimensionMismatch("clouds must share a dimension",
                                expected=a.dim, got=b.dim)
    if epsilon is None:
        med = median_pairwise_sq(a, b)
        epsilon = 0.01 * med if med > 0 else 1e-6
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    cost = cdist(a.points, b.points, "sqeuclidean")
    la = np.log(np.maximum(a.weights, 1e-300))
    lb = np.log(np.maximum(b.weights, 1e-300))

    # Epsilon scaling: anneal from the cost scale down to the target.
    eps_path = [epsilon]
    e = max(float(cost.max()), epsilon)
    while e > 2 * epsilon:
        eps_path.append(e)
        e /= 2.0
    eps_path = sorted(set(eps_path), reverse=True)

    f = np.zeros(a.size)
    g = np.zeros(b.size)
    iters = 0
    violation = np.inf
    warn: tuple[str, ...] = ()
    for eps in eps_path:
        final = eps == epsilon
        inner_cap = max_iter if final else 10
        for inner in range(inner_cap):
            f = -eps * logsumexp((g[None, :] - cost) / eps + lb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - cost) / eps + la[:, None], axis=0)
            iters += 1
            if not final and inner < inner_cap - 1:
                continue
            if final and inner % 5 != 4 and inner < inner_cap - 1:
                continue
            log_plan = (f[:, None] + g[None, :] - cost) / eps + la[:, None] + lb[None, :]
            row = np.exp(logsumexp(log_plan, axis=1))
            violation = float(np.max(np.abs(row - a.weights)))
            if violation < tol:
                break
        if final and violation >= tol:
            warn = (f"sinkhorn did not reach tol {tol:g} in {max_iter} iterations "
                    f"(marginal violation {violation:.3e})",)
    cross = float(a.weights @ f + b.weights @ g)

    pa = _sym_potential(cdist(a.points, a.points, "sqeuclidean"), la, epsilon,
                        max_iter, tol)
    pb = _sym_potential(cdist(b.points, b.points, "sqeuclidean"), lb, epsilon,
                        max_iter, tol)
    self_a = 2.0 * float(a.weights @ pa)
    self_b = 2.0 * float(b.weights @ pb)

    divergence = cross - 0.5 * (self_a + self_b)
    return W2Report(
        distance=float(np.sqrt(max(divergence, 0.0))),
        method="sinkhorn-divergence",
        iterations=iters,
        dual_gap=violation,
        warnings=warn,
    )


# ---------------------------------------------------------------------------
# Mixture-label alignment
# ---------------------------------------------------------------------------


def align_components(cloud: ParticleCloud, layout: ComponentLayout,
                     reference_centers) -> ParticleCloud:
    """Relabel each particle's mixture blocks against reference centers.

    For every particle the K blocks of size d are permuted by the
    assignment sigma minimizing sum_k ||m_k - ref_{sigma(k)}||^2; when the
    layout carries a logit tail, those K entries are permuted identically.
    """
    ref = np.asarray(reference_centers, dtype=np.float64).reshape(layout.K, layout.d)
    if cloud.dim != layout.param_dim:
        raise DimensionMismatch("layout inconsistent with cloud dimension",
                                expected=layout.param_dim, got=cloud.dim)
    K, d = layout.K, layout.d
    B = cloud.size
    centers = cloud.points[:, : K * d].reshape(B, K, d)
    tail = cloud.points[:, K * d:] if layout.logit_tail else None

    # (B, K, K) table of ||m_k - ref_j||^2
    diff = centers[:, :, None, :] - ref[None, None, :, :]
    table = np.einsum("bkjd,bkjd->bkj", diff, diff)

    if K <= 6:
        perms = np.array(list(itertools.permutations(range(K))), dtype=np.intp)
        # cost of permutation sigma per particle: sum_k table[b, k, sigma(k)]
        karange = np.arange(K)
        costs = np.empty((B, perms.shape[0]))
        for s, sigma in enumerate(perms):
            costs[:, s] = table[:, karange, sigma].sum(axis=1)
        best = perms[np.argmin(costs, axis=1)]  # (B, K): sigma per particle
    else:
        best = np.empty((B, K), dtype=np.intp)
        for bidx in range(B):
            _, colsol = linear_sum_assignment(table[bidx])
            best[bidx] = colsol

    new_centers = np.empty_like(centers)
    binds = np.arange(B)[:, None]
    new_centers[binds, best, :] = centers
    pieces = [new_centers.reshape(B, K * d)]
    if tail is not None:
        new_tail = np.empty_like(tail)
        new_tail[binds, best] = tail
        pieces.append(new_tail)
    return ParticleCloud(np.concatenate(pieces, axis=1), cloud.weights.copy())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"PCLD"
_VERSION = 1
_FLAG_WEIGHTS = 1


def save_cloud(cloud: ParticleCloud, path) -> None:
    """Write the columnar binary cloud container (layout documented in README)."""
    flags = 0 if cloud.is_uniform else _FLAG_WEIGHTS
    header = _MAGIC + struct.pack("<IQQII", _VERSION, cloud.size, cloud.dim, flags, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        if flags & _FLAG_WEIGHTS:
            fh.write(np.ascontiguousarray(cloud.weights, dtype="<f8").tobytes())


def load_cloud(path) -> ParticleCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"not a cloud container: bad magic {raw[:4]!r}")
    version, size, dim, flags, _ = struct.unpack("<IQQII", raw[4:32])
    if version != _VERSION:
        raise ValueError(f"unsupported cloud container version {version}")
    off = 32
    n_pts = size * dim
    points = np.frombuffer(raw, dtype="<f8", count=n_pts, offset=off).reshape(size, dim)
    off += 8 * n_pts
    if flags & _FLAG_WEIGHTS:
        weights = np.frombuffer(raw, dtype="<f8", count=size, offset=off).copy()
    else:
        weights = np.full(size, 1.0 / size)
    return ParticleCloud(points.copy(), weights)


def cloud_to_csv(cloud: ParticleCloud, path) -> None:
    """One particle per row; coordinate columns first, weight column last."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow([f"x{j}" for j in range(cloud.dim)] + ["weight"])
        for pt, w in zip(cloud.points, cloud.weights):
            writer.writerow([f"{v:.17g}" for v in pt] + [f"{w:.17g}"])


def cloud_from_csv(path) -> ParticleCloud:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "weight":
            raise ValueError("cloud CSV must end with a 'weight' column")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=np.float64)
    return ParticleCloud(arr[:, :-1], arr[:, -1])


def cloud_csv_bytes(cloud: ParticleCloud) -> bytes:
    """CSV serialization as bytes (used for content hashing)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow([f"x{j}" for j in range(cloud.dim)] + ["weight"])
    for pt, w in zip(cloud.points, cloud.weights):
        writer.writerow([f"{v:.17g}" for v in pt] + [f"{w:.17g}"])
    return buf.getvalue().encode("utf-8")
