"""Prediction-set quality metrics.

Marginal coverage, worst-slab coverage over random directions, conditional
coverage error over a k-means partition of the covariates, and set volume
(closed form for boxes/ellipsoids, Monte Carlo for density superlevel sets
and ball unions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rcp.core import Rng
from rcp.scores import (
    BallUnionGeometry,
    DensitySuperlevelGeometry,
    EllipsoidGeometry,
    HypercubeGeometry,
    IntervalGeometry,
)


@dataclass(frozen=True)
class CoverageRecords:
    """Per-test-point covariates, coverage flags, and optional log-volumes."""

    x: np.ndarray
    covered: np.ndarray
    log_volume: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        covered = np.asarray(self.covered, dtype=bool).ravel()
        if x.shape[0] != covered.size:
            raise ValueError("x and covered must align")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "covered", covered)
        if self.log_volume is not None:
            lv = np.asarray(self.log_volume, dtype=np.float64).ravel()
            if lv.size != covered.size:
                raise ValueError("log_volume must align with covered")
            object.__setattr__(self, "log_volume", lv)

    @property
    def n(self) -> int:
        return self.covered.size


def marginal_coverage(records: CoverageRecords) -> float:
    if records.n == 0:
        raise ValueError("no records")
    return float(records.covered.mean())


@dataclass(frozen=True)
class WscSpec:
    """Worst-slab search: slabs hold at least a delta-fraction of the points;
    the slab direction is scanned over ``directions`` random unit vectors."""

    delta: float = 0.2
    directions: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")


def _min_window_rates(c: np.ndarray, m: int) -> float:
    """Exact minimum of mean(c[i:j]) over windows of length >= m.

    Bisection on the answer: a window of average <= r exists iff the minimum
    window sum of (c - r) is <= 0, checkable in O(n) with prefix sums.  The
    final window is snapped to its exact empirical rate (window rates are
    separated by at least 1/n^2, far above the bisection resolution).
    """
    n = c.size
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        s = np.concatenate(([0.0], np.cumsum(c - mid)))
        runmax = np.maximum.accumulate(s[: n - m + 1])
        if (s[m:] - runmax).min() <= 0.0:
            hi = mid
        else:
            lo = mid
    s = np.concatenate(([0.0], np.cumsum(c - hi)))
    runmax = np.maximum.accumulate(s[: n - m + 1])
    j = m + int(np.argmin(s[m:] - runmax))
    i = int(np.argmax(s[: j - m + 1]))
    return float(c[i:j].mean())


def worst_slab_coverage(records: CoverageRecords, spec: WscSpec) -> float:
    """Minimum coverage over slabs {a <= u.x <= b} holding >= delta mass.

    In one covariate dimension every direction induces the same window
    family, so a single scan suffices there.
    """
    n = records.n
    m = max(1, math.ceil(spec.delta * n))
    if n < m or n < 2:
        raise ValueError("too few points for the requested slab mass")
    c = records.covered.astype(np.float64)
    p = records.x.shape[1]
    rng = Rng(spec.seed)
    n_dir = 1 if p == 1 else spec.directions
    best = 1.0
    for _ in range(n_dir):
        if p == 1:
            z = records.x[:, 0]
        else:
            u = rng.normal(size=p)
            u /= np.linalg.norm(u)
            z = records.x @ u
        order = np.argsort(z, kind="stable")
        best = min(best, _min_window_rates(c[order], m))
        if best == 0.0:
            break
    return best


@dataclass(frozen=True)
class CceSpec:
    """Partition for the conditional coverage error: k-means with ``bins``
    cells on standardized covariates; cells below ``min_cell`` points are
    dissolved into their nearest neighbors."""

    bins: int = 20
    min_cell: int = 10
    seed: int = 0
    statistic: str = "mean"

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.statistic not in ("mean", "max"):
            raise ValueError("statistic must be 'mean' or 'max'")


@dataclass(frozen=True)
class CceResult:
    value: float
    n_cells: int
    undefined: bool


def _kmeans(x: np.ndarray, k: int, rng: Rng, iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns centroids."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(0, n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[j] = x[rng.gen.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = centroids.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new[j] = x[mask].mean(axis=0)
        if np.allclose(new, centroids, atol=1e-12):
            break
        centroids = new
    return centroids


def conditional_coverage_error(
    records: CoverageRecords, alpha: float, spec: CceSpec | None = None
) -> CceResult:
    """Mean (or max) absolute deviation of per-cell coverage from 1 - alpha.

    The partition is k-means on z-scored covariates, seed-deterministic.
    Cells with fewer than ``min_cell`` points are merged into the nearest
    surviving centroid; fewer than 2 viable cells yields an undefined flag.
    """
    spec = spec if spec is not None else CceSpec()
    x = records.x
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    z = (x - mean) / std
    k = min(spec.bins, max(2, records.n // max(1, spec.min_cell)))
    centroids = _kmeans(z, k, Rng(spec.seed))
    dist = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dist.argmin(axis=1)
    alive = list(range(centroids.shape[0]))
    while True:
        sizes = {j: int((labels == j).sum()) for j in alive}
        small = [j for j in alive if sizes[j] < spec.min_cell]
        if not small or len(alive) <= 2:
            break
        victim = min(small, key=lambda j: sizes[j])
        alive.remove(victim)
        sub = ((z[:, None, :] - centroids[None, alive, :]) ** 2).sum(axis=2)
        labels = np.asarray(alive)[sub.argmin(axis=1)]
    cells = [j for j in alive if (labels == j).sum() >= spec.min_cell]
    if len(cells) < 2:
        return CceResult(value=math.nan, n_cells=len(cells), undefined=True)
    devs = np.array(
        [abs(records.covered[labels == j].mean() - (1.0 - alpha)) for j in cells]
    )
    value = devs.max() if spec.statistic == "max" else devs.mean()
    return CceResult(value=float(value), n_cells=len(cells), undefined=False)


# ---------------------------------------------------------------------------
# Set volume
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McSpec:
    n_draws: int = 20000
    seed: int = 0


@dataclass(frozen=True)
class VolumeEstimate:
    """Raw volume with its MC standard error, plus log(volume)/d."""

    volume: float
    log_volume_over_d: float
    stderr: float
    n_draws: int
    exact: bool
    empty: bool


def _unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def _finish(volume: float, d: int, stderr: float, n_draws: int, exact: bool) -> VolumeEstimate:
    if volume <= 0.0:
        return VolumeEstimate(0.0, -math.inf, stderr, n_draws, exact, empty=True)
    return VolumeEstimate(volume, math.log(volume) / d, stderr, n_draws, exact, empty=False)


def set_volume(geometry, mc: McSpec | None = None) -> VolumeEstimate:
    """Volume of a prediction-set geometry.

    Intervals, hypercubes and ellipsoids are exact.  Density superlevel sets
    use importance sampling with the mixture itself as the proposal
    (vol = E_{y~p}[1{p(y) >= c} / p(y)]); ball unions use the pick-a-ball
    multiplicity correction (vol = K V_ball E[1/m(y)] for y uniform in a
    uniformly chosen ball, m = number of balls containing y).  Empty sets
    report zero volume, -inf log-volume and an ``empty`` flag.
    """
    mc = mc if mc is not None else McSpec()
    if isinstance(geometry, IntervalGeometry):
        if geometry.is_empty:
            return _finish(0.0, 1, 0.0, 0, True)
        return _finish(2.0 * geometry.half_width, 1, 0.0, 0, True)
    if isinstance(geometry, HypercubeGeometry):
        if geometry.is_empty:
            return _finish(0.0, geometry.dim, 0.0, 0, True)
        return _finish((2.0 * geometry.half_width) ** geometry.dim, geometry.dim, 0.0, 0, True)
    if isinstance(geometry, EllipsoidGeometry):
        d = geometry.dim
        if geometry.is_empty:
            return _finish(0.0, d, 0.0, 0, True)
        logdet_half = float(np.log(np.diag(geometry.chol)).sum())
        vol = _unit_ball_volume(d) * geometry.radius**d * math.exp(logdet_half)
        return _finish(vol, d, 0.0, 0, True)
    if isinstance(geometry, DensitySuperlevelGeometry):
        d = geometry.dim
        if geometry.density_level <= 0.0:
            return VolumeEstimate(math.inf, math.inf, 0.0, 0, True, False)
        rng = Rng(mc.seed)
        y = geometry.mixture.sample(mc.n_draws, rng)
        logp = geometry.mixture.log_density(y)
        w = np.where(logp >= math.log(geometry.density_level), np.exp(-logp), 0.0)
        vol = float(w.mean())
        se = float(w.std(ddof=1) / math.sqrt(mc.n_draws))
        return _finish(vol, d, se, mc.n_draws, False)
    if isinstance(geometry, BallUnionGeometry):
        d = geometry.dim
        if geometry.is_empty:
            return _finish(0.0, d, 0.0, 0, True)
        k = geometry.centers.shape[0]
        rng = Rng(mc.seed)
        which = rng.integers(0, k, mc.n_draws)
        direction = rng.normal(size=(mc.n_draws, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radii = geometry.radius * rng.uniform(size=mc.n_draws) ** (1.0 / d)
        y = geometry.centers[which] + radii[:, None] * direction
        d2 = ((y[:, None, :] - geometry.centers[None, :, :]) ** 2).sum(axis=2)
        mult = (d2 <= geometry.radius**2 * (1.0 + 1e-12)).sum(axis=1)
        w = 1.0 / mult
        scale = k * _unit_ball_volume(d) * geometry.radius**d
        vol = scale * float(w.mean())
        se = scale * float(w.std(ddof=1) / math.sqrt(mc.n_draws))
        return _finish(vol, d, se, mc.n_draws, False)
    raise TypeError(f"unknown geometry {type(geometry).__name__}")


def log_volume_summary(log_volumes: np.ndarray) -> tuple[float, float, int]:
    """(median, mean, n_excluded) of finite log-volume entries.

    Empty sets (-inf) and undefined entries (nan) are excluded from both
    statistics and counted.
    """
    lv = np.asarray(log_volumes, dtype=np.float64)
    ok = np.isfinite(lv)
    excluded = int((~ok).sum())
    if not ok.any():
        return math.nan, math.nan, excluded
    return float(np.median(lv[ok])), float(lv[ok].mean()), excluded
