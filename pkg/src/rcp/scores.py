"""Conformity scores and the geometry of their sublevel sets.

Every score V(x, y) here comes with a geometric description of
{y : V(x, y) <= c}, which is what membership display and volume estimation
consume.  An optional ``score_shift`` adds a constant to the raw score; the
sublevel set at level c+s of a score shifted by s equals the unshifted set
at level c.

Density scores are computed in log space and saturate at 1e12 (instead of
overflowing to infinity) so that downstream order statistics and regression
stay well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rcp.core import Rng, rng_from_array
from rcp.nnet import GaussianMixture, MixtureDensity

SATURATION = 1e12

SCORE_KINDS = ("abs_residual", "linf_residual", "mahalanobis", "mixture_nll", "sample_distance")


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class DecompositionError(ValueError):
    """A matrix expected to be SPD failed its Cholesky factorization."""


def _finite(*arrays) -> None:
    for a in arrays:
        if not np.isfinite(np.asarray(a, dtype=np.float64)).all():
            raise NumericError("score arguments must be finite")


# ---------------------------------------------------------------------------
# Pure score operations
# ---------------------------------------------------------------------------


def abs_residual(mu, y, shift: float = 0.0):
    """|y - mu| + shift for scalar responses."""
    _finite(mu, y)
    out = np.abs(np.asarray(y, dtype=np.float64) - np.asarray(mu, dtype=np.float64)) + shift
    return out if out.ndim else float(out)


def linf_residual(mu, y, shift: float = 0.0):
    """max_i |mu_i - y_i| + shift; rows are response vectors."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mu.shape != y.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape} vs y {y.shape}")
    _finite(mu, y)
    out = np.abs(mu - y).max(axis=-1) + shift
    return out if np.ndim(out) else float(out)


def cholesky_spd(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("covariance is not symmetric positive definite") from exc


def mahalanobis(mu, cov, y, shift: float = 0.0):
    """sqrt((y-mu)^T cov^{-1} (y-mu)) + shift; cov must be SPD."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _finite(mu, y)
    chol = cholesky_spd(cov)
    u = np.linalg.solve(chol, (y - mu).T).T
    out = np.sqrt((u * u).sum(axis=-1)) + shift
    return out if out.size > 1 else float(out[0])


def mixture_nll(mixture: MixtureDensity, y, shift: float = 0.0):
    """Negative log-density of y under the mixture, saturated at 1e12.

    Returns (scores, saturated) where ``saturated`` flags entries clipped at
    the cap.  Scores may be negative: pair this score with the additive
    family, whose domains place no lower bound on the score.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _finite(y)
    raw = -mixture.log_density(y)
    saturated = raw > SATURATION
    out = np.where(saturated, SATURATION, raw) + shift
    return out, saturated


def sample_distance(samples, y, shift: float = 0.0):
    """min_k ||y - samples_k||_2 + shift."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    y = np.asarray(y, dtype=np.float64)
    _finite(samples, y)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    d2 = ((y[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
    out = np.sqrt(d2.min(axis=1)) + shift
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Sublevel-set geometries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalGeometry:
    kind = "interval"
    center: float
    half_width: float

    @property
    def is_empty(self) -> bool:
        return self.half_width < 0

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        return np.abs(y - self.center) <= self.half_width


@dataclass(frozen=True)
class HypercubeGeometry:
    kind = "hypercube"
    center: np.ndarray
    half_width: float

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.half_width < 0

    def contains(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        return np.abs(y - self.center).max(axis=1) <= self.half_width


@dataclass(frozen=True)
class EllipsoidGeometry:
    """{y : ||L^{-1}(y - center)|| <= radius} with cov = L L^T."""

    kind = "ellipsoid"
    center: np.ndarray
    chol: np.ndarray
    radius: float

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.radius < 0

    def contains(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        u = np.linalg.solve(self.chol, (y - self.center).T).T
        return np.sqrt((u * u).sum(axis=1)) <= self.radius


@dataclass(frozen=True)
class DensitySuperlevelGeometry:
    """{y : p(y) >= density_level} for a Gaussian mixture density."""

    kind = "density_superlevel"
    mixture: MixtureDensity
    density_level: float

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @property
    def is_empty(self) -> bool:
        # Conservative test: the density cannot exceed the weighted sum of the
        # component peaks, so a level above that bound is certainly empty.
        w = self.mixture.weights()
        peaks = np.array(
            [
                1.0 / ((2 * math.pi) ** (self.dim / 2) * np.prod(np.diag(c)))
                for c in self.mixture.chols
            ]
        )
        return self.density_level > float((w * peaks).sum())

    def contains(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if self.density_level <= 0.0:
            return np.ones(y.shape[0], dtype=bool)
        return self.mixture.log_density(y) >= math.log(self.density_level)


@dataclass(frozen=True)
class BallUnionGeometry:
    """Union of equal-radius balls around generative samples."""

    kind = "ball_union"
    centers: np.ndarray
    radius: float

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.radius < 0

    def contains(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        d2 = ((y[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return np.sqrt(d2.min(axis=1)) <= self.radius


# ---------------------------------------------------------------------------
# Score functions (predictor + score + geometry)
# ---------------------------------------------------------------------------


class ScoreFunction:
    """A conformity score with a predictor handle and an optional shift."""

    kind: str = "base"

    def __init__(self, score_shift: float = 0.0):
        self.score_shift = float(score_shift)

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sublevel_geometry(self, x_row: np.ndarray, level: float):
        """Geometry of {y : V(x, y) <= level}; empty sets carry a flag."""
        raise NotImplementedError

    def with_shift(self, score_shift: float) -> "ScoreFunction":
        import copy

        out = copy.copy(self)
        out.score_shift = float(score_shift)
        return out

    def _raw_level(self, level: float) -> float:
        return level - self.score_shift


class AbsResidualScore(ScoreFunction):
    kind = "abs_residual"

    def __init__(self, predict_mean, score_shift: float = 0.0):
        super().__init__(score_shift)
        self.predict_mean = predict_mean

    def evaluate(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(x.shape[0])
        mu = np.asarray(self.predict_mean(x), dtype=np.float64).reshape(x.shape[0])
        return abs_residual(mu, y, self.score_shift)

    def sublevel_geometry(self, x_row, level):
        mu = float(np.asarray(self.predict_mean(np.atleast_2d(x_row))).ravel()[0])
        return IntervalGeometry(center=mu, half_width=self._raw_level(level))


class LinfResidualScore(ScoreFunction):
    kind = "linf_residual"

    def __init__(self, predict_mean, score_shift: float = 0.0):
        super().__init__(score_shift)
        self.predict_mean = predict_mean

    def evaluate(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.predict_mean(x), dtype=np.float64))
        return linf_residual(mu, y, self.score_shift)

    def sublevel_geometry(self, x_row, level):
        mu = np.asarray(self.predict_mean(np.atleast_2d(x_row)), dtype=np.float64).ravel()
        return HypercubeGeometry(center=mu, half_width=self._raw_level(level))


class MahalanobisScore(ScoreFunction):
    kind = "mahalanobis"

    def __init__(self, predict_mean, cov, score_shift: float = 0.0):
        super().__init__(score_shift)
        self.predict_mean = predict_mean
        self.cov = np.asarray(cov, dtype=np.float64)
        self.chol = cholesky_spd(self.cov)

    def evaluate(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.predict_mean(x), dtype=np.float64))
        u = np.linalg.solve(self.chol, (y - mu).T).T
        return np.sqrt((u * u).sum(axis=1)) + self.score_shift

    def sublevel_geometry(self, x_row, level):
        mu = np.asarray(self.predict_mean(np.atleast_2d(x_row)), dtype=np.float64).ravel()
        return EllipsoidGeometry(center=mu, chol=self.chol, radius=self._raw_level(level))


class MixtureNllScore(ScoreFunction):
    """Negative log predictive density; may be negative (no lower bound), so
    pair it with the additive family."""

    kind = "mixture_nll"

    def __init__(self, predict_mixture, score_shift: float = 0.0):
        super().__init__(score_shift)
        self.predict_mixture = predict_mixture

    def evaluate(self, x, y):
        scores, _ = self.evaluate_flagged(x, y)
        return scores

    def evaluate_flagged(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        mix: GaussianMixture = self.predict_mixture(x)
        raw = -mix.log_density(y)
        saturated = raw > SATURATION
        return np.where(saturated, SATURATION, raw) + self.score_shift, saturated

    def sublevel_geometry(self, x_row, level):
        mix = self.predict_mixture(np.atleast_2d(x_row))
        density_level = math.exp(-self._raw_level(level)) if np.isfinite(level) else 0.0
        return DensitySuperlevelGeometry(mixture=mix.row(0), density_level=density_level)


class SampleDistanceScore(ScoreFunction):
    """Distance to the closest of a fixed number of generative samples.

    The samples for a covariate row are drawn from a stream keyed by
    (seed, row bytes), so the same row always sees the same samples; score
    evaluation and geometry construction therefore agree, and results do not
    depend on evaluation order.  The sample count is a knob (default 50).
    """

    kind = "sample_distance"

    def __init__(self, sampler, n_samples: int = 50, seed: int = 0, score_shift: float = 0.0):
        super().__init__(score_shift)
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        self.sampler = sampler
        self.n_samples = int(n_samples)
        self.seed = int(seed)

    def samples_for(self, x_row: np.ndarray) -> np.ndarray:
        x_row = np.asarray(x_row, dtype=np.float64).ravel()
        rng = rng_from_array(self.seed, x_row)
        samples = np.atleast_2d(np.asarray(self.sampler(x_row, self.n_samples, rng)))
        if samples.shape[0] < 1:
            raise ValueError("sampler returned no samples")
        return samples

    def evaluate(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        out = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            out[i] = sample_distance(self.samples_for(x[i]), y[i])
        return out + self.score_shift

    def sublevel_geometry(self, x_row, level):
        return BallUnionGeometry(
            centers=self.samples_for(x_row), radius=self._raw_level(level)
        )


def sublevel_geometry(score: ScoreFunction, x_row, level: float):
    """Geometry whose membership test agrees with V(x, y) <= level."""
    return score.sublevel_geometry(x_row, level)


# ---------------------------------------------------------------------------
# Predictor handles (callable classes, so calibrated models can be saved)
# ---------------------------------------------------------------------------


class ConstantMeanPredictor:
    def __init__(self, mu):
        self.mu = np.asarray(mu, dtype=np.float64).ravel()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tile(self.mu, (np.atleast_2d(x).shape[0], 1))


class FunctionPredictor:
    """Vectorized function of the covariates; not serializable."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(x)), dtype=np.float64)


class NetMeanPredictor:
    def __init__(self, net):
        self.net = net

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)


class NetMixturePredictor:
    def __init__(self, net, n_components: int, d: int):
        self.net = net
        self.n_components = n_components
        self.d = d

    def __call__(self, x: np.ndarray) -> GaussianMixture:
        from rcp.nnet import unpack_mixture

        return unpack_mixture(self.net.forward(x), self.n_components, self.d)


class MixtureSampler:
    """Draws generative samples from a predicted conditional mixture."""

    def __init__(self, predict_mixture):
        self.predict_mixture = predict_mixture

    def __call__(self, x_row: np.ndarray, size: int, rng: Rng) -> np.ndarray:
        mix = self.predict_mixture(np.atleast_2d(x_row))
        return mix.row(0).sample(size, rng)
