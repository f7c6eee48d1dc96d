"""Synthetic benchmarks and their analytic oracles.

The scalar toy process draws X from Beta(1.2, 0.8) and Y | X=x from a
normal with mean x*sin(x) and standard deviation x^2, so the conditional
law of the absolute residual is half-normal with a known quantile function.
A bivariate bimodal generator places responses on one of two arcs with
heteroskedastic noise; its construction is ours (the benchmark it imitates
is only shown as a figure elsewhere, without a stated process).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from rcp.core import LabeledDataset, Rng

_erf = np.vectorize(math.erf, otypes=[np.float64])

TOY_BETA_A = 1.2
TOY_BETA_B = 0.8


def normal_cdf(z):
    z = np.asarray(z, dtype=np.float64)
    out = 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))
    return out if out.ndim else float(out)


# Rational approximation for the inverse normal CDF (Acklam's coefficients),
# polished with one Halley step; max absolute error below 1e-9 across (0, 1).
_ICDF_A = (
    -3.969683028665376e01,
    2.209460984245205e02,
    -2.759285104469687e02,
    1.383577518672690e02,
    -3.066479806614716e01,
    2.506628277459239e00,
)
_ICDF_B = (
    -5.447609879822406e01,
    1.615858368580409e02,
    -1.556989798598866e02,
    6.680131188771972e01,
    -1.328068155288572e01,
)
_ICDF_C = (
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e00,
    -2.549732539343734e00,
    4.374664141464968e00,
    2.938163982698783e00,
)
_ICDF_D = (
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e00,
    3.754408661907416e00,
)
_ICDF_SPLIT = 0.02425


def _inverse_normal_scalar(p: float) -> float:
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValueError("probability must lie in [0, 1]")
    if p > 0.5:
        # 1-p is exact for doubles in [0.5, 1); the lower-tail path avoids the
        # cancellation that otherwise degrades the refinement near p -> 1.
        return -_inverse_normal_scalar(1.0 - p)
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if p < _ICDF_SPLIT:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    elif p <= 1.0 - _ICDF_SPLIT:
        q = p - 0.5
        r = q * q
        x = (
            (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5])
            * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
        )
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    # One Halley refinement against the exact CDF.
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


_inverse_normal = np.vectorize(_inverse_normal_scalar, otypes=[np.float64])


def inverse_normal_cdf(p):
    """Quantile function of the standard normal."""
    out = _inverse_normal(np.asarray(p, dtype=np.float64))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Scalar toy benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    n: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be positive")


def toy_mean(x):
    x = np.asarray(x, dtype=np.float64)
    out = x * np.sin(x)
    return out if out.ndim else float(out)


def toy_scale(x):
    """Conditional standard deviation of the response."""
    x = np.asarray(x, dtype=np.float64)
    out = x**2
    return out if out.ndim else float(out)


def sample_beta(n: int, a: float, b: float, rng: Rng) -> np.ndarray:
    """Beta draws built from two gamma draws (fixed, documented construction)."""
    g1 = rng.gamma(a, n)
    g2 = rng.gamma(b, n)
    return g1 / (g1 + g2)


def sample_toy(spec: ToySpec) -> LabeledDataset:
    rng = Rng(spec.seed)
    x = sample_beta(spec.n, TOY_BETA_A, TOY_BETA_B, rng)
    y = toy_mean(x) + toy_scale(x) * rng.normal(size=spec.n)
    return LabeledDataset(x[:, None], y[:, None])


def oracle_toy_quantile(x, alpha: float):
    """Conditional (1-alpha)-quantile of |Y - mean(x)| given X = x.

    The absolute residual is |N(0, x^4)|, whose (1-alpha)-quantile is
    x^2 * Phi^{-1}(1 - alpha/2).
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.asarray(toy_scale(x) * inverse_normal_cdf(1.0 - alpha / 2.0))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ContaminationSpec:
    """Mixes the oracle quantile with centered noise of the local scale."""

    omega: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")


def contaminated_tau(x, alpha: float, spec: ContaminationSpec, rng: Rng | None = None):
    """(1-omega) * oracle quantile + omega * N(0, x^4), elementwise draws."""
    x = np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else Rng(spec.seed)
    eps = toy_scale(x) * rng.normal(size=x.shape if x.ndim else None)
    out = (1.0 - spec.omega) * oracle_toy_quantile(x, alpha) + spec.omega * eps
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# Bivariate bimodal benchmark (our construction)
# ---------------------------------------------------------------------------


def two_moons_arc(arm, x):
    """Point on arc ``arm`` in {0,1} at arc parameter x in [0, 1]."""
    arm = np.asarray(arm)
    t = math.pi * np.asarray(x, dtype=np.float64)
    y0 = np.where(arm == 0, np.cos(t), 1.0 - np.cos(t))
    y1 = np.where(arm == 0, np.sin(t), 0.5 - np.sin(t))
    return np.stack([y0, y1], axis=-1)


def default_moon_noise(x):
    return 0.05 + 0.15 * np.asarray(x, dtype=np.float64)


def sample_two_moons(
    n: int, noise_scale_fn: Callable | None = None, seed: int = 0
) -> LabeledDataset:
    """Scalar covariate x ~ U(0,1); response on one of two arcs chosen by a
    fair coin, at angle pi*x, plus isotropic Gaussian noise with standard
    deviation noise_scale_fn(x) (default 0.05 + 0.15x)."""
    if n < 1:
        raise ValueError("n must be positive")
    noise_scale_fn = noise_scale_fn if noise_scale_fn is not None else default_moon_noise
    rng = Rng(seed)
    x = rng.uniform(size=n)
    arm = rng.integers(0, 2, n)
    y = two_moons_arc(arm, x)
    y = y + np.asarray(noise_scale_fn(x), dtype=np.float64)[:, None] * rng.normal(size=(n, 2))
    return LabeledDataset(x[:, None], y)
