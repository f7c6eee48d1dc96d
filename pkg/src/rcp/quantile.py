"""Conditional-quantile estimation of transformed conformity scores.

Provides the pinball loss, the conformal empirical quantile (with the Dirac
mass at infinity), weighted quantiles under the left-continuous
generalized-inverse convention, Gaussian-kernel local quantile regression
with a log-grid bandwidth search, a neural pinball regressor, and K-fold
out-of-sample score generation.

Quantile convention everywhere: the smallest value whose cumulative
(normalized) mass reaches the level, i.e. Q_beta(P) = inf{t : F(t) >= beta}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rcp.core import LabeledDataset, Rng
from rcp.nnet import MLP, NetConfig, PinballLoss, train


@dataclass(frozen=True)
class PinballLevel:
    """Quantile level beta = 1 - alpha."""

    beta: float

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    @classmethod
    def from_alpha(cls, alpha: float) -> "PinballLevel":
        return cls(1.0 - alpha)


def pinball_loss(u, level: PinballLevel):
    """rho_beta(u) = beta*u for u>0, -(1-beta)*u otherwise; >= 0, zero iff u=0."""
    u = np.asarray(u, dtype=np.float64)
    if not np.isfinite(u).all():
        raise ValueError("pinball loss requires finite arguments")
    out = np.where(u > 0, level.beta * u, -(1.0 - level.beta) * u)
    return out if out.ndim else float(out)


def empirical_quantile_conformal(values, alpha: float) -> float:
    """The k-th smallest of values plus a Dirac at +inf, k = ceil((1-a)(n+1)).

    Returns ``math.inf`` when the index lands on the Dirac, i.e. when
    alpha < 1/(n+1).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("values must be nonempty")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    n = values.size
    k = math.ceil((1.0 - alpha) * (n + 1))
    if k >= n + 1:
        return math.inf
    return float(np.partition(values, k - 1)[k - 1])


def weighted_quantile(values, weights, level: PinballLevel) -> float:
    """Smallest value whose cumulative normalized weight reaches beta.

    This is a minimizer of sum_k w_k * rho_beta(v_k - t); ties in values are
    merged before scanning so duplicated support points act as one atom.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size != weights.size:
        raise ValueError("values and weights must have equal length")
    if values.size == 0:
        raise ValueError("values must be nonempty")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    uniq, start = np.unique(v, return_index=True)
    grouped = np.add.reduceat(w, start)
    cum = np.cumsum(grouped)
    idx = int(np.searchsorted(cum, level.beta * total - 1e-12 * total, side="left"))
    idx = min(idx, uniq.size - 1)
    return float(uniq[idx])


class QuantileEstimator:
    """Fitted map x -> conditional beta-quantile estimate."""

    kind: str = "base"

    def __init__(self, level: PinballLevel):
        self.level = level

    def predict(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantQuantile(QuantileEstimator):
    """Predicts the unconditional empirical quantile everywhere."""

    kind = "constant"

    def __init__(self, values, level: PinballLevel):
        super().__init__(level)
        values = np.asarray(values, dtype=np.float64).ravel()
        self.value = weighted_quantile(values, np.ones_like(values), level)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.full(x.shape[0], self.value)


class FunctionQuantile(QuantileEstimator):
    """Wraps a user-supplied function of the covariates (e.g. an oracle)."""

    kind = "function"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], level: PinballLevel):
        super().__init__(level)
        self.fn = fn

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.asarray(self.fn(x), dtype=np.float64)
        return out.reshape(x.shape[0])


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel with bandwidth h; ``bandwidth=None`` triggers a grid
    search over ``grid`` (default 20 log-spaced points in [1e-3, 1])."""

    bandwidth: float | None = None
    grid: tuple[float, ...] = field(
        default_factory=lambda: tuple(np.geomspace(1e-3, 1.0, 20).tolist())
    )

    def __post_init__(self) -> None:
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if len(self.grid) < 1 or any(h <= 0 for h in self.grid):
            raise ValueError("bandwidth grid must be nonempty and positive")


class LocalKernelQuantile(QuantileEstimator):
    """Kernel-weighted quantile regression.

    predict(x) is the weighted beta-quantile of the support scores with
    weights K_h(||x - x_k||); when every weight underflows to zero the
    unconditional quantile is returned instead, which keeps extrapolated
    queries well-defined.
    """

    kind = "local_kernel"

    def __init__(self, x, v, bandwidth: float, level: PinballLevel):
        super().__init__(level)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        v = np.asarray(v, dtype=np.float64).ravel()
        if x.shape[0] != v.size:
            raise ValueError("support covariates and scores must align")
        if x.shape[0] < 2:
            raise ValueError("need at least 2 support points")
        order = np.argsort(v, kind="stable")
        self.x = x[order]
        self.v = v[order]
        self.bandwidth = float(bandwidth)
        self._uniq, self._starts = np.unique(self.v, return_index=True)
        self._fallback = weighted_quantile(v, np.ones_like(v), level)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.x.shape[1]:
            raise ValueError("query dimension mismatch")
        d2 = ((x[:, None, :] - self.x[None, :, :]) ** 2).sum(axis=2)
        w = np.exp(-0.5 * d2 / self.bandwidth**2)
        grouped = np.add.reduceat(w, self._starts, axis=1)
        totals = grouped.sum(axis=1)
        out = np.full(x.shape[0], self._fallback)
        ok = totals > 0.0
        if ok.any():
            cum = np.cumsum(grouped[ok], axis=1)
            target = self.level.beta * totals[ok] - 1e-12 * totals[ok]
            idx = (cum < target[:, None]).sum(axis=1)
            idx = np.minimum(idx, self._uniq.size - 1)
            out[ok] = self._uniq[idx]
        return out


def fit_local_kernel(x, v, spec: KernelSpec, level: PinballLevel) -> LocalKernelQuantile:
    if spec.bandwidth is None:
        raise ValueError("spec.bandwidth unset; call select_bandwidth first")
    return LocalKernelQuantile(x, v, spec.bandwidth, level)


def select_bandwidth(x, v, spec: KernelSpec, level: PinballLevel, rng: Rng) -> float:
    """Pick the grid bandwidth with the best held-out average pinball loss.

    Uses an internal 80/20 split; ties break toward the smaller bandwidth.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.asarray(v, dtype=np.float64).ravel()
    m = v.size
    if m < 10:
        raise ValueError("bandwidth selection needs at least 10 points")
    perm = rng.permutation(m)
    n_val = max(1, int(round(0.2 * m)))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    best_h, best_loss = None, math.inf
    for h in sorted(spec.grid):
        est = LocalKernelQuantile(x[fit_idx], v[fit_idx], h, level)
        pred = est.predict(x[val_idx])
        loss = float(np.mean(pinball_loss(v[val_idx] - pred, level)))
        if loss < best_loss - 1e-15:
            best_loss, best_h = loss, h
    return float(best_h)


class PinballNetQuantile(QuantileEstimator):
    kind = "pinball_net"

    def __init__(self, net: MLP, level: PinballLevel):
        super().__init__(level)
        self.net = net

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x).ravel()


def fit_pinball_net(
    x,
    v,
    level: PinballLevel,
    config: NetConfig,
    rng: Rng,
    positive: bool = False,
) -> QuantileEstimator:
    """Train an MLP quantile regressor by minimizing the mean pinball loss.

    A fifth of the data is held out for early stopping.  If the trained net
    does not beat the constant unconditional-quantile predictor on the
    training objective the constant estimator is returned instead, so the
    result never underperforms the trivial baseline.  ``positive=True``
    squashes the output through softplus, for transformation families whose
    parameter domain excludes nonpositive values.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.asarray(v, dtype=np.float64).ravel()
    m = v.size
    if m < 2 * config.batch_size:
        raise ValueError(
            f"need at least 2*batch_size = {2 * config.batch_size} points, got {m}"
        )
    widths = [x.shape[1], *config.hidden, 1]
    net = MLP(widths, Rng(config.seed), positive_output=positive)
    loss = PinballLoss(level.beta)
    train(net, x, v[:, None], loss, config, rng)
    net_loss = loss.value(net.forward(x), v[:, None])
    const = ConstantQuantile(v, level)
    const_loss = loss.value(np.full((m, 1), const.value), v[:, None])
    if net_loss > const_loss:
        return const
    return PinballNetQuantile(net, level)


def cv_scores(
    train_data: LabeledDataset,
    folds: int,
    trainer: Callable[[LabeledDataset], object],
    score_builder: Callable[[object], object],
    rng: Rng,
) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-sample conformity scores via K-fold cross-validation.

    Each training point is scored by a model fitted on the other K-1 folds;
    the returned scores align with ``train_data`` row order, so the result
    is a scored dataset of the full training size.  Default choice of K in
    callers is 10.
    """
    n = train_data.n
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > n:
        raise ValueError("more folds than data points")
    perm = rng.permutation(n)
    blocks = np.array_split(perm, folds)
    out = np.empty(n)
    for k, held in enumerate(blocks):
        if held.size < 1:
            raise ValueError("empty fold")
        rest = np.concatenate([b for j, b in enumerate(blocks) if j != k])
        model = trainer(train_data.subset(rest))
        score = score_builder(model)
        out[held] = score.evaluate(train_data.x[held], train_data.y[held])
    return train_data.x.copy(), out
