"""Shared numeric containers, dataset splitting, and seeded randomness."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class SizeError(ValueError):
    """A dataset is too small for the requested split."""


@dataclass(frozen=True)
class Rng:
    """Deterministic random stream (PCG64, 64-bit seeded).

    The generator algorithm is pinned so that a seed reproduces the same
    draw sequence on every platform.  An ``Rng`` is single-owner: share the
    seed, not the instance.
    """

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_gen", np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        )

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def child(self, key: int) -> "Rng":
        """Independent stream derived from (seed, key); used for parallel work."""
        mix = int.from_bytes(
            hashlib.blake2b(f"{self.seed}:{key}".encode(), digest_size=8).digest(), "little"
        )
        return Rng(mix)

    # Thin pass-throughs used throughout the package.
    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def gamma(self, shape: float, size=None):
        return self._gen.gamma(shape, 1.0, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)


def rng_from_array(seed: int, values: np.ndarray) -> Rng:
    """Stream determined by a seed together with the bytes of ``values``.

    Used where randomness must be a reproducible function of a covariate row
    (e.g. generative samples backing a sample-distance score), so that the
    same row always sees the same draws regardless of call order.
    """
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    digest = hashlib.blake2b(arr.tobytes(), digest_size=8).digest()
    mix = int.from_bytes(digest, "little") ^ (seed & 0xFFFFFFFFFFFFFFFF)
    return Rng(mix)


@dataclass(frozen=True)
class LabeledDataset:
    """Covariate matrix ``x`` (n, p) paired with responses ``y`` (n, d)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("x and y must be 2-d arrays")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"row mismatch: x has {x.shape[0]} rows, y has {y.shape[0]}")
        if x.shape[1] < 1 or y.shape[1] < 1:
            raise ValueError("x and y must have at least one column")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("dataset entries must be finite")
        x = x.copy()
        y = y.copy()
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.y.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class SplitSpec:
    """How to carve a dataset into train / calibration / test."""

    calibration_size: int = 2048
    train_fraction_of_rest: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.calibration_size < 1:
            raise ValueError("calibration_size must be positive")
        if not 0.0 < self.train_fraction_of_rest < 1.0:
            raise ValueError("train_fraction_of_rest must be in (0, 1)")


def split_dataset(
    data: LabeledDataset, spec: SplitSpec
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Partition into (train, calibration, test).

    The calibration block gets exactly ``spec.calibration_size`` rows; of the
    remainder, train takes ``floor(frac * rest)`` rows and test the rest.
    The permutation is driven only by ``spec.seed``.
    """
    n = data.n
    if n < spec.calibration_size + 2:
        raise SizeError(
            f"need at least calibration_size + 2 = {spec.calibration_size + 2} rows, got {n}"
        )
    perm = Rng(spec.seed).permutation(n)
    cal_idx = perm[: spec.calibration_size]
    rest = perm[spec.calibration_size :]
    n_train = int(np.floor(len(rest) * spec.train_fraction_of_rest))
    if n_train < 1 or len(rest) - n_train < 1:
        raise SizeError("split leaves an empty train or test block")
    return data.subset(rest[:n_train]), data.subset(cal_idx), data.subset(rest[n_train:])


def split_calibration(
    cal: LabeledDataset, tau_fraction: float = 0.5, rng: Rng | None = None
) -> tuple[LabeledDataset, LabeledDataset]:
    """Split calibration data into the quantile-fitting half and the proper half.

    ``|d_tau| = round(tau_fraction * n)`` with round-half-up, the rest is the
    proper calibration set used for the conformal order statistic.
    """
    if not 0.0 < tau_fraction < 1.0:
        raise ValueError("tau_fraction must be in (0, 1)")
    n = cal.n
    m = int(np.floor(tau_fraction * n + 0.5))
    if m < 1 or n - m < 1:
        raise SizeError(f"tau split of {n} rows at fraction {tau_fraction} leaves an empty half")
    rng = rng if rng is not None else Rng(0)
    perm = rng.permutation(n)
    return cal.subset(perm[:m]), cal.subset(perm[m:])
