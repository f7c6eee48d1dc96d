"""Split conformal calibration, plain and rectified.

``scp_calibrate`` thresholds raw conformity scores at the conformal
empirical quantile.  ``rcp_calibrate`` first spends a fraction of the
calibration data fitting a conditional quantile estimate of the transformed
scores, rectifies the remaining scores through the adjustment family at
that estimate, and conformalizes the rectified scores.  Membership queries
and raw-score cutoffs (for set construction and volume) are answered by the
frozen model objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rcp.adjustments import (
    AdjustmentFamily,
    DomainError,
    family,
    forward,
    invert_in_t,
    invert_in_v,
    validate_domain,
)
from rcp.core import LabeledDataset, Rng, SizeError, split_calibration
from rcp.nnet import NetConfig
from rcp.quantile import (
    ConstantQuantile,
    FunctionQuantile,
    KernelSpec,
    LocalKernelQuantile,
    PinballLevel,
    PinballNetQuantile,
    QuantileEstimator,
    empirical_quantile_conformal,
    fit_pinball_net,
    select_bandwidth,
)
from rcp.scores import ScoreFunction


class CalibrationError(RuntimeError):
    """The fitted quantile map violates the family's parameter domain."""


@dataclass(frozen=True)
class QEstimatorSpec:
    """Which conditional-quantile estimator to fit, and how.

    ``fit_space`` selects between fitting on transformed scores (default)
    and fitting on raw scores followed by mapping the fitted quantile into
    the parameter domain.  The two coincide for quantile-exact estimators
    (local kernel, constant) by equivariance of quantiles under monotone
    maps; for the neural estimator they genuinely differ and the
    transformed-space fit is the one used.

    ``function`` supplies a custom map from covariates to the conditional
    quantile of the (shifted) raw score, e.g. an analytic oracle.
    """

    kind: str = "local_kernel"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    net: NetConfig = field(default_factory=NetConfig)
    function: Callable[[np.ndarray], np.ndarray] | None = None
    fit_space: str = "transformed"

    def __post_init__(self) -> None:
        if self.kind not in ("local_kernel", "pinball_net", "constant", "function"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.fit_space not in ("transformed", "raw"):
            raise ValueError("fit_space must be 'transformed' or 'raw'")
        if self.kind == "function" and self.function is None:
            raise ValueError("kind 'function' requires a function")


@dataclass(frozen=True)
class ScpModel:
    """Plain split-conformal model: accept y iff V(x, y) <= threshold."""

    score: ScoreFunction
    alpha: float
    threshold: float

    def contains(self, x, y) -> np.ndarray:
        return self.score.evaluate(x, y) <= self.threshold

    def base_level(self, x=None) -> float:
        return self.threshold


def scp_calibrate(cal: LabeledDataset, score: ScoreFunction, alpha: float) -> ScpModel:
    if cal.n < 1:
        raise SizeError("calibration set is empty")
    scores = score.evaluate(cal.x, cal.y)
    return ScpModel(score=score, alpha=alpha, threshold=empirical_quantile_conformal(scores, alpha))


@dataclass(frozen=True)
class RcpModel:
    """Frozen rectified-conformal calibration artifact."""

    family: AdjustmentFamily
    score: ScoreFunction
    tau_hat: QuantileEstimator
    alpha: float
    conformal_threshold: float
    shift_applied: float
    n_tau: int
    n_proper: int

    def tau(self, x) -> np.ndarray:
        return self.tau_hat.predict(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def _as_rows(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.ndim <= 1:
        y = y.reshape(x.shape[0], -1)
    return x, y


def rcp_rectified_scores(model: RcpModel, x, y) -> np.ndarray:
    """Rectified scores f^{-1}_{tau(x)}(V(x, y)) for diagnostics and tests."""
    x, y = _as_rows(x, y)
    return invert_in_v(model.family, model.tau(x), model.score.evaluate(x, y))


def rcp_contains(model: RcpModel, x, y):
    """Membership test of the rectified prediction set (closed, boundary in).

    Computed as the equivalent raw-score comparison
    ``V(x, y) <= f_{tau(x)}(threshold)``, which is total even for raw scores
    below the exponential families' transform domain (such points are simply
    deep inside the set).
    """
    single = np.asarray(y).ndim <= 1 and np.atleast_2d(np.asarray(x)).shape[0] == 1
    x, y = _as_rows(x, y)
    if math.isinf(model.conformal_threshold):
        out = np.ones(x.shape[0], dtype=bool)
    else:
        cutoff = forward(model.family, model.tau(x), model.conformal_threshold)
        out = model.score.evaluate(x, y) <= cutoff
    return bool(out[0]) if single else out


def rcp_base_level(model: RcpModel, x):
    """Raw-score cutoff f_{tau(x)}(threshold) at x; +inf threshold stays +inf.

    Feeds ``ScoreFunction.sublevel_geometry`` for set display and volume.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = x.shape[0] == 1
    if math.isinf(model.conformal_threshold):
        out = np.full(x.shape[0], math.inf)
    else:
        out = np.asarray(forward(model.family, model.tau(x), model.conformal_threshold))
        out = out.reshape(x.shape[0])
    return float(out[0]) if single else out


def prediction_geometry(model: RcpModel, x_row):
    return model.score.sublevel_geometry(x_row, rcp_base_level(model, np.atleast_2d(x_row)))


def _fit_estimator(
    spec: QEstimatorSpec,
    fam: AdjustmentFamily,
    x: np.ndarray,
    target: np.ndarray,
    level: PinballLevel,
    rng: Rng,
) -> QuantileEstimator:
    if spec.kind == "constant":
        return ConstantQuantile(target, level)
    if spec.kind == "local_kernel":
        kern = spec.kernel
        h = kern.bandwidth if kern.bandwidth is not None else select_bandwidth(
            x, target, kern, level, rng.child(1)
        )
        return LocalKernelQuantile(x, target, h, level)
    if spec.kind == "pinball_net":
        positive = fam.t_lower == 0.0 and spec.fit_space == "transformed"
        return fit_pinball_net(x, target, level, spec.net, rng.child(2), positive=positive)
    raise AssertionError(spec.kind)


class _MappedQuantile(QuantileEstimator):
    """Estimator fitted on raw scores, mapped into the parameter domain."""

    kind = "mapped"

    def __init__(self, inner: QuantileEstimator, fam: AdjustmentFamily):
        super().__init__(inner.level)
        self.inner = inner
        self.family = fam

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(invert_in_t(self.family, self.inner.predict(x)))
        return out.reshape(np.atleast_2d(x).shape[0])


def rcp_calibrate(
    cal: LabeledDataset,
    score: ScoreFunction,
    fam: str | AdjustmentFamily,
    estimator: QEstimatorSpec,
    alpha: float,
    tau_fraction: float = 0.5,
    rng: Rng | None = None,
    auto_shift: bool = False,
) -> RcpModel:
    """Calibrate a rectified conformal model.

    Stages: (i) validate the raw scores against the family's domain
    (optionally applying the recommended uniform shift), (ii) split the
    calibration data, (iii) fit the conditional quantile of the transformed
    scores on one half, (iv) rectify the other half's scores at the
    quantile fitted at their own covariates and take the conformal
    empirical quantile of the rectified scores plus a mass at infinity.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    fam = family(fam)
    rng = rng if rng is not None else Rng(0)
    if cal.n < 4:
        raise SizeError("calibration set too small to split")

    shift_applied = 0.0
    check = validate_domain(fam, score.evaluate(cal.x, cal.y))
    if not check.ok:
        if not auto_shift:
            raise DomainError(
                f"raw scores violate the {fam.kind} family's score domain "
                f"({fam.describe_v_domain()}); add score_shift="
                f"{check.recommended_shift:g} or pass auto_shift=True",
                recommended_shift=check.recommended_shift,
            )
        shift_applied = check.recommended_shift
        score = score.with_shift(score.score_shift + shift_applied)

    d_tau, d_proper = split_calibration(cal, tau_fraction, rng.child(0))
    level = PinballLevel.from_alpha(alpha)
    v_tau = score.evaluate(d_tau.x, d_tau.y)

    if estimator.kind == "function":
        tau_hat: QuantileEstimator = _MappedQuantile(
            FunctionQuantile(estimator.function, level), fam
        )
    elif estimator.fit_space == "raw":
        inner = _fit_estimator(estimator, fam, d_tau.x, v_tau, level, rng)
        tau_hat = _MappedQuantile(inner, fam)
    else:
        target = np.asarray(invert_in_t(fam, v_tau))
        tau_hat = _fit_estimator(estimator, fam, d_tau.x, target, level, rng)

    try:
        t_proper = tau_hat.predict(d_proper.x)
    except DomainError as exc:
        raise CalibrationError(
            f"fitted quantile map leaves the {fam.kind} family's parameter domain: {exc}"
        ) from exc
    if fam.t_lower == 0.0 and np.any(t_proper <= 0.0):
        bad = int((t_proper <= 0.0).sum())
        raise CalibrationError(
            f"fitted quantile map leaves the {fam.kind} family's parameter domain "
            f"(t <= 0 at {bad} of {d_proper.n} calibration covariates); every "
            "tau(x) must stay inside the family's parameter domain"
        )
    v_proper = score.evaluate(d_proper.x, d_proper.y)
    rectified = invert_in_v(fam, t_proper, v_proper)
    threshold = empirical_quantile_conformal(rectified, alpha)
    return RcpModel(
        family=fam,
        score=score,
        tau_hat=tau_hat,
        alpha=alpha,
        conformal_threshold=threshold,
        shift_applied=shift_applied,
        n_tau=d_tau.n,
        n_proper=d_proper.n,
    )


# ---------------------------------------------------------------------------
# Model persistence: human-readable header + binary arrays / weight blobs
# ---------------------------------------------------------------------------
#
# Layout: UTF-8 header lines terminated by a line reading "blob", then binary
# sections in a fixed order (predictor payload, score extras, estimator
# payload).  Arrays are stored as b"ARRY", u8 ndim, i64 dims, f64 data; nets
# reuse the nnet weight container.  All integers little-endian.

from rcp.nnet import MLP, weights_from_bytes, weights_to_bytes  # noqa: E402
from rcp.scores import (  # noqa: E402
    AbsResidualScore,
    ConstantMeanPredictor,
    LinfResidualScore,
    MahalanobisScore,
    MixtureNllScore,
    MixtureSampler,
    NetMeanPredictor,
    NetMixturePredictor,
    SampleDistanceScore,
)

_ARR_MAGIC = b"ARRY"


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    parts = [_ARR_MAGIC, np.uint8(a.ndim).tobytes(), np.asarray(a.shape, "<i8").tobytes()]
    parts.append(a.astype("<f8").tobytes())
    return b"".join(parts)


def _unpack_array(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset : offset + 4] != _ARR_MAGIC:
        raise ValueError("bad array section")
    offset += 4
    ndim = buf[offset]
    offset += 1
    dims = np.frombuffer(buf, "<i8", ndim, offset).astype(int)
    offset += 8 * ndim
    size = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(buf, "<f8", size, offset).reshape(dims)
    offset += 8 * size
    return data.copy(), offset


def _predictor_tag(score: ScoreFunction):
    pred = getattr(score, "predict_mean", None)
    if score.kind == "mixture_nll":
        pred = score.predict_mixture
    if score.kind == "sample_distance":
        sampler = score.sampler
        if isinstance(sampler, MixtureSampler) and isinstance(
            sampler.predict_mixture, NetMixturePredictor
        ):
            pred = sampler.predict_mixture
        else:
            raise ValueError("only mixture-net sample_distance scores are serializable")
    if isinstance(pred, ConstantMeanPredictor):
        return "constant_mean", pred
    if isinstance(pred, NetMeanPredictor):
        return "mean_net", pred
    if isinstance(pred, NetMixturePredictor):
        return f"mixture_net {pred.n_components} {pred.d}", pred
    raise ValueError(f"predictor of {score.kind} score is not serializable")


def _save_common(model, header: list[str], blobs: list[bytes]) -> None:
    score = model.score
    tag, pred = _predictor_tag(score)
    header.append(f"score {score.kind} {score.score_shift!r}")
    if score.kind == "sample_distance":
        header.append(f"score_param {score.n_samples} {score.seed}")
    header.append(f"predictor {tag}")
    if isinstance(pred, ConstantMeanPredictor):
        blobs.append(_pack_array(pred.mu))
    else:
        blobs.append(weights_to_bytes(pred.net))
    if score.kind == "mahalanobis":
        blobs.append(_pack_array(score.cov))


def save_model(model, path) -> None:
    """Serialize an ScpModel or RcpModel (function-based parts excluded)."""
    header = ["RCP-MODEL 1"]
    blobs: list[bytes] = []
    if isinstance(model, ScpModel):
        header.append("method scp")
        header.append(f"alpha {model.alpha!r}")
        header.append(f"threshold {model.threshold!r}")
        _save_common(model, header, blobs)
    elif isinstance(model, RcpModel):
        header.append("method rcp")
        header.append(f"family {model.family.kind}")
        header.append(f"alpha {model.alpha!r}")
        header.append(f"threshold {model.conformal_threshold!r}")
        header.append(f"shift {model.shift_applied!r}")
        header.append(f"sizes {model.n_tau} {model.n_proper}")
        _save_common(model, header, blobs)
        est = model.tau_hat
        mapped = isinstance(est, _MappedQuantile)
        if mapped:
            est = est.inner
        beta = est.level.beta
        if isinstance(est, ConstantQuantile):
            header.append(f"estimator constant {beta!r} {int(mapped)}")
            blobs.append(_pack_array(np.array(est.value)))
        elif isinstance(est, LocalKernelQuantile):
            header.append(f"estimator local_kernel {beta!r} {int(mapped)} {est.bandwidth!r}")
            blobs.append(_pack_array(est.x))
            blobs.append(_pack_array(est.v))
        elif isinstance(est, PinballNetQuantile):
            header.append(f"estimator pinball_net {beta!r} {int(mapped)}")
            blobs.append(weights_to_bytes(est.net))
        else:
            raise ValueError(f"estimator kind {est.kind!r} is not serializable")
    else:
        raise TypeError("expected ScpModel or RcpModel")
    header.append("blob")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        for b in blobs:
            fh.write(b)


def _load_predictor(tag: list[str], buf: bytes, offset: int):
    if tag[0] == "constant_mean":
        mu, offset = _unpack_array(buf, offset)
        return ConstantMeanPredictor(mu), offset
    net, offset = weights_from_bytes(buf, offset)
    if tag[0] == "mean_net":
        return NetMeanPredictor(net), offset
    if tag[0] == "mixture_net":
        return NetMixturePredictor(net, int(tag[1]), int(tag[2])), offset
    raise ValueError(f"unknown predictor tag {tag[0]!r}")


def load_model(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    end = buf.index(b"blob\n") + len(b"blob\n")
    lines = buf[:end].decode().splitlines()
    if lines[0] != "RCP-MODEL 1":
        raise ValueError("not a model file")
    fields = {}
    for line in lines[1:-1]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    offset = end
    score_kind, shift = fields["score"].split()
    pred, offset = _load_predictor(fields["predictor"].split(), buf, offset)
    shift = float(shift)
    if score_kind == "abs_residual":
        score: ScoreFunction = AbsResidualScore(pred, shift)
    elif score_kind == "linf_residual":
        score = LinfResidualScore(pred, shift)
    elif score_kind == "mahalanobis":
        cov, offset = _unpack_array(buf, offset)
        score = MahalanobisScore(pred, cov, shift)
    elif score_kind == "mixture_nll":
        score = MixtureNllScore(pred, shift)
    elif score_kind == "sample_distance":
        n_samples, seed = fields["score_param"].split()
        score = SampleDistanceScore(MixtureSampler(pred), int(n_samples), int(seed), shift)
    else:
        raise ValueError(f"unknown score kind {score_kind!r}")

    alpha = float(fields["alpha"])
    threshold = float(fields["threshold"])
    if fields["method"] == "scp":
        return ScpModel(score=score, alpha=alpha, threshold=threshold)

    fam = family(fields["family"])
    est_fields = fields["estimator"].split()
    level = PinballLevel(float(est_fields[1]))
    mapped = bool(int(est_fields[2]))
    if est_fields[0] == "constant":
        value, offset = _unpack_array(buf, offset)
        est = ConstantQuantile.__new__(ConstantQuantile)
        QuantileEstimator.__init__(est, level)
        est.value = float(value)
    elif est_fields[0] == "local_kernel":
        sx, offset = _unpack_array(buf, offset)
        sv, offset = _unpack_array(buf, offset)
        est = LocalKernelQuantile(sx, sv, float(est_fields[3]), level)
    elif est_fields[0] == "pinball_net":
        net, offset = weights_from_bytes(buf, offset)
        est = PinballNetQuantile(net, level)
    else:
        raise ValueError(f"unknown estimator {est_fields[0]!r}")
    tau_hat: QuantileEstimator = _MappedQuantile(est, fam) if mapped else est
    n_tau, n_proper = (int(v) for v in fields["sizes"].split())
    return RcpModel(
        family=fam,
        score=score,
        tau_hat=tau_hat,
        alpha=alpha,
        conformal_threshold=threshold,
        shift_applied=float(fields.get("shift", "0.0")),
        n_tau=n_tau,
        n_proper=n_proper,
    )
