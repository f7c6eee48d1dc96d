"""Experiment harness: configuration, CSV ingestion, the end-to-end
benchmark pipeline, and Monte-Carlo theory checks.

The three checks validate, at desk scale, the finite-sample marginal
coverage sandwich of the rectified conformal procedure, the contaminated
toy study of local coverage, and the pinball-loss bound on the conditional
level error; each reports PASS/FAIL against its stated tolerance.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, special

from rcp.adjustments import family, structural_conflict
from rcp.calibrate import (
    QEstimatorSpec,
    ScpModel,
    rcp_base_level,
    rcp_calibrate,
    rcp_contains,
    scp_calibrate,
)
from rcp.core import LabeledDataset, Rng, SplitSpec, split_dataset
from rcp.datagen import (
    TOY_BETA_A,
    TOY_BETA_B,
    ToySpec,
    normal_cdf,
    oracle_toy_quantile,
    sample_beta,
    sample_toy,
    sample_two_moons,
    toy_mean,
    toy_scale,
)
from rcp.metrics import (
    CceSpec,
    CoverageRecords,
    McSpec,
    WscSpec,
    conditional_coverage_error,
    log_volume_summary,
    marginal_coverage,
    set_volume,
    worst_slab_coverage,
)
from rcp.nnet import MLP, MixtureNllLoss, MseLoss, NetConfig, mixture_head_width, train
from rcp.quantile import PinballLevel, pinball_loss
from rcp.scores import (
    AbsResidualScore,
    ConstantMeanPredictor,
    FunctionPredictor,
    LinfResidualScore,
    MahalanobisScore,
    MixtureNllScore,
    MixtureSampler,
    NetMeanPredictor,
    NetMixturePredictor,
    SampleDistanceScore,
    ScoreFunction,
)


class ConfigError(ValueError):
    """An experiment configuration is structurally invalid."""


class ParseError(ValueError):
    """A CSV file could not be parsed."""


# ---------------------------------------------------------------------------
# CSV ingestion / emission
# ---------------------------------------------------------------------------


def _is_numeric_row(cells: list[str]) -> bool:
    try:
        for c in cells:
            float(c)
    except ValueError:
        return False
    return True


def load_csv(path, p: int, d: int) -> LabeledDataset:
    """Read a dataset of p covariate and d response columns.

    A non-numeric first row is treated as a header.  Ragged rows and
    non-numeric cells raise a parse error naming the offending line.
    """
    if p < 1 or d < 1:
        raise ConfigError("p and d must be positive")
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if lineno == 1 and not _is_numeric_row(cells):
                continue
            if len(cells) != p + d:
                raise ParseError(
                    f"{path}:{lineno}: expected {p + d} columns (p={p}, d={d}), "
                    f"found {len(cells)}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return LabeledDataset(arr[:, :p], arr[:, p:])


def write_csv(data: LabeledDataset, path) -> None:
    header = [f"x{i + 1}" for i in range(data.p)] + [f"y{j + 1}" for j in range(data.d)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for xi, yi in zip(data.x, data.y):
            fh.write(",".join(f"{v:.17g}" for v in (*xi, *yi)) + "\n")


@dataclass(frozen=True)
class Standardizer:
    """Per-column z-scoring fitted on the training block only."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, train: LabeledDataset) -> "Standardizer":
        def stats(a):
            mean = a.mean(axis=0)
            std = a.std(axis=0)
            std = np.where(std == 0, 1.0, std)
            return mean, std

        xm, xs = stats(train.x)
        ym, ys = stats(train.y)
        return cls(xm, xs, ym, ys)

    def apply(self, data: LabeledDataset) -> LabeledDataset:
        return LabeledDataset((data.x - self.x_mean) / self.x_std, (data.y - self.y_mean) / self.y_std)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

_SCP_ID = "scp"
_RCP_ID = "rcp"


@dataclass(frozen=True)
class MethodSpec:
    kind: str  # scp | rcp
    score: str
    family: str = "additive"
    estimator: str = "local_kernel"  # local_kernel | pinball_net | constant | oracle

    def method_id(self) -> str:
        if self.kind == _SCP_ID:
            return f"scp+{self.score}"
        return f"rcp+{self.score}+{self.family}+{self.estimator}"


@dataclass(frozen=True)
class MetricSpec:
    wsc_delta: float = 0.2
    wsc_directions: int = 1000
    cce_bins: int = 20
    volume: bool = False
    volume_draws: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "toy"  # toy | two_moons | csv
    n: int = 6000
    csv_path: str | None = None
    csv_p: int = 1
    csv_d: int = 1
    alpha: float = 0.1
    calibration_size: int = 2048
    train_fraction: float = 0.7
    tau_fraction: float = 0.5
    predictor: str = "oracle"  # oracle | constant_mean | mean_net | mixture_net
    mixture_components: int = 2
    pcp_samples: int = 50
    net: NetConfig = field(default_factory=lambda: NetConfig(hidden=(32, 32), max_epochs=60))
    kernel_bandwidth: float | None = None
    methods: tuple[MethodSpec, ...] = ()
    metrics: MetricSpec = field(default_factory=MetricSpec)
    seed: int = 0
    replications: int = 1
    allow_domain_violation: bool = False
    standardize: bool | None = None

    def __post_init__(self) -> None:
        if self.source not in ("toy", "two_moons", "csv"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("csv source requires csv_path")
        if not self.methods:
            raise ConfigError("no methods configured")
        for m in self.methods:
            validate_method(m, allow_domain_violation=self.allow_domain_violation)
        if self.predictor == "oracle" and self.source != "toy":
            raise ConfigError("the oracle predictor exists only for the toy generator")


def validate_method(m: MethodSpec, allow_domain_violation: bool = False) -> None:
    if m.kind not in (_SCP_ID, _RCP_ID):
        raise ConfigError(f"method kind must be scp or rcp, got {m.kind!r}")
    if m.score not in ("abs_residual", "linf_residual", "mahalanobis", "mixture_nll", "sample_distance"):
        raise ConfigError(f"unknown score {m.score!r}")
    if m.kind == _RCP_ID:
        conflict = structural_conflict(family(m.family), m.score)
        if conflict and not allow_domain_violation:
            raise ConfigError(f"{m.method_id()}: {conflict} (set allow_domain_violation to override)")


def config_from_json(path) -> ExperimentConfig:
    """Load the flat JSON config schema (documented in the README)."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    methods = tuple(
        MethodSpec(
            kind=m["kind"],
            score=m["score"],
            family=m.get("family", "additive"),
            estimator=m.get("estimator", "local_kernel"),
        )
        for m in raw.get("methods", [])
    )
    metrics = MetricSpec(
        wsc_delta=raw.get("wsc_delta", 0.2),
        wsc_directions=raw.get("wsc_directions", 1000),
        cce_bins=raw.get("cce_bins", 20),
        volume=raw.get("volume", False),
        volume_draws=raw.get("volume_draws", 1000),
    )
    net = NetConfig(
        hidden=tuple(raw.get("net_hidden", (32, 32))),
        learning_rate=raw.get("net_lr", 1e-3),
        batch_size=raw.get("net_batch", 128),
        max_epochs=raw.get("net_epochs", 60),
        patience=raw.get("net_patience", 20),
        seed=raw.get("seed", 0),
    )
    return ExperimentConfig(
        source=raw.get("source", "toy"),
        n=raw.get("n", 6000),
        csv_path=raw.get("csv_path"),
        csv_p=raw.get("csv_p", 1),
        csv_d=raw.get("csv_d", 1),
        alpha=raw.get("alpha", 0.1),
        calibration_size=raw.get("calibration_size", 2048),
        train_fraction=raw.get("train_fraction", 0.7),
        tau_fraction=raw.get("tau_fraction", 0.5),
        predictor=raw.get("predictor", "oracle" if raw.get("source", "toy") == "toy" else "mean_net"),
        mixture_components=raw.get("mixture_components", 2),
        pcp_samples=raw.get("pcp_samples", 50),
        net=net,
        kernel_bandwidth=raw.get("kernel_bandwidth"),
        methods=methods,
        metrics=metrics,
        seed=raw.get("seed", 0),
        replications=raw.get("replications", 1),
        allow_domain_violation=raw.get("allow_domain_violation", False),
        standardize=raw.get("standardize"),
    )


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    seed: int
    coverage: float = math.nan
    wsc: float = math.nan
    cce: float = math.nan
    med_logvol_d: float = math.nan
    mean_logvol_d: float = math.nan
    runtime_s: float = math.nan
    status: str = "ok"

    @property
    def failed(self) -> bool:
        return self.status != "ok"


def _load_source(config: ExperimentConfig, seed: int) -> LabeledDataset:
    if config.source == "toy":
        return sample_toy(ToySpec(config.n, seed))
    if config.source == "two_moons":
        return sample_two_moons(config.n, seed=seed)
    return load_csv(config.csv_path, config.csv_p, config.csv_d)


def _fit_predictors(config: ExperimentConfig, trainset: LabeledDataset, needs, rng: Rng):
    """Fit the base predictors the configured methods require."""
    out = {}
    if "mean" in needs:
        if config.predictor == "oracle":
            out["mean"] = FunctionPredictor(lambda x: toy_mean(x[:, 0])[:, None])
        elif config.predictor == "constant_mean":
            out["mean"] = ConstantMeanPredictor(trainset.y.mean(axis=0))
        else:
            net = MLP([trainset.p, *config.net.hidden, trainset.d], rng.child(11))
            train(net, trainset.x, trainset.y, MseLoss(), config.net, rng.child(12))
            out["mean"] = NetMeanPredictor(net)
    if "mixture" in needs:
        k, d = config.mixture_components, trainset.d
        net = MLP([trainset.p, *config.net.hidden, mixture_head_width(k, d)], rng.child(13))
        train(net, trainset.x, trainset.y, MixtureNllLoss(k, d), config.net, rng.child(14))
        out["mixture"] = NetMixturePredictor(net, k, d)
    return out


def _build_score(config: ExperimentConfig, m: MethodSpec, predictors, trainset: LabeledDataset, rng: Rng) -> ScoreFunction:
    if m.score == "abs_residual":
        if trainset.d != 1:
            raise ConfigError("abs_residual requires a scalar response")
        return AbsResidualScore(predictors["mean"])
    if m.score == "linf_residual":
        return LinfResidualScore(predictors["mean"])
    if m.score == "mahalanobis":
        mu = np.atleast_2d(predictors["mean"](trainset.x))
        resid = trainset.y - mu
        cov = np.cov(resid.T) if trainset.d > 1 else np.atleast_2d(np.var(resid))
        cov = cov + 1e-9 * np.eye(trainset.d)
        return MahalanobisScore(predictors["mean"], cov)
    if m.score == "mixture_nll":
        return MixtureNllScore(predictors["mixture"])
    if m.score == "sample_distance":
        return SampleDistanceScore(
            MixtureSampler(predictors["mixture"]), n_samples=config.pcp_samples, seed=rng.seed
        )
    raise AssertionError(m.score)


def _estimator_spec(config: ExperimentConfig, m: MethodSpec, shift: float) -> QEstimatorSpec:
    from rcp.quantile import KernelSpec

    if m.estimator == "oracle":
        if config.source != "toy" or m.score != "abs_residual":
            raise ConfigError("the oracle estimator exists only for toy + abs_residual")
        alpha = config.alpha
        return QEstimatorSpec(
            kind="function",
            function=lambda x: oracle_toy_quantile(x[:, 0], alpha) + shift,
        )
    if m.estimator == "local_kernel":
        return QEstimatorSpec(kind="local_kernel", kernel=KernelSpec(bandwidth=config.kernel_bandwidth))
    if m.estimator == "pinball_net":
        return QEstimatorSpec(kind="pinball_net", net=config.net)
    if m.estimator == "constant":
        return QEstimatorSpec(kind="constant")
    raise ConfigError(f"unknown estimator {m.estimator!r}")


def _evaluate(config: ExperimentConfig, model, test: LabeledDataset, rng: Rng) -> CoverageRecords:
    if isinstance(model, ScpModel):
        covered = model.contains(test.x, test.y)
        levels = np.full(test.n, model.threshold)
    else:
        covered = rcp_contains(model, test.x, test.y)
        levels = np.atleast_1d(rcp_base_level(model, test.x))
    score = model.score
    log_volume = None
    if config.metrics.volume:
        log_volume = np.empty(test.n)
        for i in range(test.n):
            geom = score.sublevel_geometry(test.x[i], float(levels[i]))
            est = set_volume(geom, McSpec(n_draws=config.metrics.volume_draws, seed=rng.child(i).seed))
            log_volume[i] = est.log_volume_over_d
    return CoverageRecords(test.x, covered, log_volume)


def run_experiment(config: ExperimentConfig) -> list[ReportRow]:
    """Run every configured method for every replication.

    Baseline (scp) methods consume the full calibration block; rectified
    methods split the same block internally, so every method sees the same
    number of calibration points.  A failing method yields a flagged row
    and the run continues.
    """
    rows: list[ReportRow] = []
    base = _load_source(config, config.seed) if config.source == "csv" else None
    needs = set()
    for m in config.methods:
        needs.add("mixture" if m.score in ("mixture_nll", "sample_distance") else "mean")
    standardize = config.standardize if config.standardize is not None else config.source == "csv"

    for rep in range(config.replications):
        seed = config.seed + rep
        rng = Rng(seed)
        data = base if base is not None else _load_source(config, seed)
        split = SplitSpec(config.calibration_size, config.train_fraction, seed)
        trainset, cal, test = split_dataset(data, split)
        if standardize:
            std = Standardizer.fit(trainset)
            trainset, cal, test = std.apply(trainset), std.apply(cal), std.apply(test)
        predictors = _fit_predictors(config, trainset, needs, rng.child(1))
        for m in config.methods:
            t0 = time.perf_counter()
            row = ReportRow(method=m.method_id(), seed=seed)
            try:
                score = _build_score(config, m, predictors, trainset, rng.child(2))
                if m.kind == _SCP_ID:
                    model = scp_calibrate(cal, score, config.alpha)
                else:
                    model = rcp_calibrate(
                        cal,
                        score,
                        m.family,
                        _estimator_spec(config, m, 0.0),
                        config.alpha,
                        tau_fraction=config.tau_fraction,
                        rng=rng.child(3),
                        auto_shift=True,
                    )
                    if model.shift_applied and m.estimator == "oracle":
                        # refit with the oracle aware of the applied shift
                        model = rcp_calibrate(
                            cal,
                            score,
                            m.family,
                            _estimator_spec(config, m, model.shift_applied),
                            config.alpha,
                            tau_fraction=config.tau_fraction,
                            rng=rng.child(3),
                            auto_shift=True,
                        )
                records = _evaluate(config, model, test, rng.child(4))
                row.coverage = marginal_coverage(records)
                row.wsc = worst_slab_coverage(
                    records,
                    WscSpec(config.metrics.wsc_delta, config.metrics.wsc_directions, seed),
                )
                cce = conditional_coverage_error(
                    records, config.alpha, CceSpec(bins=config.metrics.cce_bins, seed=seed)
                )
                row.cce = cce.value
                if records.log_volume is not None:
                    row.med_logvol_d, row.mean_logvol_d, _ = log_volume_summary(records.log_volume)
            except Exception as exc:  # failed rows never abort the benchmark
                row.status = f"{type(exc).__name__}: {exc}"
            row.runtime_s = time.perf_counter() - t0
            rows.append(row)
    return rows


_REPORT_HEADER = (
    "method",
    "seed",
    "coverage",
    "wsc",
    "cce",
    "med_logvol_d",
    "mean_logvol_d",
    "runtime_s",
    "status",
)


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "NA"
    return f"{v:.10g}"


def emit_report(rows: list[ReportRow], path, summary_path=None) -> str:
    """Write the report CSV (deterministic order) and a plain-text summary.

    Returns the summary text.  Failed rows carry NA metric fields and the
    failure reason in the status column.
    """
    if not rows:
        raise ValueError("no rows to report")
    ordered = sorted(rows, key=lambda r: (r.method, r.seed))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(_REPORT_HEADER) + "\n")
        for r in ordered:
            cells = [
                r.method,
                str(r.seed),
                _fmt(r.coverage),
                _fmt(r.wsc),
                _fmt(r.cce),
                _fmt(r.med_logvol_d),
                _fmt(r.mean_logvol_d),
                _fmt(r.runtime_s),
                '"' + r.status.replace('"', "'") + '"',
            ]
            fh.write(",".join(cells) + "\n")
    lines = [
        f"{'method':40s} {'n':>3s} {'coverage':>9s} {'wsc':>7s} {'cce':>7s} {'med_lv/d':>9s} {'fail':>4s}"
    ]
    for method in sorted({r.method for r in ordered}):
        sub = [r for r in ordered if r.method == method]
        ok = [r for r in sub if not r.failed]

        def mean_of(attr):
            vals = [getattr(r, attr) for r in ok if not math.isnan(getattr(r, attr))]
            return sum(vals) / len(vals) if vals else math.nan

        lines.append(
            f"{method:40s} {len(sub):3d} "
            f"{_fmt(mean_of('coverage')):>9s} {_fmt(mean_of('wsc')):>7s} "
            f"{_fmt(mean_of('cce')):>7s} {_fmt(mean_of('med_logvol_d')):>9s} "
            f"{len(sub) - len(ok):4d}"
        )
    summary = "\n".join(lines) + "\n"
    if summary_path is not None:
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write(summary)
    return summary


# ---------------------------------------------------------------------------
# Theory check 1: marginal coverage sandwich
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalCheck:
    family: str
    estimator: str
    mean_coverage: float
    stderr: float
    lower: float
    upper: float
    reps: int
    runtime_s: float

    @property
    def passed(self) -> bool:
        return self.lower - 3 * self.stderr <= self.mean_coverage <= self.upper + 3 * self.stderr

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (
            f"[{tag}] marginal {self.family}+{self.estimator}: "
            f"mean={self.mean_coverage:.4f} se={self.stderr:.4f} "
            f"target=[{self.lower:.3f},{self.upper:.3f}] reps={self.reps} "
            f"({self.runtime_s:.1f}s)"
        )


def check_marginal_bounds(
    n_cal: int = 99,
    alpha: float = 0.1,
    reps: int = 2000,
    rng: Rng | None = None,
    family_kind: str = "additive",
    estimator: str = "constant",
    m_tau: int = 99,
    n_test: int = 200,
    net: NetConfig | None = None,
    kernel_bandwidth: float | None = 0.1,
    score_shift: float = 0.0,
    auto_shift: bool = False,
) -> MarginalCheck:
    """Monte-Carlo check of the finite-sample coverage sandwich.

    On continuous data the rectified scores are almost surely distinct, and
    mean test coverage must land in [1-alpha, 1-alpha + 1/(n_cal+1)] up to
    3 MC standard errors, for any quantile estimator.  ``estimator`` may be
     'constant', 'local_kernel', 'pinball_net', 'oracle', or 'corrupted'
    (the oracle fully replaced by noise, which must not break marginal
    validity).
    """
    rng = rng if rng is not None else Rng(0)
    net = net if net is not None else NetConfig(
        hidden=(32, 32), batch_size=32, max_epochs=25, patience=8, learning_rate=1e-2
    )
    t0 = time.perf_counter()
    coverages = np.empty(reps)
    for r in range(reps):
        sub = rng.child(r)
        data = sample_toy(ToySpec(m_tau + n_cal + n_test, seed=sub.seed))
        cal = data.subset(np.arange(m_tau + n_cal))
        test = data.subset(np.arange(m_tau + n_cal, data.n))
        score = AbsResidualScore(
            FunctionPredictor(lambda x: toy_mean(x[:, 0])[:, None]), score_shift
        )
        if estimator == "oracle":
            spec = QEstimatorSpec(
                kind="function", function=lambda x: oracle_toy_quantile(x[:, 0], alpha) + score_shift
            )
        elif estimator == "corrupted":
            noise_rng = sub.child(77)
            spec = QEstimatorSpec(
                kind="function",
                function=lambda x: toy_scale(x[:, 0]) * noise_rng.normal(size=x.shape[0])
                + score_shift,
            )
        elif estimator == "local_kernel":
            from rcp.quantile import KernelSpec

            spec = QEstimatorSpec(kind="local_kernel", kernel=KernelSpec(bandwidth=kernel_bandwidth))
        elif estimator == "pinball_net":
            spec = QEstimatorSpec(kind="pinball_net", net=replace(net, seed=sub.seed))
        else:
            spec = QEstimatorSpec(kind="constant")
        model = rcp_calibrate(
            cal,
            score,
            family_kind,
            spec,
            alpha,
            tau_fraction=m_tau / (m_tau + n_cal),
            rng=sub.child(1),
            auto_shift=auto_shift,
        )
        coverages[r] = float(np.mean(rcp_contains(model, test.x, test.y)))
    stderr = float(coverages.std(ddof=1) / math.sqrt(reps))
    return MarginalCheck(
        family=family_kind,
        estimator=estimator,
        mean_coverage=float(coverages.mean()),
        stderr=stderr,
        lower=1.0 - alpha,
        upper=1.0 - alpha + 1.0 / (n_cal + 1),
        reps=reps,
        runtime_s=time.perf_counter() - t0,
    )


def oracle_toy_model(family_kind: str = "additive", alpha: float = 0.1):
    """The oracle prediction set on the toy process, as a frozen model.

    The quantile map is the exact conditional quantile and the threshold is
    the family anchor, so the set is {y : |y - mean(x)| <= q(x)} for every
    family; exponential families receive the unit score shift their domain
    requires.  Conditional coverage is exactly 1 - alpha at every x.
    """
    from rcp.calibrate import RcpModel, _MappedQuantile
    from rcp.quantile import FunctionQuantile, PinballLevel

    fam = family(family_kind)
    shift = 1.1 if fam.v_lower >= 1.0 else 0.0
    score = AbsResidualScore(
        FunctionPredictor(lambda x: toy_mean(x[:, 0])[:, None]), shift
    )
    level = PinballLevel.from_alpha(alpha)
    tau = _MappedQuantile(
        FunctionQuantile(lambda x: oracle_toy_quantile(x[:, 0], alpha) + shift, level), fam
    )
    return RcpModel(
        family=fam,
        score=score,
        tau_hat=tau,
        alpha=alpha,
        conformal_threshold=fam.phi,
        shift_applied=shift,
        n_tau=0,
        n_proper=0,
    )


# ---------------------------------------------------------------------------
# Theory check 2: contaminated-oracle local coverage (toy study)
# ---------------------------------------------------------------------------


def toy_grid_equal_mass(size: int) -> np.ndarray:
    """Equal-mass grid under the toy covariate law (Beta quantile points)."""
    u = (np.arange(size) + 0.5) / size
    return special.betaincinv(TOY_BETA_A, TOY_BETA_B, u)


@dataclass(frozen=True)
class Table1Row:
    omega: float
    mean_percent: float
    stderr_percent: float
    sd_percent: float
    reps: int

    def line(self, band: tuple[float, float] | None = None) -> str:
        msg = (
            f"omega={self.omega:.3f}: lower-decile local coverage "
            f"{self.mean_percent:.1f}% +- {self.stderr_percent:.1f} (sd {self.sd_percent:.1f})"
        )
        if band is not None:
            tag = "PASS" if band[0] <= self.mean_percent <= band[1] else "FAIL"
            msg = f"[{tag}] {msg} target=[{band[0]:.0f},{band[1]:.0f}]"
        return msg


def check_table1(
    omegas=(0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0),
    reps: int = 1000,
    rng: Rng | None = None,
    n: int = 100,
    alpha: float = 0.1,
    grid_size: int = 200,
    noise_mode: str = "shared",
) -> list[Table1Row]:
    """Contaminated-oracle toy study of local coverage.

    For each replication, n calibration pairs are drawn from the toy
    process; the quantile map is the oracle mixed with centered scale-x^2
    noise at weight omega; the additive rectified scores are conformalized;
    and the local coverage function is evaluated analytically on an
    equal-mass covariate grid.  The per-replication statistic is the lower
    decile of local coverage over the grid ("the adversarially selected
    10%"), reported in percent as mean +- MC stderr across replications.

    ``noise_mode``: 'shared' draws one standard normal per replication and
    scales it by x^2, so the contaminated map is a fixed function used both
    in calibration and evaluation; 'iid' draws the noise independently at
    every point where the map is evaluated.
    """
    if noise_mode not in ("shared", "iid"):
        raise ConfigError("noise_mode must be 'shared' or 'iid'")
    rng = rng if rng is not None else Rng(0)
    xg = toy_grid_equal_mass(grid_size)
    k_alpha = math.ceil((1.0 - alpha) * (n + 1))
    k_dec = max(1, math.ceil(0.1 * grid_size))
    out = []
    for omega in omegas:
        g = rng.child(int(round(omega * 1000)))
        gen = g.gen
        xc = sample_beta(reps * n, TOY_BETA_A, TOY_BETA_B, g).reshape(reps, n)
        vc = toy_scale(xc) * np.abs(gen.standard_normal((reps, n)))
        if noise_mode == "shared":
            zshared = gen.standard_normal((reps, 1))
            eps_c = toy_scale(xc) * zshared
            eps_g = toy_scale(xg)[None, :] * zshared
        else:
            eps_c = toy_scale(xc) * gen.standard_normal((reps, n))
            eps_g = toy_scale(xg)[None, :] * gen.standard_normal((reps, grid_size))
        tau_c = (1.0 - omega) * oracle_toy_quantile(xc, alpha) + omega * eps_c
        if k_alpha > n:
            thresholds = np.full(reps, math.inf)
        else:
            thresholds = np.partition(vc - tau_c, k_alpha - 1, axis=1)[:, k_alpha - 1]
        tau_g = (1.0 - omega) * oracle_toy_quantile(xg, alpha)[None, :] + omega * eps_g
        arg = (tau_g + thresholds[:, None]) / toy_scale(xg)[None, :]
        local = np.clip(2.0 * normal_cdf(arg) - 1.0, 0.0, 1.0)
        deciles = np.sort(local, axis=1)[:, k_dec - 1]
        out.append(
            Table1Row(
                omega=float(omega),
                mean_percent=float(deciles.mean() * 100.0),
                stderr_percent=float(deciles.std(ddof=1) / math.sqrt(reps) * 100.0),
                sd_percent=float(deciles.std(ddof=1) * 100.0),
                reps=reps,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Theory check 3: pinball-loss bound on the conditional level error
# ---------------------------------------------------------------------------


def _halfnormal_pdf(v, scale):
    return np.where(
        v < 0, 0.0, math.sqrt(2.0 / math.pi) / scale * np.exp(-0.5 * (v / scale) ** 2)
    )


def _halfnormal_cdf(v, scale):
    return 0.0 if v <= 0 else float(2.0 * normal_cdf(v / scale) - 1.0)


def conditional_pinball_loss(x: float, t: float, alpha: float = 0.1) -> float:
    """E[rho_{1-alpha}(V - t) | X=x] on the toy model, by adaptive quadrature."""
    scale = float(toy_scale(x))
    level = PinballLevel.from_alpha(alpha)

    def integrand(v):
        return float(pinball_loss(v - t, level)) * float(_halfnormal_pdf(v, scale))

    upper = max(t, 0.0) + 12.0 * scale
    total = 0.0
    pieces = sorted({0.0, max(t, 0.0), upper})
    for a, b in zip(pieces[:-1], pieces[1:]):
        if b > a:
            val, _ = integrate.quad(integrand, a, b, limit=200)
            total += val
    tail, _ = integrate.quad(integrand, upper, np.inf, limit=200)
    return total + tail


def level_error(x: float, t: float, alpha: float = 0.1) -> float:
    """epsilon_t(x) = P(V <= t | X=x) - (1 - alpha) on the toy model."""
    return _halfnormal_cdf(t, float(toy_scale(x))) - (1.0 - alpha)


@dataclass(frozen=True)
class EpsilonCheck:
    n_pairs: int
    max_violation: float
    worst_pair: tuple[float, float]
    tolerance: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (
            f"[{tag}] epsilon bound: max violation {self.max_violation:.3g} over "
            f"{self.n_pairs} (x, tau) pairs (tolerance {self.tolerance:g}), "
            f"worst at x={self.worst_pair[0]:.3f}, tau={self.worst_pair[1]:.3f}"
        )


def check_epsilon_bound(
    x_grid=None, tau_offsets=None, alpha: float = 0.1, tolerance: float = 1e-6
) -> EpsilonCheck:
    """Verify |epsilon_tau(x)| <= sqrt(2 * excess pinball loss) pointwise.

    The bound's constant presumes the conditional score density is bounded
    by one; on the toy model that holds exactly for x >= (2/pi)^(1/4)
    (about 0.894), where the half-normal scale x^2 is large enough.  The
    default grid therefore starts at 0.9; below that threshold the
    inequality genuinely fails for small perturbations, which the companion
    unit test demonstrates.
    """
    x_grid = np.asarray(x_grid if x_grid is not None else np.linspace(0.9, 1.3, 10))
    tau_offsets = np.asarray(
        tau_offsets if tau_offsets is not None else np.linspace(-0.5, 0.5, 10)
    )
    worst = -math.inf
    worst_pair = (math.nan, math.nan)
    count = 0
    for x in x_grid:
        t_star = oracle_toy_quantile(float(x), alpha)
        base = conditional_pinball_loss(float(x), t_star, alpha)
        for off in tau_offsets:
            t = t_star + float(off)
            gap = max(conditional_pinball_loss(float(x), t, alpha) - base, 0.0)
            violation = abs(level_error(float(x), t, alpha)) - math.sqrt(2.0 * gap)
            count += 1
            if violation > worst:
                worst = violation
                worst_pair = (float(x), t)
    return EpsilonCheck(
        n_pairs=count, max_violation=worst, worst_pair=worst_pair, tolerance=tolerance
    )
