"""Command-line interface.

Verbs: gen-data, split, calibrate, predict, evaluate, bench, theory-check.
Exit codes: 0 on success, 1 on usage errors, 2 when any benchmark row or
theory check fails.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from rcp.calibrate import (
    QEstimatorSpec,
    ScpModel,
    load_model,
    rcp_base_level,
    rcp_calibrate,
    rcp_contains,
    save_model,
    scp_calibrate,
)
from rcp.core import LabeledDataset, Rng, SplitSpec, split_dataset
from rcp.datagen import ToySpec, sample_toy, sample_two_moons
from rcp.harness import (
    ConfigError,
    ExperimentConfig,
    MethodSpec,
    Standardizer,
    check_epsilon_bound,
    check_marginal_bounds,
    check_table1,
    config_from_json,
    emit_report,
    load_csv,
    run_experiment,
    write_csv,
)
from rcp.metrics import (
    CceSpec,
    CoverageRecords,
    WscSpec,
    conditional_coverage_error,
    marginal_coverage,
    worst_slab_coverage,
)
from rcp.nnet import MLP, MixtureNllLoss, MseLoss, NetConfig, mixture_head_width, train
from rcp.quantile import KernelSpec
from rcp.scores import (
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


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_data_args(p, with_dims=True):
    p.add_argument("--data", required=True, help="CSV file")
    if with_dims:
        p.add_argument("--p", type=int, required=True, help="covariate columns")
        p.add_argument("--d", type=int, required=True, help="response columns")


def build_parser() -> _Parser:
    parser = _Parser(prog="rcp", description="rectified conformal prediction toolkit")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample a synthetic dataset to CSV")
    g.add_argument("--generator", choices=("toy", "two_moons"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)

    s = sub.add_parser("split", help="split a CSV into train/calibration/test files")
    _add_data_args(s)
    s.add_argument("--cal-size", type=int, default=2048)
    s.add_argument("--train-frac", type=float, default=0.7)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-prefix", required=True)

    c = sub.add_parser("calibrate", help="calibrate a conformal model on a calibration CSV")
    _add_data_args(c)
    c.add_argument("--train", help="training CSV for fitting the base predictor")
    c.add_argument("--method", choices=("scp", "rcp"), default="rcp")
    c.add_argument(
        "--score",
        choices=("abs_residual", "linf_residual", "mahalanobis", "mixture_nll", "sample_distance"),
        default="abs_residual",
    )
    c.add_argument(
        "--family",
        choices=("additive", "multiplicative", "exp_additive", "exp_multiplicative"),
        default="additive",
    )
    c.add_argument("--estimator", choices=("local_kernel", "pinball_net", "constant"), default="local_kernel")
    c.add_argument("--predictor", choices=("constant_mean", "mean_net", "mixture_net"), default="constant_mean")
    c.add_argument("--alpha", type=float, default=0.1)
    c.add_argument("--tau-fraction", type=float, default=0.5)
    c.add_argument("--bandwidth", type=float, help="fixed kernel bandwidth (default: grid search)")
    c.add_argument("--mixture-components", type=int, default=2)
    c.add_argument("--pcp-samples", type=int, default=50)
    c.add_argument("--net-hidden", default="32,32")
    c.add_argument("--net-epochs", type=int, default=60)
    c.add_argument("--net-batch", type=int, default=32)
    c.add_argument("--auto-shift", action="store_true")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)

    pr = sub.add_parser("predict", help="membership or raw-score cutoffs from a saved model")
    pr.add_argument("--model", required=True)
    _add_data_args(pr)
    pr.add_argument("--base-level", action="store_true", help="emit raw-score cutoffs per row")
    pr.add_argument("--out", help="write results to CSV instead of stdout")

    e = sub.add_parser("evaluate", help="coverage metrics of a saved model on a test CSV")
    e.add_argument("--model", required=True)
    _add_data_args(e)
    e.add_argument("--wsc-delta", type=float, default=0.2)
    e.add_argument("--wsc-directions", type=int, default=1000)
    e.add_argument("--cce-bins", type=int, default=20)
    e.add_argument("--seed", type=int, required=True)

    b = sub.add_parser("bench", help="run a benchmark from a JSON config")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True, help="report CSV path")
    b.add_argument("--summary", help="also write the plain-text summary here")

    t = sub.add_parser("theory-check", help="Monte-Carlo validation of the coverage theory")
    t.add_argument("--check", choices=("marginal", "table1", "epsilon"), required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--reps", type=int)
    t.add_argument("--n-cal", type=int, default=99)
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument(
        "--family",
        choices=("additive", "multiplicative", "exp_additive", "exp_multiplicative"),
        default="additive",
    )
    t.add_argument(
        "--estimator",
        choices=("constant", "local_kernel", "pinball_net", "oracle", "corrupted"),
        default="constant",
    )
    t.add_argument("--noise-mode", choices=("shared", "iid"), default="shared")
    return parser


def _net_config(args, seed: int) -> NetConfig:
    hidden = tuple(int(w) for w in str(args.net_hidden).split(",") if w)
    return NetConfig(
        hidden=hidden, batch_size=args.net_batch, max_epochs=args.net_epochs, seed=seed
    )


def _cmd_gen_data(args) -> int:
    if args.generator == "toy":
        data = sample_toy(ToySpec(args.n, args.seed))
    else:
        data = sample_two_moons(args.n, seed=args.seed)
    write_csv(data, args.out)
    print(f"wrote {data.n} rows to {args.out}")
    return 0


def _cmd_split(args) -> int:
    data = load_csv(args.data, args.p, args.d)
    spec = SplitSpec(args.cal_size, args.train_frac, args.seed)
    trainset, cal, test = split_dataset(data, spec)
    for name, part in (("train", trainset), ("cal", cal), ("test", test)):
        write_csv(part, f"{args.out_prefix}.{name}.csv")
    print(f"split {data.n} rows -> train {trainset.n}, cal {cal.n}, test {test.n}")
    return 0


def _build_cli_predictor(args, trainset: LabeledDataset, rng: Rng):
    if args.predictor == "constant_mean":
        return {"mean": ConstantMeanPredictor(trainset.y.mean(axis=0))}
    cfg = _net_config(args, args.seed)
    if args.predictor == "mean_net":
        net = MLP([trainset.p, *cfg.hidden, trainset.d], rng.child(1))
        train(net, trainset.x, trainset.y, MseLoss(), cfg, rng.child(2))
        return {"mean": NetMeanPredictor(net)}
    k, d = args.mixture_components, trainset.d
    net = MLP([trainset.p, *cfg.hidden, mixture_head_width(k, d)], rng.child(1))
    train(net, trainset.x, trainset.y, MixtureNllLoss(k, d), cfg, rng.child(2))
    return {"mixture": NetMixturePredictor(net, k, d)}


def _cmd_calibrate(args) -> int:
    cal = load_csv(args.data, args.p, args.d)
    trainset = load_csv(args.train, args.p, args.d) if args.train else cal
    rng = Rng(args.seed)
    predictors = _build_cli_predictor(args, trainset, rng)
    if args.score in ("mixture_nll", "sample_distance") and "mixture" not in predictors:
        raise ConfigError(f"score {args.score} requires --predictor mixture_net")
    if args.score not in ("mixture_nll", "sample_distance") and "mean" not in predictors:
        raise ConfigError(f"score {args.score} requires a mean predictor")
    if args.score == "abs_residual":
        score = AbsResidualScore(predictors["mean"])
    elif args.score == "linf_residual":
        score = LinfResidualScore(predictors["mean"])
    elif args.score == "mahalanobis":
        resid = trainset.y - np.atleast_2d(predictors["mean"](trainset.x))
        cov = np.cov(resid.T) if args.d > 1 else np.atleast_2d(np.var(resid))
        score = MahalanobisScore(predictors["mean"], cov + 1e-9 * np.eye(args.d))
    elif args.score == "mixture_nll":
        score = MixtureNllScore(predictors["mixture"])
    else:
        score = SampleDistanceScore(
            MixtureSampler(predictors["mixture"]), args.pcp_samples, args.seed
        )
    if args.method == "scp":
        model = scp_calibrate(cal, score, args.alpha)
        print(f"scp threshold {model.threshold:.6g}")
    else:
        spec = QEstimatorSpec(
            kind=args.estimator,
            kernel=KernelSpec(bandwidth=args.bandwidth),
            net=_net_config(args, args.seed),
        )
        model = rcp_calibrate(
            cal,
            score,
            args.family,
            spec,
            args.alpha,
            tau_fraction=args.tau_fraction,
            rng=rng.child(3),
            auto_shift=args.auto_shift,
        )
        print(
            f"rcp threshold {model.conformal_threshold:.6g} "
            f"(family {args.family}, shift {model.shift_applied:g}, "
            f"m={model.n_tau}, n={model.n_proper})"
        )
    save_model(model, args.out)
    print(f"model written to {args.out}")
    return 0


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    data = load_csv(args.data, args.p, args.d)
    if args.base_level:
        if isinstance(model, ScpModel):
            levels = np.full(data.n, model.threshold)
        else:
            levels = np.atleast_1d(rcp_base_level(model, data.x))
        lines = [f"{v:.10g}" for v in levels]
    else:
        if isinstance(model, ScpModel):
            member = model.contains(data.x, data.y)
        else:
            member = rcp_contains(model, data.x, data.y)
        lines = [str(int(v)) for v in np.atleast_1d(member)]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def _cmd_evaluate(args) -> int:
    model = load_model(args.model)
    data = load_csv(args.data, args.p, args.d)
    if isinstance(model, ScpModel):
        covered = model.contains(data.x, data.y)
    else:
        covered = rcp_contains(model, data.x, data.y)
    records = CoverageRecords(data.x, covered)
    cov = marginal_coverage(records)
    wsc = worst_slab_coverage(records, WscSpec(args.wsc_delta, args.wsc_directions, args.seed))
    cce = conditional_coverage_error(records, model.alpha, CceSpec(bins=args.cce_bins, seed=args.seed))
    print(f"coverage {cov:.4f}")
    print(f"wsc {wsc:.4f}")
    print(f"cce {cce.value:.4f} ({cce.n_cells} cells)" + (" [undefined]" if cce.undefined else ""))
    return 0


def _cmd_bench(args) -> int:
    config = config_from_json(args.config)
    rows = run_experiment(config)
    summary = emit_report(rows, args.out, args.summary)
    print(summary, end="")
    return 2 if any(r.failed for r in rows) else 0


def _cmd_theory_check(args) -> int:
    rng = Rng(args.seed)
    if args.check == "marginal":
        reps = args.reps or 2000
        res = check_marginal_bounds(
            n_cal=args.n_cal,
            alpha=args.alpha,
            reps=reps,
            rng=rng,
            family_kind=args.family,
            estimator=args.estimator,
        )
        print(res.line())
        return 0 if res.passed else 2
    if args.check == "table1":
        reps = args.reps or 1000
        rows = check_table1(reps=reps, rng=rng, alpha=args.alpha, noise_mode=args.noise_mode)
        for row in rows:
            print(row.line())
        return 0
    res = check_epsilon_bound(alpha=args.alpha)
    print(res.line())
    return 0 if res.passed else 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gen-data": _cmd_gen_data,
        "split": _cmd_split,
        "calibrate": _cmd_calibrate,
        "predict": _cmd_predict,
        "evaluate": _cmd_evaluate,
        "bench": _cmd_bench,
        "theory-check": _cmd_theory_check,
    }
    try:
        return handlers[args.verb](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
