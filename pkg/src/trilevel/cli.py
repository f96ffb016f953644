"""Command-line experiment runner.

Subcommands:

* ``run``         execute repeated seeded runs of a configured experiment
                  and write plot-ready CSVs (per-run traces, per-iteration
                  and per-wall-time aggregates with 95% t-CIs, and -- for
                  the adversarial problem -- a noisy-test summary).
* ``verify``      desk-scale engine-agreement and FD-referee checks;
                  nonzero exit on any tolerance breach.
* ``grid-search`` sweep the decaying step scales over {0.1, 0.01, 0.001}
                  per level and report the best final objective.
* ``split-info``  print the train/val/test sizes for a CSV.

Verbosity is controlled by the TSG_LOG environment variable (0/1).
"""

import argparse
import concurrent.futures
import configparser
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import advhpt as ah
from .adjoint import AdjointConfig, auto_scales
from .config import ExperimentConfig, load_config, save_config
from .driver import (
    Decaying,
    DeterministicSamples,
    IterationBudget,
    MinibatchSamples,
    NoiseSamples,
    RunTrace,
    TheoremConstant,
    TRACE_COLUMNS,
    run_bsg,
)
from .oracle import DETERMINISTIC, Point, wrap_gaussian_noise
from .synthetic import (
    closed_form_point,
    default_init_point,
    default_quadratic,
    default_quartic,
    make_oracle,
    save_spec,
)
from .verify import FdOracleConfig, engine_agreement_report, fd_grad_f


def _log(msg: str):
    if os.environ.get("TSG_LOG", "0") not in ("", "0"):
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# experiment assembly


@dataclass
class _Task:
    """Everything needed to run one repetition and evaluate results."""

    oracle_for: callable  # rep_seed -> oracle
    samples_for: callable  # rep_seed -> sample factory
    init: Point
    schedule: object
    budget: IterationBudget
    adjoint_cfg: AdjointConfig
    test_eval: callable = None  # trace, oracle -> rows for the noisy-test CSV
    spec: object = None


def _build_schedule(cfg: ExperimentConfig):
    if cfg.schedule == "theorem":
        return TheoremConstant(cfg.ul_iters, cfg.j0, cfg.k0)
    return Decaying(cfg.alpha_bar, cfg.beta_bar, cfg.gamma_bar)


def _build_task(cfg: ExperimentConfig) -> _Task:
    cfg.validate()
    budget = IterationBudget(
        cfg.ul_iters, cfg.j0, cfg.k0, cfg.adaptive, cfg.ul_threshold, cfg.ml_threshold
    )
    schedule = _build_schedule(cfg)

    if cfg.problem in ("quadratic", "quartic"):
        make_spec = default_quadratic if cfg.problem == "quadratic" else default_quartic
        spec = make_spec(cfg.n, cfg.m, cfg.t, rng=cfg.spec_seed)
        base_oracle = make_oracle(spec)
        init = default_init_point(spec, rng=cfg.spec_seed + 1)
        adjoint_cfg = _resolve_adjoint(cfg, base_oracle, init)

        if cfg.mode == "stochastic":
            def oracle_for(rep_seed):
                return wrap_gaussian_noise(make_oracle(spec), cfg.std_grad, cfg.std_hess, rep_seed)

            def samples_for(rep_seed):
                return NoiseSamples()
        else:
            def oracle_for(rep_seed):
                return make_oracle(spec)

            def samples_for(rep_seed):
                return DeterministicSamples()

        return _Task(oracle_for, samples_for, init, schedule, budget, adjoint_cfg, spec=spec)

    # adversarial hyperparameter tuning
    ds = ah.load_csv(cfg.csv)
    splits = ah.split_dataset(ds, ah.SplitSpec(seed=cfg.spec_seed))
    problem = ah.build_problem(ds, splits)
    oracle = ah.build_oracle(problem, ds)
    init = ah.init_point(problem)
    adjoint_cfg = _resolve_adjoint(cfg, oracle, init, pin_c0=1.0)

    if cfg.mode == "deterministic":
        def samples_for(rep_seed):
            return DeterministicSamples()
    else:
        def samples_for(rep_seed):
            return MinibatchSamples(problem.n_train, cfg.minibatch, rep_seed)

    def oracle_for(rep_seed):
        return oracle

    mean, std = oracle.feature_mean, oracle.feature_std
    test_features = (ds.features[splits.test] - mean) / std
    test_targets = ds.targets[splits.test]

    def test_eval(trace: RunTrace, run_id: int):
        theta = trace.iterates[-1].y
        _, values = ah.noisy_test_mse(
            theta, test_features, test_targets,
            noise_std=cfg.noise_test_std,
            realizations=cfg.noise_test_realizations,
            seed=cfg.base_seed + run_id,
        )
        return values

    return _Task(oracle_for, samples_for, init, schedule, budget, adjoint_cfg,
                 test_eval=test_eval)


def _resolve_adjoint(cfg: ExperimentConfig, oracle, init: Point, pin_c0=None) -> AdjointConfig:
    """Fill in auto c0/c1 for the AD engine by probing at the initial point."""
    c0, c1 = cfg.c0, cfg.c1
    if cfg.engine == "AD" and (c0 is None or c1 is None):
        probe_c0 = pin_c0 if c0 is None else c0
        auto_c0, auto_c1 = auto_scales(
            oracle, init, DETERMINISTIC,
            neumann_q=cfg.neumann_q, fd_eps=cfg.fd_eps, c0=probe_c0,
        )
        c0 = c0 if c0 is not None else auto_c0
        c1 = c1 if c1 is not None else auto_c1
        _log(f"auto scales: c0={c0:.6g} c1={c1:.6g}")
    return AdjointConfig(
        engine=cfg.engine, fd_eps=cfg.fd_eps, cg_tol=cfg.cg_tol,
        cg_max_iters=cfg.cg_max_iters, neumann_q=cfg.neumann_q, c0=c0, c1=c1,
    )


# ---------------------------------------------------------------------------
# running and aggregation


@dataclass
class AggregateResult:
    iterations: np.ndarray
    mean_f1: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    mean_wall_s: np.ndarray
    time_buckets: np.ndarray
    time_mean_f1: np.ndarray
    time_ci_lo: np.ndarray
    time_ci_hi: np.ndarray
    traces: list


def _ci_half(values: np.ndarray) -> float:
    """95% half-width via the t-distribution over repetitions."""
    n = values.size
    if n < 2:
        return 0.0
    sem = values.std(ddof=1) / math.sqrt(n)
    if sem == 0.0:
        return 0.0
    return float(stats.t.ppf(0.975, n - 1) * sem)


def aggregate(traces: list) -> AggregateResult:
    n_iters = min(len(t.records) for t in traces)
    iters = np.arange(1, n_iters + 1)
    f1 = np.array([[t.records[i].f1 for t in traces] for i in range(n_iters)])
    wall = np.array([[t.records[i].wall_s for t in traces] for i in range(n_iters)])
    half = np.array([_ci_half(row) for row in f1])
    mean = f1.mean(axis=1)

    # per-wall-time buckets: each run contributes its latest value by T
    max_wall = float(wall.max()) if wall.size else 0.0
    buckets = np.linspace(0.0, max_wall, num=min(50, max(2, n_iters)))
    tm, tlo, thi = [], [], []
    for T in buckets:
        latest = []
        for t in traces:
            vals = [r.f1 for r in t.records[:n_iters] if r.wall_s <= T]
            latest.append(vals[-1] if vals else t.records[0].f1)
        latest = np.array(latest)
        h = _ci_half(latest)
        tm.append(latest.mean())
        tlo.append(latest.mean() - h)
        thi.append(latest.mean() + h)

    return AggregateResult(
        iterations=iters,
        mean_f1=mean,
        ci_lo=mean - half,
        ci_hi=mean + half,
        mean_wall_s=wall.mean(axis=1),
        time_buckets=buckets,
        time_mean_f1=np.array(tm),
        time_ci_lo=np.array(tlo),
        time_ci_hi=np.array(thi),
        traces=traces,
    )


def _write_trace_csv(path, run_id: int, trace: RunTrace):
    with open(path, "w") as fh:
        fh.write("run_id," + ",".join(TRACE_COLUMNS) + "\n")
        for r in trace.records:
            cells = [str(run_id)] + [repr(v) for v in r.row()]
            fh.write(",".join(cells) + "\n")


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> AggregateResult:
    """Execute ``cfg.repetitions`` independent runs and write all outputs.

    Raises RuntimeError when any run aborts (partial traces are still
    written first).
    """
    task = _build_task(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.output_dir, "config.ini"))
    if task.spec is not None:
        save_spec(task.spec, os.path.join(cfg.output_dir, "spec.json"), seed=cfg.spec_seed)

    def one(rep: int) -> RunTrace:
        seed = cfg.base_seed + rep
        oracle = task.oracle_for(seed)
        samples = task.samples_for(seed)
        _log(f"run {rep}: seed={seed}")
        return run_bsg(
            cfg.reduction, oracle, task.init, task.schedule, task.budget,
            task.adjoint_cfg, samples=samples, keep_iterates=True,
        )

    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(one, range(cfg.repetitions)))
    else:
        traces = [one(rep) for rep in range(cfg.repetitions)]

    for rep, trace in enumerate(traces):
        _write_trace_csv(os.path.join(cfg.output_dir, f"run_{rep}.csv"), rep, trace)

    aborted = [(rep, t.aborted) for rep, t in enumerate(traces) if t.aborted]
    if aborted:
        raise RuntimeError(f"aborted runs: {aborted}")

    agg = aggregate(traces)
    with open(os.path.join(cfg.output_dir, "aggregate.csv"), "w") as fh:
        fh.write("iteration,mean_f1,ci_lo,ci_hi,mean_wall_s\n")
        for it, m, lo, hi, w in zip(agg.iterations, agg.mean_f1, agg.ci_lo, agg.ci_hi, agg.mean_wall_s):
            fh.write(f"{int(it)},{float(m)!r},{float(lo)!r},{float(hi)!r},{float(w)!r}\n")
    with open(os.path.join(cfg.output_dir, "aggregate_time.csv"), "w") as fh:
        fh.write("bucket_s,mean_f1,ci_lo,ci_hi\n")
        for b, m, lo, hi in zip(agg.time_buckets, agg.time_mean_f1, agg.time_ci_lo, agg.time_ci_hi):
            fh.write(f"{float(b)!r},{float(m)!r},{float(lo)!r},{float(hi)!r}\n")

    if task.test_eval is not None:
        with open(os.path.join(cfg.output_dir, "noisy_test.csv"), "w") as fh:
            fh.write("run_id,realization,mse\n")
            for rep, trace in enumerate(traces):
                values = task.test_eval(trace, rep)
                for k, v in enumerate(values):
                    fh.write(f"{rep},{k},{float(v)!r}\n")

    return agg


# ---------------------------------------------------------------------------
# verify subcommand


def verify_checks(cfg: ExperimentConfig) -> list[tuple[str, float, float, bool]]:
    """Desk-scale referee suite. Returns (name, value, tolerance, ok) rows."""
    checks = []

    # quadratic: engines plus closed-form FD referee must coincide
    n = min(cfg.n, 10)
    spec = default_quadratic(n, n, n, rng=cfg.spec_seed)
    oracle = make_oracle(spec)
    x = default_init_point(spec, rng=cfg.spec_seed + 1).x
    point = closed_form_point(spec, x)
    c0, c1 = auto_scales(oracle, point, neumann_q=cfg.neumann_q, fd_eps=cfg.fd_eps)
    cfgs = [
        AdjointConfig(engine="H"),
        AdjointConfig(engine="NFD", fd_eps=cfg.fd_eps, cg_tol=cfg.cg_tol),
        AdjointConfig(engine="AD", fd_eps=cfg.fd_eps, neumann_q=max(cfg.neumann_q, 40), c0=c0, c1=c1),
    ]
    fd_ref = fd_grad_f(oracle, x, FdOracleConfig(use_closed_form=True), spec=spec)
    report = engine_agreement_report(oracle, point, cfgs, labels=["H", "NFD", "AD"], fd_reference=fd_ref)
    print("quadratic agreement (relative l2):")
    print(report.render_text())
    checks.append(("quadratic_pairwise_max", report.max_error(), 1e-5, report.max_error() <= 1e-5))

    # FD referee self-consistency (second-order scheme)
    g_coarse = fd_grad_f(oracle, x, FdOracleConfig(outer_eps=2e-4, use_closed_form=True), spec=spec)
    g_fine = fd_grad_f(oracle, x, FdOracleConfig(outer_eps=1e-4, use_closed_form=True), spec=spec)
    delta = float(np.max(np.abs(g_coarse - g_fine)))
    checks.append(("fd_referee_consistency", delta, 1e-6, delta <= 1e-6))

    # quartic: H must match the descent-based referee; NFD within the
    # finite-difference error budget at the configured eps
    qspec = default_quartic(5, 5, 1, rng=cfg.spec_seed)
    qoracle = make_oracle(qspec)
    qinit = default_init_point(qspec, rng=3)
    qpoint = closed_form_point(qspec, qinit.x)
    qfd = fd_grad_f(qoracle, qinit.x, FdOracleConfig(), warm=qinit)
    qc0, qc1 = auto_scales(qoracle, qpoint, neumann_q=max(cfg.neumann_q, 40), fd_eps=cfg.fd_eps)
    qcfgs = [
        AdjointConfig(engine="H"),
        AdjointConfig(engine="NFD", fd_eps=cfg.fd_eps, cg_tol=cfg.cg_tol),
        AdjointConfig(engine="AD", fd_eps=cfg.fd_eps, neumann_q=max(cfg.neumann_q, 40), c0=qc0, c1=qc1),
    ]
    qreport = engine_agreement_report(qoracle, qpoint, qcfgs, labels=["H", "NFD", "AD"], fd_reference=qfd)
    print("quartic agreement (relative l2):")
    print(qreport.render_text())
    checks.append(("quartic_h_vs_fd", qreport.pair_error("H", "FD"), 5e-4,
                   qreport.pair_error("H", "FD") <= 5e-4))
    checks.append(("quartic_pairwise_max", qreport.max_error(), 0.08,
                   qreport.max_error() <= 0.08))
    return checks


def _cmd_verify(cfg: ExperimentConfig) -> int:
    checks = verify_checks(cfg)
    failed = False
    for name, value, tol, ok in checks:
        status = "ok" if ok else "FAIL"
        print(f"{status:>4}  {name:<28} {value:.3e} (tol {tol:.1e})")
        failed = failed or not ok
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# grid search


def _cmd_grid_search(cfg: ExperimentConfig, jobs: int) -> int:
    grid = (0.1, 0.01, 0.001)
    rows = []
    for ab in grid:
        for bb in grid:
            for gb in grid:
                sub = replace(
                    cfg, alpha_bar=ab, beta_bar=bb, gamma_bar=gb,
                    schedule="decaying", repetitions=1,
                    output_dir=os.path.join(cfg.output_dir, f"grid_{ab}_{bb}_{gb}"),
                )
                try:
                    agg = run_experiment(sub, jobs=jobs)
                    final = float(agg.mean_f1[-1])
                except RuntimeError:
                    final = float("nan")
                rows.append((ab, bb, gb, final))
                _log(f"grid ({ab}, {bb}, {gb}) -> {final}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "grid.csv"), "w") as fh:
        fh.write("alpha_bar,beta_bar,gamma_bar,final_f1\n")
        for row in rows:
            fh.write(",".join(repr(v) for v in row) + "\n")
    valid = [r for r in rows if math.isfinite(r[3])]
    if not valid:
        print("grid search: no run finished")
        return 1
    best = min(valid, key=lambda r: r[3])
    print(f"best: alpha_bar={best[0]} beta_bar={best[1]} gamma_bar={best[2]} final_f1={best[3]:.6g}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="trilevel", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("run", "verify", "grid-search"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "verify"), help="INI config path")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override base_seed")
        p.add_argument("--out", default=None, help="override output_dir")

    p = sub.add_parser("split-info")
    p.add_argument("csv")
    p.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "split-info":
        ds = ah.load_csv(args.csv)
        splits = ah.split_dataset(ds, ah.SplitSpec(seed=args.seed))
        print(f"rows={ds.n_rows} features={ds.n_features}")
        print(f"train={splits.train.size} val={splits.val.size} test={splits.test.size}")
        return 0

    if args.config:
        try:
            cfg = load_config(args.config)
        except (OSError, ValueError, configparser.Error) as err:
            print(f"config error: {err}", file=sys.stderr)
            return 2
    else:
        cfg = ExperimentConfig(n=10, m=10, t=10)
    if args.seed is not None:
        cfg.base_seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out

    if args.command == "verify":
        return _cmd_verify(cfg)
    if args.command == "grid-search":
        return _cmd_grid_search(cfg, args.jobs)

    try:
        run_experiment(cfg, jobs=args.jobs)
    except RuntimeError as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
