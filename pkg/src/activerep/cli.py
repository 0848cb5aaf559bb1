"""Command line: ``gen-truth``, ``run``, ``summarize`` and ``pendulum-demo``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, parse_config
from .evaluation import make_evaluator
from .learner import STREAMS, run_passive, run_target_agnostic, run_target_aware
from .model import TargetSpec, make_ground_truth, save_ground_truth
from .oracles import finetune_target
from .pendulum import DivergenceError, PendulumProblem, control_rollout, residual_f

__all__ = [
    "RESULT_COLUMNS",
    "SCHEMA_LINE",
    "build_environment",
    "build_target",
    "checkpoint_grid",
    "run_experiment",
    "read_results",
    "summarize",
    "main",
]

log = logging.getLogger("activerep")

SCHEMA_LINE = "# activerep-results v1"
RESULT_COLUMNS = ("scenario", "strategy", "seed", "epoch", "cumulative_budget", "test_mse",
                  "er", "sin_angle", "dis_similarity", "design_trace", "long_term_tasks")
STRATEGY_ORDER = ("aware", "agnostic", "passive")


def build_environment(cfg: ExperimentConfig, seed):
    if cfg.scenario == "pendulum":
        p = cfg.pendulum
        return PendulumProblem.create(seed, d_psi_x=p.d_psi_x, freq_scale=p.freq_scale, k=p.k,
                                      radius=p.radius,
                                      actual_target=np.array(p.actual_target, dtype=float))
    psi_x = "fourier" if cfg.scenario == "synthetic-fourier" else "identity"
    return make_ground_truth(cfg.dims, cfg.conditioning, cfg.kappa, psi_x=psi_x,
                             sigma=cfg.sigma, seed=seed, freq_scale=cfg.freq_scale)


def build_target(cfg: ExperimentConfig, env) -> TargetSpec:
    t = cfg.target
    if cfg.scenario == "pendulum":
        return env.target(t.n_target, t.dot_n_target)
    space = env.source_space
    if t.kind in ("weak", "strong"):
        _, _, Vt = np.linalg.svd(env.b_w_source)
        v = Vt[env.dims.k - 1] if t.kind == "weak" else Vt[0]
        return TargetSpec.single(space.embed(v)[0], t.n_target, t.dot_n_target)
    if t.kind == "vector":
        return TargetSpec.single(np.array(t.vector), t.n_target, t.dot_n_target)
    basis = space.one_hot_basis()
    m = basis.shape[0]
    return TargetSpec(basis, np.full(m, 1.0 / m), basis, t.n_target, t.dot_n_target)


def checkpoint_grid(budgets, refine=1):
    """Cumulative budgets with ``refine - 1`` geometric points inserted between neighbours."""
    budgets = [int(b) for b in budgets]
    if refine <= 1 or len(budgets) < 2:
        return budgets
    out = [budgets[0]]
    for lo, hi in zip(budgets[:-1], budgets[1:]):
        for i in range(1, refine):
            out.append(int(round(lo * (hi / lo) ** (i / refine))))
        out.append(hi)
    return sorted(set(out))


def _planned_grid(cfg):
    # used when the aware run is not part of the experiment
    total, out = cfg.budgets.n0, []
    for j in range(1, cfg.budgets.epochs + 1):
        total += cfg.budgets.n1(j)
        out.append(total)
    return out


def _rows(cfg, strategy, seed, learner):
    for label, _, snap in learner.trace.evaluations:
        yield {
            "scenario": cfg.scenario, "strategy": strategy, "seed": seed, "epoch": label,
            "cumulative_budget": snap.cumulative_budget, "test_mse": snap.test_mse,
            "er": snap.er, "sin_angle": snap.sin_angle, "dis_similarity": snap.dis_similarity,
            "design_trace": snap.design_trace, "long_term_tasks": snap.long_term_tasks,
        }


def run_seed(cfg: ExperimentConfig, seed, strategies=None):
    """All requested strategies for one seed; returns ``(rows, learners, failures)``."""
    strategies = strategies or cfg.strategies
    env = build_environment(cfg, seed)
    target = build_target(cfg, env)
    eval_seed = np.random.SeedSequence([int(seed), STREAMS["eval"]])
    n_test = 0 if cfg.scenario != "pendulum" else cfg.target.n_test
    lcfg = cfg.learner_config()
    rows, learners, failures = [], {}, []
    grid = None
    for strategy in [s for s in STRATEGY_ORDER if s in strategies]:
        evaluator = make_evaluator(env, target, eval_seed, n_test)
        try:
            if strategy == "aware":
                L = run_target_aware(env, target, cfg.budgets, lcfg, seed, evaluator)
                grid = [c for _, c, _ in L.trace.evaluations]
            else:
                base = grid if grid is not None else _planned_grid(cfg)
                points = checkpoint_grid(base, cfg.grid_refine)
                if strategy == "agnostic":
                    L = run_target_agnostic(env, cfg.budgets, lcfg, seed, points, evaluator)
                else:
                    L = run_passive(env, points, lcfg, seed, evaluator)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
            log.error("run failed: strategy=%s seed=%s: %s", strategy, seed, exc)
            failures.append((strategy, seed, repr(exc)))
            continue
        learners[strategy] = L
        rows.extend(_rows(cfg, strategy, seed, L))
    return rows, learners, failures, env, target


def _format(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_results(path, rows):
    rows = sorted(rows, key=lambda r: (r["scenario"], r["strategy"], int(r["seed"]),
                                       int(r["epoch"])))
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RESULT_COLUMNS)
        for r in rows:
            wr.writerow([_format(r[c]) for c in RESULT_COLUMNS])


def read_results(path):
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != SCHEMA_LINE:
            raise ValueError(f"{path}: unsupported results schema {first!r}")
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}: column mismatch {header}")
        rows = []
        for rec in rd:
            r = dict(zip(header, rec))
            for key in ("seed", "epoch", "cumulative_budget", "long_term_tasks"):
                r[key] = int(r[key])
            for key in ("test_mse", "er", "sin_angle", "dis_similarity", "design_trace"):
                r[key] = float(r[key])
            rows.append(r)
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir=None, seeds=None, strategies=None):
    """Run every (strategy, seed), write ``results.csv`` and ``summary.csv``."""
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("empty seed list")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for seed in seeds:
        r, _, f, _, _ = run_seed(cfg, seed, strategies)
        rows.extend(r)
        failures.extend(f)
    results = out / "results.csv"
    write_results(results, rows)
    table = summarize([results])
    write_summary(out / "summary.csv", table)
    if failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["strategy", "seed", "error"])
            wr.writerows(failures)
    return results, table


def _median_curve(rows):
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], []).append(r)
    curve = []
    for epoch in sorted(by_epoch):
        grp = by_epoch[epoch]
        mse = np.array([r["test_mse"] for r in grp])
        er = np.array([r["er"] for r in grp])
        curve.append({
            "epoch": epoch,
            "n": len(grp),
            "cumulative_budget": float(np.median([r["cumulative_budget"] for r in grp])),
            "test_mse_median": float(np.median(mse)),
            "test_mse_q25": float(np.quantile(mse, 0.25)),
            "test_mse_q75": float(np.quantile(mse, 0.75)),
            "er_median": float(np.median(er)),
            "sin_angle_median": float(np.median([r["sin_angle"] for r in grp])),
            "long_term_tasks_median": float(np.median([r["long_term_tasks"] for r in grp])),
        })
    return curve


def budget_ratio(al_curve, passive_curve):
    """Budget at which the AL median loss first reaches passive's final median loss,
    over passive's final budget; ``inf`` when it never does."""
    if not al_curve or not passive_curve:
        return math.nan
    final = passive_curve[-1]
    for point in al_curve:
        if point["test_mse_median"] <= final["test_mse_median"]:
            return point["cumulative_budget"] / final["cumulative_budget"]
    return math.inf


def summarize(paths):
    """Per (scenario, strategy, epoch) medians and quantiles plus budget ratios."""
    rows = []
    for p in paths:
        rows.extend(read_results(p))
    groups = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["strategy"]), []).append(r)
    table = []
    curves = {key: _median_curve(grp) for key, grp in sorted(groups.items())}
    for (scenario, strategy), curve in curves.items():
        passive = curves.get((scenario, "passive"))
        ratio = budget_ratio(curve, passive) if strategy != "passive" and passive else math.nan
        for point in curve:
            table.append({"scenario": scenario, "strategy": strategy, **point,
                          "budget_ratio": ratio})
    return table


SUMMARY_COLUMNS = ("scenario", "strategy", "epoch", "n", "cumulative_budget",
                   "test_mse_median", "test_mse_q25", "test_mse_q75", "er_median",
                   "sin_angle_median", "long_term_tasks_median", "budget_ratio")


def write_summary(dest, table):
    """Write the summary table to a path or an open text stream."""
    if hasattr(dest, "write"):
        wr = csv.writer(dest, lineterminator="\n")
        wr.writerow(SUMMARY_COLUMNS)
        for row in table:
            wr.writerow([_format(row[c]) for c in SUMMARY_COLUMNS])
        return
    with open(dest, "w", newline="") as fh:
        write_summary(fh, table)


def pendulum_demo(cfg: ExperimentConfig, out_dir, seeds=None, strategies=None):
    """Learned-model control error against the zero and true-residual baselines."""
    if cfg.scenario != "pendulum":
        cfg = replace(cfg, scenario="pendulum")
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    strategies = tuple(strategies or cfg.strategies)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.pendulum
    records = []
    for seed in seeds:
        _, learners, _, env, target = run_seed(cfg, seed, strategies)
        true_env = env.env_for(target.vectors[0])
        zero = control_rollout(true_env, None, p.kp, p.kd, p.horizon)
        exact = control_rollout(true_env, lambda X: residual_f(X, true_env), p.kp, p.kd,
                                p.horizon)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS["eval"]]))
        z_target = [env.sample(w, target.n_target, rng) for w in target.vectors]
        for strategy, L in sorted(learners.items()):
            head = finetune_target(L.b_x_final, z_target)
            try:
                err = control_rollout(true_env, env.predictor(L.b_x_final, head), p.kp, p.kd,
                                      p.horizon)
            except DivergenceError:
                err = math.inf
            records.append((strategy, seed, err, zero, exact))
    path = out / "pendulum_control.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["strategy", "seed", "control_error", "zero_model_error", "true_model_error"])
        for rec in sorted(records):
            wr.writerow([_format(v) for v in rec])
    return path, records


def _seeds(text):
    if text is None:
        return None
    return tuple(int(s) for s in text.split(",") if s.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(prog="activerep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-truth", "run", "pendulum-demo"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seeds", help="comma-separated list overriding the config")
        if name != "gen-truth":
            sp.add_argument("--strategy", action="append",
                            help="restrict to this strategy (repeatable)")
    sp = sub.add_parser("summarize")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "summarize":
            table = summarize(args.csv)
            write_summary(args.out or sys.stdout, table)
            return 0
        cfg = parse_config(args.config)
        seeds = _seeds(args.seeds)
        if seeds is not None and not seeds:
            raise ConfigError("empty seed list")
        out = args.out or cfg.output_dir
        if args.command == "gen-truth":
            if cfg.scenario == "pendulum":
                raise ConfigError("gen-truth applies to synthetic scenarios")
            Path(out).mkdir(parents=True, exist_ok=True)
            for seed in seeds or cfg.seeds:
                save_ground_truth(build_environment(cfg, seed), Path(out) / f"truth_seed{seed}")
            return 0
        if args.command == "run":
            results, table = run_experiment(cfg, out, seeds, args.strategy)
            for row in table:
                if row["epoch"] == max(r["epoch"] for r in table
                                       if r["strategy"] == row["strategy"]):
                    print(f"{row['strategy']:>9}  budget={row['cumulative_budget']:.0f}  "
                          f"test_mse={row['test_mse_median']:.4f}  "
                          f"ratio={row['budget_ratio']}")
            print(f"wrote {results}")
            return 0
        path, records = pendulum_demo(cfg, out, seeds, args.strategy)
        for strategy, seed, err, zero, exact in sorted(records):
            print(f"{strategy:>9} seed={seed} control_error={err:.4f} "
                  f"zero={zero:.4f} true={exact:.4f}")
        print(f"wrote {path}")
        return 0
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
