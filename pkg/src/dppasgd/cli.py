"""Command-line front end.

    dppasgd plan       --dataset data/adult.csv --label-col income ...
    dppasgd train      ... [--plan plan.json | --tau 10]
    dppasgd sweep      ... --axis {resource,privacy,tau-grid} --values ...
    dppasgd compare    ... --tau 10
    dppasgd gridsearch ... [--empirical]

Settings come from defaults, then ``--config FILE`` (a config or any output
manifest), then flags. Exit codes: 0 ok, 2 configuration or infeasible
budgets, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .experiment import (ExperimentConfig, dump_json, federation_manifest, manifest_header,
                         plan_for, problem_constants, run_jobs, train_seed, write_atomic)
from .planner import _largest_multiple, grid_points, grid_table, make_plan, planning_learning_rate, solve

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
ADULT_CATEGORICAL = ("workclass,education,marital-status,occupation,relationship,race,sex,native-country")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or manifest to start from")
    common.add_argument("--dataset")
    common.add_argument("--label-col", dest="label_col")
    common.add_argument("--categorical-cols", dest="categorical_cols", type=_names)
    common.add_argument("--feature-cols", dest="feature_cols", type=_names,
                        help="restrict features to these columns (default: all but label/excluded)")
    common.add_argument("--exclude-cols", dest="exclude_cols", type=_names)
    common.add_argument("--positive-label", dest="positive_label")
    common.add_argument("--partition", help="iid or attr:<column>")
    common.add_argument("--devices", type=int)
    common.add_argument("--kernel", choices=["logistic", "svm"])
    common.add_argument("--l2", type=float)
    common.add_argument("--clip", type=float)
    common.add_argument("--c1", type=float)
    common.add_argument("--c2", type=float)
    common.add_argument("--cth", type=float)
    common.add_argument("--eps", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--tau", type=int)
    common.add_argument("--iters", type=int)
    common.add_argument("--tau-max", dest="tau_max", type=int)
    common.add_argument("--lr", type=_floats, help="learning rate(s); several are tuned on validation")
    common.add_argument("--batch", type=int)
    common.add_argument("--seed", type=int, help="data seed (default $DP_PASGD_SEED or 0)")
    common.add_argument("--seeds", type=_ints, help="run seeds, e.g. 0-4 or 1,5,9")
    common.add_argument("--eval-every", dest="eval_every", type=int)
    common.add_argument("--probe-draws", dest="probe_draws", type=int)
    common.add_argument("--constants", help="JSON file with problem constants (skips estimation)")
    common.add_argument("--jobs", type=int)
    common.add_argument("--out")

    parser = argparse.ArgumentParser(prog="dppasgd", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", parents=[common], help="choose tau, K and noise for the budgets")
    p = sub.add_parser("train", parents=[common], help="train with a plan and write traces")
    p.add_argument("--plan", help="plan JSON from `dppasgd plan`")
    p = sub.add_parser("sweep", parents=[common], help="accuracy or tau over a budget axis")
    p.add_argument("--axis", choices=["resource", "privacy", "tau-grid"], required=True)
    p.add_argument("--values", type=_floats)
    p.add_argument("--cth-values", dest="cth_values", type=_floats)
    p.add_argument("--eps-values", dest="eps_values", type=_floats)
    sub.add_parser("compare", parents=[common], help="DP-PASGD against DP-SGD on equal budgets")
    p = sub.add_parser("gridsearch", parents=[common], help="exhaustive (tau, K) search")
    p.add_argument("--tau-range", dest="tau_range", type=_ints)
    p.add_argument("--empirical", action="store_true", default=None,
                   help="score grid points by validation accuracy instead of the bound")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    data = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if data.get("constants"):
        with open(data["constants"], encoding="utf-8") as fh:
            loaded = json.load(fh)
        data["constants"] = loaded.get("constants", loaded)
    return data


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _plan_summary(plan, budgets) -> str:
    lines = [
        f"  aggregation period tau : {plan.tau}",
        f"  iterations K           : {plan.K}",
        f"  learning rate (bound)  : {plan.eta:.6g}",
        f"  noise sigma (min/max)  : {min(plan.sigma):.6g} / {max(plan.sigma):.6g}",
        f"  predicted bound F      : {plan.predicted_F:.6g}",
        f"  resource cost          : {plan.cost:g} of {budgets.C_th:g}",
        f"  epsilon per device     : {max(plan.epsilons):.6g} of {budgets.epsilon_th:g}",
    ]
    lines += [f"  {name:<23}: {'ok' if ok else 'VIOLATED'}" for name, ok in plan.feasibility.items()]
    return "\n".join(lines)


def _partition_info(cfg):
    return federation_manifest(cfg) if cfg.dataset else None


def cmd_plan(cfg: ExperimentConfig) -> int:
    constants = problem_constants(cfg)
    plan = plan_for(cfg, constants)
    out = Path(cfg.out)
    manifest = manifest_header(cfg, "plan")
    manifest.update(constants=constants.to_dict(), budgets=cfg.budgets().to_dict(),
                    plan=plan.to_dict(), partition=_partition_info(cfg))
    write_atomic(out / "plan.json", dump_json(manifest))
    print("plan:")
    print(_plan_summary(plan, cfg.budgets()))
    print(f"wrote {out / 'plan.json'}")
    return EXIT_OK


def _run_record(res) -> dict:
    return {
        "seed": res.seed,
        "eta": res.eta,
        "validation_accuracy": res.val_accuracy,
        "final_test_accuracy": res.final_accuracy,
        "star_iteration": res.trace.star_iteration if res.trace else None,
        "learning_rate_scores": res.tried,
        "error": res.error,
    }


def _summary_rows(results):
    traces = [r.trace for r in results if r.error is None]
    if not traces:
        return []
    rows = []
    for i, row in enumerate(traces[0].rows):
        acc = [t.rows[i]["mean_test_accuracy"] for t in traces]
        loss = [t.rows[i]["global_loss"] for t in traces]
        rows.append([row["iteration"], float(np.mean(loss)), float(np.std(loss)),
                     float(np.mean(acc)), float(np.std(acc)), row["cumulative_cost"], row["epsilon_spent"]])
    return rows


SUMMARY_HEADER = ("iteration", "mean_global_loss", "std_global_loss", "mean_test_accuracy",
                  "std_test_accuracy", "cumulative_cost", "epsilon_spent")


def cmd_train(cfg: ExperimentConfig) -> int:
    constants = problem_constants(cfg)
    plan = plan_for(cfg, constants)
    out = Path(cfg.out)
    results = run_jobs(cfg, train_seed, [(plan.tau, plan.K, plan.sigma, s) for s in cfg.seeds])
    for res in results:
        if res.trace is not None and res.trace.rows:
            write_atomic(out / f"trace_seed{res.seed}.csv", res.trace.to_csv())
    write_atomic(out / "summary.csv", _csv(SUMMARY_HEADER, _summary_rows(results)))
    manifest = manifest_header(cfg, "train")
    manifest.update(constants=constants.to_dict(), budgets=cfg.budgets().to_dict(),
                    plan=plan.to_dict(), partition=_partition_info(cfg),
                    runs=[_run_record(r) for r in results])
    write_atomic(out / "manifest.json", dump_json(manifest))
    finals = [r.final_accuracy for r in results if r.error is None]
    print(f"tau={plan.tau} K={plan.K}: final mean test accuracy "
          f"{np.mean(finals):.4f} +/- {np.std(finals):.4f} over {len(finals)} seed(s)" if finals
          else "all runs diverged")
    return EXIT_DIVERGED if any(r.error for r in results) else EXIT_OK


def _budget_job(cfg: ExperimentConfig, cth: float, eps: float, seed: int):
    point = replace(cfg, cth=cth, eps=eps)
    constants = problem_constants(point)
    plan = solve(constants, point.budgets(), tau_max=point.tau_max)
    return plan, train_seed(point, plan.tau, plan.K, plan.sigma, seed)


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    manifest = manifest_header(cfg, "sweep")
    if cfg.axis == "tau-grid":
        constants = problem_constants(cfg)
        rows = []
        for cth in cfg.cth_values or [200, 400, 600, 800, 1000]:
            for eps in cfg.eps_values or [1, 2, 4, 6, 8, 10]:
                try:
                    plan = solve(constants, replace(cfg, cth=cth, eps=eps).budgets(), tau_max=cfg.tau_max)
                    rows.append([cth, eps, plan.tau, plan.K, plan.predicted_F, ""])
                except ConfigurationError as exc:
                    rows.append([cth, eps, "", "", "", str(exc)])
        write_atomic(out / "tau_grid.csv", _csv(("cth", "eps", "tau", "K", "predicted_F", "error"), rows))
        manifest.update(constants=constants.to_dict())
        write_atomic(out / "manifest.json", dump_json(manifest))
        print(_csv(("cth", "eps", "tau", "K", "predicted_F", "error"), rows), end="")
        return EXIT_OK

    if not cfg.values:
        raise ConfigurationError("--values is required for resource/privacy sweeps")
    if list(cfg.values) != sorted(cfg.values):
        raise ConfigurationError("--values must be sorted ascending")
    points = [(v, cfg.eps) if cfg.axis == "resource" else (cfg.cth, v) for v in cfg.values]
    jobs = [(cth, eps, s) for cth, eps in points for s in cfg.seeds]
    results = run_jobs(cfg, _safe_budget_job, jobs)
    rows, records = [], []
    for (cth, eps), value in zip(points, cfg.values):
        chunk = [r for j, r in zip(jobs, results) if j[:2] == (cth, eps)]
        errors = [r for r in chunk if isinstance(r, str)]
        if errors:
            rows.append([value, "", "", "", "", errors[0]])
            continue
        plan = chunk[0][0]
        accs = [res.final_accuracy for _, res in chunk if res.error is None]
        rows.append([value, plan.tau, plan.K, float(np.mean(accs)) if accs else math.nan,
                     float(np.std(accs)) if accs else math.nan, ""])
        records.append({"budget": value, "plan": plan.to_dict(), "runs": [_run_record(r) for _, r in chunk]})
    header = ("budget", "tau", "K", "mean_acc", "std_acc", "error")
    write_atomic(out / f"sweep_{cfg.axis}.csv", _csv(header, rows))
    manifest.update(points=records, partition=_partition_info(cfg))
    write_atomic(out / "manifest.json", dump_json(manifest))
    print(_csv(header, rows), end="")
    return EXIT_OK


def _safe_budget_job(cfg, cth, eps, seed):
    try:
        return _budget_job(cfg, cth, eps, seed)
    except ConfigurationError as exc:
        return str(exc)


def cmd_compare(cfg: ExperimentConfig) -> int:
    constants = problem_constants(cfg)
    budgets = cfg.budgets()
    budgets.check_feasible()
    tau = cfg.tau or 10
    schemes = []
    for name, t in (("dp-pasgd", tau), ("dp-sgd", 1)):
        K = _largest_multiple(10**12, t, budgets)
        if K < 1:
            raise ConfigurationError(f"{name}: tau = {t} does not fit one round in the budget")
        schemes.append((name, make_plan(constants, budgets, t, K, planning_learning_rate(constants, t))))
    jobs = [(p.tau, p.K, p.sigma, s) for _, p in schemes for s in cfg.seeds]
    results = run_jobs(cfg, train_seed, jobs)
    by_scheme = {name: results[i * len(cfg.seeds):(i + 1) * len(cfg.seeds)]
                 for i, (name, _) in enumerate(schemes)}
    rows = []
    for name, res_list in by_scheme.items():
        for res in res_list:
            for row in (res.trace.rows if res.trace else []):
                rows.append([name, res.seed, row["iteration"], row["global_loss"], row["mean_test_accuracy"],
                             row["cumulative_cost"], row["epsilon_spent"]])
    header = ("scheme", "seed", "iteration", "global_loss", "mean_test_accuracy",
              "cumulative_cost", "epsilon_spent")
    out = Path(cfg.out)
    write_atomic(out / "compare.csv", _csv(header, rows))
    summary = []
    for a, b in zip(by_scheme["dp-pasgd"], by_scheme["dp-sgd"]):
        summary.append([a.seed, a.final_accuracy, b.final_accuracy, a.eta, b.eta])
    write_atomic(out / "compare_summary.csv",
                 _csv(("seed", "dp_pasgd_accuracy", "dp_sgd_accuracy", "dp_pasgd_eta", "dp_sgd_eta"), summary))
    manifest = manifest_header(cfg, "compare")
    manifest.update(constants=constants.to_dict(), budgets=budgets.to_dict(),
                    schemes={name: p.to_dict() for name, p in schemes}, partition=_partition_info(cfg),
                    runs={name: [_run_record(r) for r in rs] for name, rs in by_scheme.items()})
    write_atomic(out / "manifest.json", dump_json(manifest))
    for seed, a, b, _, _ in summary:
        print(f"seed {seed}: DP-PASGD(tau={tau}) {a:.4f}  DP-SGD {b:.4f}")
    return EXIT_DIVERGED if any(r.error for r in results) else EXIT_OK


def _grid_job(cfg, tau, K, sigma, seed):
    return train_seed(cfg, tau, K, sigma, seed)


def cmd_gridsearch(cfg: ExperimentConfig) -> int:
    constants = problem_constants(cfg)
    budgets = cfg.budgets()
    out = Path(cfg.out)
    manifest = manifest_header(cfg, "gridsearch")
    if not cfg.empirical:
        tau_range = cfg.tau_range or list(range(1, cfg.tau_max + 1))
        table = grid_table(constants, budgets, tau_range)
        best = min(table, key=lambda r: r["predicted_F"])
        planned = solve(constants, budgets, tau_max=max(tau_range))
        header = ("tau", "K", "eta", "predicted_F")
        write_atomic(out / "gridsearch.csv", _csv(header, [[r[h] for h in header] for r in table]))
        manifest.update(constants=constants.to_dict(), best=best, solver=planned.to_dict(),
                        solver_over_grid=planned.predicted_F / best["predicted_F"])
        write_atomic(out / "manifest.json", dump_json(manifest))
        print(f"grid best tau={best['tau']} K={best['K']} F={best['predicted_F']:.6g}; "
              f"solver tau={planned.tau} K={planned.K} F={planned.predicted_F:.6g}")
        return EXIT_OK

    tau_range = cfg.tau_range or list(range(1, 21))
    points = grid_points(budgets, tau_range)
    eta = planning_learning_rate(constants, max(tau_range))
    plans = {(t, k): make_plan(constants, budgets, t, k, eta) for t, k in points}
    jobs = [(t, k, plans[(t, k)].sigma, s) for t, k in points for s in cfg.seeds]
    results = run_jobs(cfg, _grid_job, jobs)
    rows = []
    n = len(cfg.seeds)
    for i, (t, k) in enumerate(points):
        chunk = [r for r in results[i * n:(i + 1) * n] if r.error is None]
        val = [r.val_accuracy for r in chunk]
        test = [r.final_accuracy for r in chunk]
        rows.append([t, k, float(np.mean(val)) if val else math.nan,
                     float(np.mean(test)) if test else math.nan, float(np.std(test)) if test else math.nan])
    header = ("tau", "K", "mean_val_accuracy", "mean_test_accuracy", "std_test_accuracy")
    write_atomic(out / "gridsearch_empirical.csv", _csv(header, rows))
    best = max(rows, key=lambda r: (r[2], -r[0], -r[1]))
    per_tau = {}
    for r in rows:
        if r[0] not in per_tau or r[3] > per_tau[r[0]][3]:
            per_tau[r[0]] = r
    manifest.update(constants=constants.to_dict(),
                    best={"tau": best[0], "K": best[1], "mean_val_accuracy": best[2], "mean_test_accuracy": best[3]},
                    best_per_tau={str(t): {"K": r[1], "mean_test_accuracy": r[3]} for t, r in per_tau.items()},
                    partition=_partition_info(cfg))
    write_atomic(out / "manifest.json", dump_json(manifest))
    print(f"best tau={best[0]} K={best[1]} validation accuracy {best[2]:.4f}")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "train": cmd_train, "sweep": cmd_sweep,
            "compare": cmd_compare, "gridsearch": cmd_gridsearch}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_sources(args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
