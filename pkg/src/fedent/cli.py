"""Command-line entry point: ``fedent {precompute,run,inspect-partition,estimate-bounds}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric
non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import label_histograms
from .engine import TRAJECTORY_ALGORITHMS, initial_params, make_clients, precompute, run_experiment
from .meanfield import MeanFieldTrajectory
from .models import Batch, estimate_bounds
from .numerics import Stream, rng_stream

METRIC_COLUMNS = ("round", "algorithm", "seed", "train_loss", "test_accuracy", "mean_eta", "entropy",
                  "max_drift", "drift_bound", "eta_bound_violations")
EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2


class CLIError(Exception):
    pass


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path: Path, histories) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for h in histories:
            for r in h.records:
                w.writerow([r.round, h.algorithm, h.seed] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS[3:]])


def _load(args) -> cfgmod.ExperimentFile:
    exp = cfgmod.load(args.config)
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    if args.output is not None:
        exp = exp.with_output(args.output)
    return exp


def cmd_precompute(exp: cfgmod.ExperimentFile) -> int:
    wanted = [a for a in exp.algorithms if a in TRAJECTORY_ALGORITHMS]
    if not wanted:
        raise CLIError("precompute needs fedent or fednorm among the configured algorithms")
    train, _ = cfgmod.load_datasets(exp)
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for algo in wanted:
        traj = precompute(exp.config_for(algo), train)
        path = exp.trajectory_path(algo)
        path.parent.mkdir(parents=True, exist_ok=True)
        traj.save(path)
        print(f"{algo}: K={traj.outer_iterations} converged={str(traj.converged).lower()} "
              f"gap_phi1={traj.gaps[0]:.3e} gap_phi2={traj.gaps[1]:.3e} -> {path}")
        if not traj.converged:
            status = EXIT_NONCONVERGED
    return status


def cmd_run(exp: cfgmod.ExperimentFile) -> int:
    trajectories = {}
    for algo in exp.algorithms:
        if algo in TRAJECTORY_ALGORITHMS:
            path = exp.trajectory_path(algo)
            if not path.exists():
                raise CLIError(f"{algo} needs a trajectory at {path}; run 'fedent precompute' first")
            trajectories[algo] = MeanFieldTrajectory.load(path, exp.training.beta)
    train, test = cfgmod.load_datasets(exp)
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    histories, summary = [], {"seed": exp.training.seed, "rounds": exp.training.T, "algorithms": {}}
    for algo in exp.algorithms:
        started = time.perf_counter()
        h = run_experiment(exp.config_for(algo), train, test, trajectories.get(algo))
        histories.append(h)
        summary["algorithms"][algo] = {
            "final_test_accuracy": h.final_accuracy,
            "final_train_loss": h.records[-1].train_loss,
            "eta_bound_violations": int(h.column("eta_bound_violations").sum()),
            "eta_clamps": int(h.column("eta_clamps").sum()),
            "runtime_s": round(time.perf_counter() - started, 3),
        }
        print(f"{algo}: final test accuracy {h.final_accuracy:.4f}")
    write_metrics(exp.output_dir / "metrics.csv", histories)
    (exp.output_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_inspect_partition(exp: cfgmod.ExperimentFile) -> int:
    train, _ = cfgmod.load_datasets(exp)
    clients = make_clients(train, exp.training)
    hist = label_histograms(train, [c.partition for c in clients])
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    path = exp.output_dir / "partition.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("client_id", "class", "count"))
        for cid, row in enumerate(hist):
            for cls, count in enumerate(row):
                w.writerow((cid, cls, int(count)))
    print(f"{len(clients)} clients, {int(hist.sum())} examples -> {path}")
    return EXIT_OK


def cmd_estimate_bounds(exp: cfgmod.ExperimentFile) -> int:
    """Probe D and L around the initial parameters and any stored trajectory."""
    train, _ = cfgmod.load_datasets(exp)
    spec = exp.training.model
    anchors = [initial_params(exp.training)]
    for algo in exp.algorithms:
        path = exp.trajectory_path(algo)
        if algo in TRAJECTORY_ALGORITHMS and path.exists():
            anchors.extend(MeanFieldTrajectory.load(path).phi1)
    seed = exp.training.seed
    est = estimate_bounds(spec, train.examples, exp.bound_trials, exp.bound_radius,
                          rng_stream(seed, Stream.PROBE), anchors=anchors)
    per_client = [
        estimate_bounds(spec, Batch(*c.data), exp.bound_trials, exp.bound_radius,
                        rng_stream(seed, Stream.PROBE, c.client_id), anchors=anchors)
        for c in make_clients(train, exp.training)
    ]
    result = {
        "D_hat": est.D_hat, "L_hat": est.L_hat, "trials": est.trials, "skipped": est.skipped,
        "D_hat_client_max": max(e.D_hat for e in per_client),
        "L_hat_client_max": max(e.L_hat for e in per_client),
        "anchors": len(anchors),
    }
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    path = exp.output_dir / "bounds.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"D_hat={est.D_hat:.6g} L_hat={est.L_hat:.6g} "
          f"(client max D={result['D_hat_client_max']:.6g}, L={result['L_hat_client_max']:.6g}) -> {path}")
    return EXIT_OK


COMMANDS = {
    "precompute": cmd_precompute,
    "run": cmd_run,
    "inspect-partition": cmd_inspect_partition,
    "estimate-bounds": cmd_estimate_bounds,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedent", description="Entropy-adaptive federated learning lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, type=Path, help="experiment TOML file")
        p.add_argument("--seed", type=int, help="override [experiment].seed")
        p.add_argument("--output", type=Path, help="override [paths].output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](_load(args))
    except (ValueError, CLIError, OSError) as exc:
        print(f"fedent: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"fedent: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
