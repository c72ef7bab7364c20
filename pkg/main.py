#!/usr/bin/env python3
"""
EVCS Control Testbed
Synthetic data, trace ingestion, behavior-model training, closed-loop
simulation and α-sweeps for charging-station controllers
"""

import argparse
import json
import os
import sys

import pandas as pd

from config import OUTPUT_DIR, POLICY_NAMES, SEED, TIMEZONE, load_experiment_config, split_seed, validate_config
from evcs_model import DomainError


def _overrides(args):
    return {
        "policy_seeds": [args.seed] if args.seed is not None else None,
        "output_dir": args.out,
        "policies": [args.policy] if args.policy else None,
        "alphas": [args.alpha] if args.alpha is not None else None,
        "horizon": args.horizon,
    }


def _experiment(args, require_data=False):
    """Experiment document with CLI overrides; data paths only checked when the command needs them"""
    return load_experiment_config(args.config, _overrides(args), require_data=require_data)


def cmd_synth(args):
    """Draw a synthetic world and write its sessions and trace"""
    from data_service import SyntheticConfig, discretize_synthetic, generate_synthetic, write_sessions_csv, write_trace

    experiment = _experiment(args)
    generator = SyntheticConfig.from_dict(experiment.synthetic)
    station = experiment.station_config(n=generator.n_slots)
    seed = split_seed(args.seed if args.seed is not None else SEED, "world", "synth")
    out = args.out or OUTPUT_DIR

    sessions, _ = generate_synthetic(generator, seed)
    trace = discretize_synthetic(sessions, generator, station)
    write_sessions_csv(sessions, os.path.join(out, "synthetic_sessions.csv"))
    write_trace(trace, os.path.join(out, "synthetic_trace.csv"))
    print(f"✅ {len(sessions)} synthetic sessions over {generator.days} days written to {out}")


def cmd_ingest(args):
    """Parse, discretize, preprocess and optionally split a session export"""
    from data_service import discretize, parse_sessions, preprocess_requests, split, write_trace

    experiment = _experiment(args)
    parsed = parse_sessions(args.input, fmt=args.format, timezone=args.timezone)
    slot_ids = sorted({s.slot_id for s in parsed.sessions})
    station = experiment.station_config(n=len(slot_ids) or None)
    trace = preprocess_requests(discretize(parsed.sessions, station.dt_minutes, station, slot_ids=slot_ids), station)
    out = args.out or OUTPUT_DIR

    if args.split:
        train, test = split(trace, pd.Timestamp(args.split, tz=args.timezone))
        write_trace(train, os.path.join(out, "train_trace.csv"))
        write_trace(test, os.path.join(out, "test_trace.csv"))
        print(f"✅ Split at {args.split}: {len(train.sessions)} train / {len(test.sessions)} test sessions")
    else:
        write_trace(trace, os.path.join(out, "trace.csv"))
        print(f"✅ {len(trace.sessions)} sessions over {trace.n_steps} steps written to {out}")
    if parsed.errors:
        print(f"⚠️ {len(parsed.errors)} malformed row(s) skipped")


def cmd_train(args):
    from behavior_service import fit, save_model
    from data_service import read_trace

    model = fit(read_trace(args.trace))
    save_model(model, os.path.join(args.out or OUTPUT_DIR, "behavior_model.json"))


def cmd_simulate(args):
    """One policy over one trace"""
    from behavior_service import load_model
    from data_service import read_trace
    from policy_workflow import build_avg_load_table, make_policy
    from simulation_service import compute_metrics, simulate

    experiment = _experiment(args)
    policy_name = args.policy or "mpc"
    trace = read_trace(args.trace)
    station = experiment.station_config(args.alpha, n=trace.n)
    seed = args.seed if args.seed is not None else SEED

    model = table = None
    if policy_name in ("2s", "mpc"):
        if not args.model:
            raise DomainError(f"--model is required for {policy_name}")
        model = load_model(args.model)
    if policy_name == "rmpc":
        if not args.train_trace:
            raise DomainError("--train-trace is required for rmpc")
        table = build_avg_load_table(read_trace(args.train_trace), station, seed=seed, **experiment.solver)

    policy = make_policy(policy_name, station, model=model, table=table, trace=trace, K=experiment.samples_K,
                         K_prime=experiment.clusters_K_prime, seed=seed, max_workers=experiment.max_workers,
                         **experiment.solver)
    out = args.out or OUTPUT_DIR
    log_path = os.path.join(out, f"{policy_name}_a{station.alpha:g}_p{seed}_steps.jsonl")
    result = simulate(trace, policy, station, seed=seed, log_path=log_path,
                      header={"config_hash": experiment.config_hash(), "policy": policy_name,
                              "alpha": station.alpha, "policy_seed": seed})
    metrics = compute_metrics(result)

    with open(os.path.join(out, f"{policy_name}_a{station.alpha:g}_p{seed}_metrics.json"), "w") as f:
        json.dump({"policy": policy_name, "alpha": station.alpha, "seed": seed, **metrics.as_row()}, f,
                  indent=1, sort_keys=True)

    print("📊 RUN METRICS")
    print(f"   Electricity cost: {metrics.electricity_cost_eur:.2f} EUR")
    if metrics.filling_rate_pct is None:
        print("   Filling rate: n/a (no sessions)")
    else:
        print(f"   Filling rate: {metrics.filling_rate_pct:.1f}%")
        print(f"   Full satisfaction: {metrics.full_satisfaction_rate_pct:.1f}%")
    print(f"   Penalty steps: {metrics.penalty_step_count}")
    print(f"   Mean decision time: {metrics.mean_solve_ms:.0f} ms")


def cmd_sweep(args):
    from sweep_workflow import run_sweep

    final_state = run_sweep(_experiment(args, require_data=True))
    if final_state.get("error"):
        raise RuntimeError(f"sweep failed during {final_state['stage']}: {final_state['error']}")


def build_parser():
    parser = argparse.ArgumentParser(prog="evcs", description="EVCS control testbed")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment document")
    common.add_argument("--seed", type=int, help="seed (policy stream; world stream for synth)")
    common.add_argument("--out", help=f"output directory (default {OUTPUT_DIR})")
    common.add_argument("--policy", choices=POLICY_NAMES)
    common.add_argument("--alpha", type=float, help="dissatisfaction weight α")
    common.add_argument("--horizon", type=int, help="control horizon R in steps")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    ingest = commands.add_parser("ingest", parents=[common], help="parse, discretize, preprocess and split")
    ingest.add_argument("--input", required=True, help="session export (CSV or ACN JSON)")
    ingest.add_argument("--format", choices=("csv", "acn-json"), default="csv")
    ingest.add_argument("--timezone", default=TIMEZONE)
    ingest.add_argument("--split", help="midnight boundary date YYYY-MM-DD")

    train = commands.add_parser("train", parents=[common], help="fit the behavior model")
    train.add_argument("--trace", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="one policy, one trace")
    simulate.add_argument("--trace", required=True, help="test trace")
    simulate.add_argument("--model", help="behavior model JSON (2s, mpc)")
    simulate.add_argument("--train-trace", help="training trace for the R-MPC load table")

    commands.add_parser("sweep", parents=[common], help="full α-sweep experiment")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def main(argv=None):
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    if not validate_config():
        print("ERROR code=ConfigError message=invalid environment settings", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args)
    except Exception as e:
        message = " ".join(str(e).split())
        print(f"ERROR code={type(e).__name__} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
