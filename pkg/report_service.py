#!/usr/bin/env python3
"""
Report Service
Sweep table rows, relative differences against the oracle controller, and
the report files behind the cost/satisfaction plots
"""

import os
from datetime import datetime
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from evcs_model import ConfigError

REFERENCE_POLICY = "pmpc"
UNSERVED_BINS = 10

ROW_COLUMNS = [
    "policy", "alpha", "world_seed", "policy_seed", "status",
    "electricity_cost_eur", "filling_rate_pct", "full_satisfaction_rate_pct", "penalty_step_count",
    "sessions", "realized_objective_eur", "delivered_kwh",
    "cost_rel_pmpc_pct", "filling_rel_pmpc_pct", "full_satisfaction_rel_pmpc_pct", "error",
]
RELATIVE_COLUMNS = {
    "electricity_cost_eur": "cost_rel_pmpc_pct",
    "filling_rate_pct": "filling_rel_pmpc_pct",
    "full_satisfaction_rate_pct": "full_satisfaction_rel_pmpc_pct",
}
SESSION_COLUMNS = [
    "policy", "alpha", "world_seed", "policy_seed", "slot", "start_step", "end_step",
    "initial_request_kwh", "final_remaining_kwh", "unserved_share",
]
HISTOGRAM_COLUMNS = ["policy", "alpha", "world_seed", "policy_seed", "bin_low", "bin_high", "sessions"]
FRONTIER_COLUMNS = [
    "policy", "alpha", "runs", "electricity_cost_eur", "filling_rate_pct", "full_satisfaction_rate_pct",
    "realized_objective_eur",
]
TIMING_COLUMNS = ["policy", "alpha", "world_seed", "policy_seed", "steps", "mean_solve_ms", "max_solve_ms", "wall_s"]


def _relative_pct(value, reference):
    if value is None or reference is None or reference == 0:
        return None
    return 100.0 * (value - reference) / abs(reference)


def build_sweep_rows(cells) -> List[Dict]:
    """One row per cell, sorted, with differences w.r.t. the oracle run of the same seeds"""
    reference = {}
    for cell in cells:
        if cell.policy == REFERENCE_POLICY and cell.ok:
            reference[(cell.alpha, cell.world_seed, cell.policy_seed)] = cell.metrics

    rows = []
    for cell in sorted(cells, key=lambda c: (c.alpha, c.world_seed, c.policy_seed, c.policy)):
        row = {column: None for column in ROW_COLUMNS}
        row.update(policy=cell.policy, alpha=cell.alpha, world_seed=cell.world_seed, policy_seed=cell.policy_seed,
                   status="ok" if cell.ok else "failed", error="")
        if cell.ok:
            row.update(cell.metrics.as_row())
            ref = reference.get((cell.alpha, cell.world_seed, cell.policy_seed))
            for metric, column in RELATIVE_COLUMNS.items():
                row[column] = _relative_pct(row[metric], getattr(ref, metric) if ref else None)
        else:
            row["error"] = f"{cell.error_type}: {cell.error}"
        rows.append(row)
    return rows


def _header(config_hash, seeds):
    return f"# config_hash={config_hash} world_seeds={list(seeds[0])} policy_seeds={list(seeds[1])}\n"


def _write_csv(path, frame, header):
    with open(path, "w", newline="") as f:
        f.write(header)
        frame.to_csv(f, index=False, lineterminator="\n")


def session_frame(cells) -> pd.DataFrame:
    """Per-session unserved share of the initial request"""
    records = []
    for cell in cells:
        if not cell.ok or cell.run is None:
            continue
        for s in cell.run.sessions:
            if s.initial_request_kwh <= 0:
                continue
            records.append({
                "policy": cell.policy, "alpha": cell.alpha, "world_seed": cell.world_seed,
                "policy_seed": cell.policy_seed, "slot": s.slot, "start_step": s.start_step, "end_step": s.end_step,
                "initial_request_kwh": s.initial_request_kwh, "final_remaining_kwh": s.final_remaining_kwh,
                "unserved_share": s.final_remaining_kwh / s.initial_request_kwh,
            })
    return pd.DataFrame(records, columns=SESSION_COLUMNS)


def histogram_frame(sessions: pd.DataFrame) -> pd.DataFrame:
    edges = np.linspace(0.0, 1.0, UNSERVED_BINS + 1)
    records = []
    for key, group in sessions.groupby(["policy", "alpha", "world_seed", "policy_seed"], sort=True):
        counts, _ = np.histogram(group["unserved_share"].clip(0.0, 1.0), bins=edges)
        for low, high, count in zip(edges[:-1], edges[1:], counts):
            records.append(dict(zip(HISTOGRAM_COLUMNS[:4], key), bin_low=low, bin_high=high, sessions=int(count)))
    return pd.DataFrame(records, columns=HISTOGRAM_COLUMNS)


def frontier_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    """Mean cost against mean satisfaction per (policy, α)"""
    frame = pd.DataFrame([r for r in rows if r["status"] == "ok"], columns=ROW_COLUMNS)
    if frame.empty:
        return pd.DataFrame(columns=FRONTIER_COLUMNS)
    metrics = ["electricity_cost_eur", "filling_rate_pct", "full_satisfaction_rate_pct", "realized_objective_eur"]
    frame[metrics] = frame[metrics].astype(float)
    grouped = frame.groupby(["policy", "alpha"], sort=True)
    out = grouped[metrics].mean()
    out.insert(0, "runs", grouped.size())
    return out.reset_index()[FRONTIER_COLUMNS]


def timing_frame(cells) -> pd.DataFrame:
    records = []
    for cell in sorted(cells, key=lambda c: c.key):
        if cell.run is None:
            continue
        solve = [s.diagnostics.get("solve_ms", 0.0) for s in cell.run.steps]
        records.append({
            "policy": cell.policy, "alpha": cell.alpha, "world_seed": cell.world_seed,
            "policy_seed": cell.policy_seed, "steps": len(cell.run.steps),
            "mean_solve_ms": float(np.mean(solve)) if solve else 0.0,
            "max_solve_ms": float(np.max(solve)) if solve else 0.0,
            "wall_s": cell.wall_s,
        })
    return pd.DataFrame(records, columns=TIMING_COLUMNS)


def format_sweep_table(rows: Sequence[Dict]) -> str:
    """Human-readable table of the sweep rows"""
    if not rows:
        return "(no results)\n"
    frame = pd.DataFrame(rows, columns=ROW_COLUMNS).drop(columns=["error"])
    return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}", na_rep="n/a") + "\n"


def emit_reports(cells, rows, out_dir, config_hash, seeds=((), ())) -> Dict[str, str]:
    """Write the sweep table, distributions, frontier and timings; returns name -> path.

    Everything except timings.csv, the only file holding wall-clock times, and
    the first line of sweep_table.txt is a pure function of the config and the seeds.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        marker = os.path.join(out_dir, ".write-test")
        with open(marker, "w"):
            pass
        os.remove(marker)
    except OSError as e:
        raise ConfigError(f"cannot write reports to {out_dir}: {e}") from e

    header = _header(config_hash, seeds)
    sessions = session_frame(cells)
    files = {
        "sweep_table": os.path.join(out_dir, "sweep_table.csv"),
        "sweep_text": os.path.join(out_dir, "sweep_table.txt"),
        "unserved_distribution": os.path.join(out_dir, "unserved_distribution.csv"),
        "unserved_histogram": os.path.join(out_dir, "unserved_histogram.csv"),
        "frontier": os.path.join(out_dir, "frontier.csv"),
        "timings": os.path.join(out_dir, "timings.csv"),
    }

    _write_csv(files["sweep_table"], pd.DataFrame(list(rows), columns=ROW_COLUMNS), header)
    _write_csv(files["unserved_distribution"], sessions, header)
    _write_csv(files["unserved_histogram"], histogram_frame(sessions), header)
    _write_csv(files["frontier"], frontier_frame(rows), header)
    _write_csv(files["timings"], timing_frame(cells), "# nondeterministic: wall-clock timings\n" + header)
    with open(files["sweep_text"], "w") as f:
        f.write(f"# generated {datetime.now().isoformat(timespec='seconds')}\n")
        f.write(header)
        f.write(format_sweep_table(rows))

    for cell in cells:
        if cell.log_path:
            files[f"run:{cell.policy}:{cell.alpha:g}:{cell.world_seed}:{cell.policy_seed}"] = cell.log_path

    print(f"📊 Reports written to {out_dir} ({len(rows)} rows, {len(sessions)} sessions)")
    return files
