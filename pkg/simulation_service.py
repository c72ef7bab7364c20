#!/usr/bin/env python3
"""
Simulation Service
Closed-loop simulation of a policy over a trace and the run metrics
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config import SEED, VERBOSE
from evcs_model import (
    ConfigError, InfeasibleActionError, SessionEndRecord, StageCostBreakdown, close_sessions, empty_station,
    step, validate_action, ZERO_TOLERANCE,
)


class TraceHistory:
    """Read-only view of the inputs observed so far"""

    def __init__(self, trace, t=0):
        self._trace = trace
        self.t = t

    def observed(self):
        return self._trace.inputs[:self.t + 1]


@dataclass
class StepRecord:
    t: int
    active_slots: int
    action: Tuple[float, ...]
    load_kwh: float
    cost: StageCostBreakdown
    diagnostics: Dict[str, Any]
    ended_sessions: int = 0


@dataclass
class RunResult:
    policy: str
    alpha: float
    seed: Any
    steps: List[StepRecord] = field(default_factory=list)
    sessions: List[SessionEndRecord] = field(default_factory=list)
    ignored_end_events: int = 0

    @property
    def totals(self):
        return {
            "energy_cost_eur": math.fsum(s.cost.energy_cost_eur for s in self.steps),
            "penalty_eur": math.fsum(s.cost.penalty_eur for s in self.steps),
            "dissatisfaction_units": math.fsum(s.cost.dissatisfaction_units for s in self.steps),
            "total_weighted_eur": math.fsum(s.cost.total_weighted_eur for s in self.steps),
            "load_kwh": math.fsum(s.load_kwh for s in self.steps),
            "penalty_steps": sum(1 for s in self.steps if s.cost.penalty_eur > 0),
        }


@dataclass(frozen=True)
class MetricsSummary:
    electricity_cost_eur: float
    filling_rate_pct: Optional[float]
    full_satisfaction_rate_pct: Optional[float]
    penalty_step_count: int
    mean_solve_ms: float
    sessions: int = 0
    energy_cost_eur: float = 0.0
    penalty_eur: float = 0.0
    realized_objective_eur: float = 0.0
    delivered_kwh: float = 0.0

    def as_row(self):
        return {
            "electricity_cost_eur": self.electricity_cost_eur,
            "filling_rate_pct": self.filling_rate_pct,
            "full_satisfaction_rate_pct": self.full_satisfaction_rate_pct,
            "penalty_step_count": self.penalty_step_count,
            "sessions": self.sessions,
            "realized_objective_eur": self.realized_objective_eur,
            "delivered_kwh": self.delivered_kwh,
        }


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


# Wall-clock measurements; kept in memory for timings.csv, never written to step logs
WALL_CLOCK_KEYS = frozenset({"solve_ms"})


def step_log_line(record: StepRecord, clock, ended):
    diagnostics = {k: v for k, v in record.diagnostics.items() if k not in WALL_CLOCK_KEYS}
    return json.dumps({
        "t": record.t,
        "clock": clock.isoformat(),
        "active": record.active_slots,
        "action": list(record.action),
        "load_kwh": record.load_kwh,
        "energy_cost_eur": record.cost.energy_cost_eur,
        "penalty_eur": record.cost.penalty_eur,
        "dissatisfaction": record.cost.dissatisfaction_units,
        "total_eur": record.cost.total_weighted_eur,
        "ended": [{"slot": e.slot, "z": e.initial_request_kwh, "r": e.final_remaining_kwh} for e in ended],
        "diagnostics": diagnostics,
    }, default=_jsonable)


def _dump_infeasible(log_path, context):
    if not log_path:
        return None
    path = os.path.join(os.path.dirname(os.path.abspath(log_path)), f"infeasible_t{context['t']}.json")
    with open(path, "w") as f:
        json.dump(context, f, indent=1, default=_jsonable)
    return path


def simulate(trace, policy, config, seed=SEED, log_path=None, verbose=VERBOSE, header=None) -> RunResult:
    """Run the policy over every step of the trace; any infeasible action aborts.

    The run log gets one JSON object per step, preceded by `header` when given.
    """
    if trace.n != config.n:
        raise ConfigError(f"trace has {trace.n} slots, station config has {config.n}")
    if trace.dt_minutes != config.dt_minutes:
        raise ConfigError(f"trace step {trace.dt_minutes} min differs from config step {config.dt_minutes} min")

    result = RunResult(policy=getattr(policy, "name", "policy"), alpha=config.alpha, seed=seed)
    state = empty_station(config.n, 0)
    history = TraceHistory(trace)
    steps_per_day = config.steps_per_day
    log = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        log = open(log_path, "w")
        if header:
            log.write(json.dumps(header, sort_keys=True, default=_jsonable) + "\n")

    try:
        for t in range(trace.n_steps):
            w = trace.inputs[t]
            clock = trace.clock(t)
            history.t = t
            decision = policy.decide(state, w, history, clock, seed=seed)

            violations = validate_action(state, decision.action, config)
            if violations:
                context = {
                    "t": t,
                    "policy": result.policy,
                    "state": [asdict(slot) for slot in state.slots],
                    "action": list(decision.action.energy_kwh),
                    "violations": [v.message for v in violations],
                    "diagnostics": decision.diagnostics,
                }
                dump = _dump_infeasible(log_path, context)
                print(f"❌ Infeasible action from {result.policy} at step {t}" + (f", context in {dump}" if dump else ""))
                raise InfeasibleActionError(f"{result.policy} returned an infeasible action at step {t}: "
                                            f"{context['violations']}", context)

            outcome = step(state, decision.action, w, config)
            record = StepRecord(
                t=t,
                active_slots=state.active_count(),
                action=decision.action.energy_kwh,
                load_kwh=outcome.cost.load_kwh,
                cost=outcome.cost,
                diagnostics=decision.diagnostics,
                ended_sessions=len(outcome.ended),
            )
            result.steps.append(record)
            result.sessions.extend(outcome.ended)
            result.ignored_end_events += outcome.ignored_end_events
            if log:
                log.write(step_log_line(record, clock, outcome.ended) + "\n")
            state = outcome.state

            if verbose and (t + 1) % steps_per_day == 0:
                print(f"📈 [{result.policy}] day {(t + 1) // steps_per_day}/{math.ceil(trace.n_steps / steps_per_day)}"
                      f" sessions closed: {len(result.sessions)}")
    finally:
        if log:
            log.close()

    # trailing sessions are closed at the final step
    result.sessions.extend(close_sessions(state))
    if result.ignored_end_events:
        print(f"⚠️ {result.ignored_end_events} end event(s) on inactive slots ignored")
    return result


def compute_metrics(result: RunResult) -> MetricsSummary:
    """Per-session filling and full-satisfaction rates plus run cost"""
    totals = result.totals
    sessions = [s for s in result.sessions if s.initial_request_kwh > 0]
    if sessions:
        filling = 100.0 * math.fsum(s.satisfaction for s in sessions) / len(sessions)
        full = 100.0 * sum(1 for s in sessions if s.final_remaining_kwh <= ZERO_TOLERANCE) / len(sessions)
    else:
        filling = full = None

    solve_times = [s.diagnostics["solve_ms"] for s in result.steps if "solve_ms" in s.diagnostics]
    return MetricsSummary(
        electricity_cost_eur=totals["energy_cost_eur"] + totals["penalty_eur"],
        filling_rate_pct=filling,
        full_satisfaction_rate_pct=full,
        penalty_step_count=totals["penalty_steps"],
        mean_solve_ms=float(np.mean(solve_times)) if solve_times else 0.0,
        sessions=len(sessions),
        energy_cost_eur=totals["energy_cost_eur"],
        penalty_eur=totals["penalty_eur"],
        realized_objective_eur=totals["total_weighted_eur"],
        delivered_kwh=math.fsum(s.delivered_kwh for s in sessions),
    )
