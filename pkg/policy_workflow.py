#!/usr/bin/env python3
"""
Policy Workflow
The four receding-horizon controllers (2S, MPC, R-MPC, P-MPC) as compiled
control graphs behind one Policy interface
"""

import time
from dataclasses import dataclass
from typing import Any, Dict, NamedTuple

import numpy as np
from langgraph.graph import END, StateGraph

from behavior_service import BehaviorModel, step_calendar
from config import SEED, split_seed
from control_nodes import (
    builder_node, error_handler_node, extractor_node, make_forecast_node, make_reducer_node, make_solver_node,
)
from control_state import ControlStepState, create_control_step_state
from evcs_model import ControlAction, DomainError, PolicyError, StationConfig
from scenario_service import perfect_forecast, point_forecast, request_based_forecast, sample_set
from simulation_service import simulate


class PolicyDecision(NamedTuple):
    action: ControlAction
    diagnostics: Dict[str, Any]


@dataclass(frozen=True, eq=False)
class AvgLoadTable:
    """Mean delivered kWh per (slot, hour of day)"""
    kwh: np.ndarray      # (n, 24)
    counts: np.ndarray   # (n, 24) steps averaged


def create_control_workflow(forecaster, K_prime=None, budget=None, gap=None, backend=None, lp_engine=None):
    """Compile the control graph: forecast -> [reducer] -> builder -> solver -> extractor"""
    workflow = StateGraph(ControlStepState)

    workflow.add_node("forecast", make_forecast_node(forecaster))
    if K_prime is not None:
        workflow.add_node("reducer", make_reducer_node(K_prime))
    workflow.add_node("builder", builder_node)
    workflow.add_node("solver", make_solver_node(budget, gap, backend, lp_engine))
    workflow.add_node("extractor", extractor_node)
    workflow.add_node("error_handler", error_handler_node)

    workflow.set_entry_point("forecast")

    def route_next(state):
        """Follow the node's own routing decision"""
        next_step = state.get("next", "end")
        if next_step in ("reducer", "builder", "solver", "extractor", "error_handler"):
            return next_step
        return END

    workflow.add_conditional_edges("forecast", route_next)
    if K_prime is not None:
        workflow.add_conditional_edges("reducer", route_next)
    workflow.add_conditional_edges("builder", route_next)
    workflow.add_conditional_edges("solver", route_next)
    workflow.add_conditional_edges("extractor", route_next)
    workflow.add_edge("error_handler", END)

    return workflow.compile()


class Policy:
    """Maps (state, observed input, history, clock) to a feasible action"""

    def __init__(self, name, config: StationConfig, forecaster, K_prime=None, seed=SEED, budget=None, gap=None,
                 backend=None, lp_engine=None):
        self.name = name
        self.config = config
        self.seed = seed
        self.workflow = create_control_workflow(forecaster, K_prime, budget, gap, backend, lp_engine)

    def decide(self, state, observed_w, history=None, clock=None, seed=None) -> PolicyDecision:
        step_seed = split_seed(self.seed if seed is None else seed, self.name, state.t)
        started = time.perf_counter()
        final = self.workflow.invoke(
            create_control_step_state(self.name, state, observed_w, clock, self.config, step_seed))

        diagnostics = dict(final["diagnostics"])
        diagnostics.pop("started", None)
        diagnostics["solve_ms"] = (time.perf_counter() - started) * 1000.0
        if final.get("error") or final.get("action") is None:
            raise PolicyError(f"{final.get('error_type') or 'Error'}: {final.get('error') or 'no action produced'}",
                              step=state.t)
        return PolicyDecision(final["action"], diagnostics)


def make_2s_policy(model: BehaviorModel, config: StationConfig, K=20, K_prime=2, seed=SEED, max_workers=1,
                   **solver_options) -> Policy:
    """Two-stage policy on K samples reduced to K' weighted scenarios"""
    R, dt = config.horizon_R, config.dt_minutes

    def forecaster(station, observed, clock, step_seed):
        return sample_set(station, observed, model, R, K, step_seed, clock, dt, max_workers=max_workers)

    return Policy("2s", config, forecaster, K_prime=K_prime, seed=seed, **solver_options)


def make_mpc_policy(model: BehaviorModel, config: StationConfig, **solver_options) -> Policy:
    R, dt = config.horizon_R, config.dt_minutes

    def forecaster(station, observed, clock, step_seed):
        return point_forecast(station, observed, model, R, clock, dt)

    return Policy("mpc", config, forecaster, **solver_options)


def make_rmpc_policy(table: AvgLoadTable, config: StationConfig, **solver_options) -> Policy:
    """Announced times trusted, unknown arrivals replaced by the average load table"""
    if table.kwh.shape != (config.n, 24):
        raise DomainError(f"load table shape {table.kwh.shape} does not match {config.n} slots")
    R, dt = config.horizon_R, config.dt_minutes

    def forecaster(station, observed, clock, step_seed):
        return request_based_forecast(station, observed, table, R, clock, dt)

    return Policy("rmpc", config, forecaster, **solver_options)


def make_pmpc_policy(full_trace, config: StationConfig, **solver_options) -> Policy:
    """Oracle policy seeing the true future of the trace"""
    R = config.horizon_R

    def forecaster(station, observed, clock, step_seed):
        return perfect_forecast(full_trace, station.t, R, station)

    return Policy("pmpc", config, forecaster, **solver_options)


def build_avg_load_table(training_trace, config: StationConfig, seed=SEED, **solver_options) -> AvgLoadTable:
    """Average P-MPC delivery per (slot, hour) over the training trace"""
    if training_trace.n_steps == 0:
        raise DomainError("cannot build a load table from an empty trace")

    hours, _ = step_calendar(training_trace)
    totals = np.zeros((config.n, 24))
    counts = np.zeros((config.n, 24))
    np.add.at(counts, (slice(None), hours), 1.0)

    if training_trace.sessions:
        print(f"🚀 Building average load table with P-MPC over {training_trace.n_steps} steps...")
        run = simulate(training_trace, make_pmpc_policy(training_trace, config, **solver_options), config, seed)
        for record in run.steps:
            totals[:, hours[record.t]] += record.action

    table = AvgLoadTable(kwh=totals / np.maximum(counts, 1.0), counts=counts)
    print(f"✅ Average load table ready (peak entry {table.kwh.max():.3f} kWh)")
    return table


def make_policy(name, config: StationConfig, model=None, table=None, trace=None, K=20, K_prime=2, seed=SEED,
                max_workers=1, **solver_options) -> Policy:
    """Build a policy by name from whichever inputs it needs"""
    if name == "2s":
        if model is None:
            raise DomainError("2s needs a behavior model")
        return make_2s_policy(model, config, K, K_prime, seed, max_workers, **solver_options)
    if name == "mpc":
        if model is None:
            raise DomainError("mpc needs a behavior model")
        return make_mpc_policy(model, config, **solver_options)
    if name == "rmpc":
        if table is None:
            raise DomainError("rmpc needs an average load table")
        return make_rmpc_policy(table, config, **solver_options)
    if name == "pmpc":
        if trace is None:
            raise DomainError("pmpc needs the full test trace")
        return make_pmpc_policy(trace, config, **solver_options)
    raise DomainError(f"unknown policy '{name}'")
