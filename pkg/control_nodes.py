#!/usr/bin/env python3
"""
Control Graph Nodes
Forecast, reduce, build, solve and extract steps of one receding-horizon decision.
Each node records failures in the state instead of raising.
"""

import os
import time

from config import DUMP_LP_DIR
from control_state import record_failure, update_stage
from evcs_model import InfeasibleActionError, validate_action, zero_action
from optimizer_service import build_program, canonical_scenarios, extract_first_stage, solve, write_lp_file
from scenario_service import ReducedScenarioSet, dump_scenario, reduce, single_scenario_set


def make_forecast_node(forecaster):
    """Node producing either K samples or a single scenario"""

    def forecast_node(state):
        state["diagnostics"]["started"] = time.perf_counter()
        station = state["station"]
        try:
            if station.active_count() == 0:
                # nothing to charge, the only feasible action is zero
                state["action"] = zero_action(station.n)
                state["diagnostics"].update(status="trivial", gap=0.0, objective=0.0, scenarios=0,
                                            scenarios_sampled=0)
                state = update_stage(state, "trivial")
                state["next"] = "end"
                return state

            result = forecaster(station, state["observed"], state["clock"], state["seed"])
            if isinstance(result, list):
                state["samples"] = result
                state["diagnostics"]["scenarios_sampled"] = len(result)
                state["next"] = "reducer"
            else:
                state["scenario_set"] = result if isinstance(result, ReducedScenarioSet) \
                    else single_scenario_set(result)
                state["diagnostics"]["scenarios_sampled"] = 1
                state["next"] = "builder"
            return update_stage(state, "forecast")
        except Exception as e:
            return record_failure(state, e, "forecast")

    return forecast_node


def make_reducer_node(K_prime):
    def reducer_node(state):
        try:
            scenario_set = reduce(state["samples"], K_prime, state["seed"])
            state["scenario_set"] = scenario_set
            state["diagnostics"]["weights"] = list(scenario_set.weights)
            state["diagnostics"]["retained"] = [s.sample_index for s in scenario_set.scenarios]
            state["next"] = "builder"
            return update_stage(state, "reduced")
        except Exception as e:
            return record_failure(state, e, "reduce")

    return reducer_node


def builder_node(state):
    """Deterministic-equivalent program for the current scenario set"""
    try:
        program = build_program(state["station"], state["scenario_set"], state["config"])
        state["program"] = program
        state["diagnostics"].update(program.stats())
        state["diagnostics"].setdefault("weights", list(program.weights))
        state["next"] = "solver"
        return update_stage(state, "built")
    except Exception as e:
        return record_failure(state, e, "build")


def _dump_step(state, program):
    """Program and its scenarios, one file each, named by policy and step"""
    prefix = os.path.join(DUMP_LP_DIR, f"{state['policy']}_t{state['t']:06d}")
    write_lp_file(program, f"{prefix}.lp")
    for k, scenario in enumerate(canonical_scenarios(state["scenario_set"])[0]):
        dump_scenario(scenario, f"{prefix}_k{k}.scn")


def make_solver_node(budget=None, gap=None, backend=None, lp_engine=None):
    def solver_node(state):
        try:
            program = state["program"]
            if DUMP_LP_DIR:
                _dump_step(state, program)
            solution = solve(program, budget=budget, gap=gap, backend=backend, lp_engine=lp_engine)
            state["solution"] = solution
            state["diagnostics"].update(status=solution.status, gap=solution.gap, objective=solution.objective,
                                        nodes=solution.nodes, lp_solves=solution.lp_solves,
                                        backend=solution.backend)
            if solution.status == "infeasible":
                raise InfeasibleActionError(f"program at step {state['t']} is infeasible")
            state["next"] = "extractor"
            return update_stage(state, "solved")
        except Exception as e:
            return record_failure(state, e, "solve")

    return solver_node


def extractor_node(state):
    """First-stage action, checked against the true state"""
    try:
        action = extract_first_stage(state["solution"], state["program"], state["station"], state["config"])
        violations = validate_action(state["station"], action, state["config"])
        if violations:
            raise InfeasibleActionError(f"extracted action violates constraints: {violations}")
        state["action"] = action
        state["next"] = "end"
        return update_stage(state, "extracted")
    except Exception as e:
        return record_failure(state, e, "extract")


def error_handler_node(state):
    """Report a failed decision"""
    print(f"❌ CONTROL ERROR [{state['policy']}] step {state['t']} during {state['stage']}: "
          f"{state.get('error_type', '')}: {state.get('error', 'Unknown error occurred')}")
    state["action"] = None
    return update_stage(state, "failed")
