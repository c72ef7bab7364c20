#!/usr/bin/env python3
"""
Control Step State
State schema of one receding-horizon decision flowing through the control graph
"""

from typing import Any, Dict, List, Optional, TypedDict

from evcs_model import ExogenousInput, StationConfig, StationState


class ControlStepState(TypedDict):
    """State schema for one controller decision"""

    # Decision context
    policy: str
    t: int
    station: StationState
    observed: ExogenousInput
    clock: Any
    config: StationConfig
    seed: Any
    stage: str

    # Forecast and program
    samples: List[Any]
    scenario_set: Any
    program: Any
    solution: Any

    # Outcome
    action: Any
    diagnostics: Dict[str, Any]

    # Workflow control
    next: str
    error: str
    error_type: str


def create_control_step_state(policy: str, station: StationState, observed: ExogenousInput, clock,
                              config: StationConfig, seed=None) -> ControlStepState:
    """Create initial state for one control step"""
    return ControlStepState(
        policy=policy,
        t=station.t,
        station=station,
        observed=observed,
        clock=clock,
        config=config,
        seed=seed,
        stage="started",

        samples=[],
        scenario_set=None,
        program=None,
        solution=None,

        action=None,
        diagnostics={"policy": policy, "t": station.t},

        next="",
        error="",
        error_type="",
    )


def update_stage(state: ControlStepState, new_stage: str) -> ControlStepState:
    state["stage"] = new_stage
    return state


def record_failure(state: ControlStepState, error: Exception, stage: Optional[str] = None) -> ControlStepState:
    """Store an exception and route to the error handler"""
    state["error"] = str(error)
    state["error_type"] = type(error).__name__
    state["next"] = "error_handler"
    if stage:
        state["stage"] = stage
    return state
