#!/usr/bin/env python3
"""
Sweep State Management
State schema of the α-sweep experiment; the parallel policy runners merge
their cell results through list reducers
"""

from dataclasses import dataclass
from datetime import datetime
from typing import Annotated, Any, Dict, List, Optional, TypedDict

from config import ExperimentConfig
from simulation_service import MetricsSummary, RunResult


def add_to_list(existing: List, new: List) -> List:
    """Reducer concatenating concurrent list updates"""
    if existing is None:
        existing = []
    if new is None:
        new = []
    return existing + new


@dataclass
class World:
    """One train/test pair of traces drawn from (or read for) a world seed"""
    world_seed: int
    train: Any
    test: Any
    truth: Any = None


@dataclass
class CellResult:
    """Outcome of one (policy, α, world seed, policy seed) simulation"""
    policy: str
    alpha: float
    world_seed: int
    policy_seed: int
    metrics: Optional[MetricsSummary] = None
    run: Optional[RunResult] = None
    log_path: Optional[str] = None
    wall_s: float = 0.0
    error: str = ""
    error_type: str = ""

    @property
    def ok(self):
        return self.metrics is not None and not self.error

    @property
    def key(self):
        return (self.policy, self.alpha, self.world_seed, self.policy_seed)


class SweepState(TypedDict):
    """State schema for one sweep"""

    sweep_id: str
    config: ExperimentConfig
    timestamp: str
    stage: str

    # Inputs
    worlds: List[World]
    models: Dict[int, Any]
    load_tables: Dict[Any, Any]

    # Parallel runner output
    policies_completed: Annotated[List[str], add_to_list]
    cell_results: Annotated[List[CellResult], add_to_list]

    # Coordination and reports
    rows: List[Dict[str, Any]]
    report_files: Dict[str, str]

    # Workflow control
    next: str
    error: str
    error_type: str


def create_sweep_state(config: ExperimentConfig) -> SweepState:
    """Create initial state for a sweep"""
    return SweepState(
        sweep_id=f"SWEEP-{config.config_hash()}",
        config=config,
        timestamp=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        stage="started",

        worlds=[],
        models={},
        load_tables={},

        policies_completed=[],
        cell_results=[],

        rows=[],
        report_files={},

        next="",
        error="",
        error_type="",
    )


def update_sweep_stage(state: SweepState, new_stage: str) -> SweepState:
    state["stage"] = new_stage
    return state


def check_all_policies_completed(state: SweepState) -> bool:
    """Check if every selected policy runner has reported"""
    return set(state["config"].policies).issubset(set(state.get("policies_completed", [])))


def get_sweep_summary(state: SweepState) -> str:
    results = state.get("cell_results", [])
    failed = sum(1 for r in results if not r.ok)
    return f"Sweep {state['sweep_id']}: {state['stage']} ({len(results)} cells, {failed} failed)"
