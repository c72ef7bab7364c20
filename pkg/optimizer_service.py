#!/usr/bin/env python3
"""
Optimizer Service
Builds the deterministic-equivalent program of a weighted scenario set and
solves it by branch-and-bound over the overrun indicators
"""

import heapq
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from config import LP_ENGINE, MIP_GAP, NODE_BUDGET, SOLVER_BACKEND
from evcs_model import ZERO_TOLERANCE, BuildError, ControlAction, DomainError, StationConfig, StationState
from scenario_service import ReducedScenarioSet, Scenario, single_scenario_set
from simplex_service import solve_lp_dense

INTEGRALITY_TOL = 1e-6
WEIGHT_TOL = 1e-9


@dataclass(eq=False)
class StochasticProgram:
    """min c @ x + objective_constant over A_ub x <= b_ub, A_eq x == b_eq, lb <= x <= ub"""
    c: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary_cols: np.ndarray
    first_stage_cols: np.ndarray
    objective_constant: float
    names: List[str]
    t0: int
    R: int
    weights: Tuple[float, ...]
    big_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    e_index: Optional[np.ndarray] = None  # (K', R+1, n) column of each charge variable
    b_index: Optional[np.ndarray] = None  # (K', R+1) column of each indicator
    r_index: Dict = field(default_factory=dict)

    @property
    def n_vars(self):
        return self.c.size

    @property
    def integrality(self):
        flags = np.zeros(self.n_vars, dtype=np.int8)
        flags[self.binary_cols] = 1
        return flags

    def objective_value(self, x):
        return float(self.c @ x) + self.objective_constant

    def stats(self):
        return {
            "variables": int(self.n_vars),
            "binaries": int(self.binary_cols.size),
            "rows_ub": int(self.A_ub.shape[0]),
            "rows_eq": int(self.A_eq.shape[0]),
            "scenarios": len(self.weights),
        }


class SolverSolution(NamedTuple):
    x: Optional[np.ndarray]
    objective: float
    status: str  # optimal | node-budget-exhausted | infeasible
    gap: float
    nodes: int = 0
    backend: str = "bnb"
    lp_solves: int = 0


def _scenario_sort_key(scenario: Scenario):
    events = tuple(
        tuple((ev.start, ev.end, ev.request_kwh, ev.announced_duration_steps) for ev in w.events)
        for w in scenario.inputs
    )
    return events, scenario.uncontrollable_kwh.tobytes()


def canonical_scenarios(scenario_set: ReducedScenarioSet):
    """Scenarios merged by identical data and sorted, weights added up"""
    merged = {}
    for scenario, weight in zip(scenario_set.scenarios, scenario_set.weights):
        key = _scenario_sort_key(scenario)
        if key in merged:
            merged[key] = (merged[key][0], merged[key][1] + weight)
        else:
            merged[key] = (scenario, weight)
    ordered = [merged[key] for key in sorted(merged)]
    return [s for s, _ in ordered], [w for _, w in ordered]


def _check_scenarios(state, scenarios, weights, config):
    if not scenarios:
        raise BuildError("program needs at least one scenario")
    if abs(sum(weights) - 1.0) > WEIGHT_TOL or any(not 0 < w <= 1 + WEIGHT_TOL for w in weights):
        raise BuildError(f"scenario weights must be in (0, 1] and sum to 1, got {weights}")
    observed = scenarios[0].inputs[0]
    flags = np.array(state.active_flags(), dtype=bool)
    lengths = {s.R for s in scenarios}
    if len(lengths) != 1:
        raise BuildError(f"scenarios disagree on the horizon: {sorted(lengths)}")
    for scenario in scenarios:
        if scenario.t0 != state.t:
            raise BuildError(f"scenario for step {scenario.t0} used at step {state.t}")
        if scenario.n != state.n or state.n != config.n:
            raise BuildError("scenario, state and config disagree on the slot count")
        if scenario.inputs[0] != observed:
            raise BuildError("scenarios disagree on the observed input")
        if not np.array_equal(scenario.active[0], flags):
            slots = np.flatnonzero(scenario.active[0] != flags).tolist()
            raise BuildError(f"scenario activity at t0 contradicts the state on slots {slots}")


def build_program(state: StationState, scenarios, config: StationConfig, t0=None) -> StochasticProgram:
    """Deterministic equivalent with a shared first stage"""
    if isinstance(scenarios, Scenario):
        scenarios = single_scenario_set(scenarios)
    t0 = state.t if t0 is None else t0
    if t0 != state.t:
        raise BuildError(f"program requested for step {t0}, state is at step {state.t}")
    scenarios, weights = canonical_scenarios(scenarios)
    _check_scenarios(state, scenarios, weights, config)

    n, R, K = state.n, scenarios[0].R, len(scenarios)
    steps = R + 1
    eta, e_max, c_max = config.eta, config.e_max, config.c_max
    prices = np.array([config.price_at(t0 + j) for j in range(steps)])

    names = []
    c, lb, ub = [], [], []

    def add_var(name, cost, low, high):
        names.append(name)
        c.append(cost)
        lb.append(low)
        ub.append(high)
        return len(names) - 1

    e_index = np.empty((K, steps, n), dtype=np.int64)
    for i in range(n):
        high = e_max if state.slots[i].active else 0.0
        e_index[:, 0, i] = add_var(f"e_s{i}_t{t0}", prices[0], 0.0, high)
    for k, scenario in enumerate(scenarios):
        for j in range(1, steps):
            for i in range(n):
                high = e_max if scenario.active[j, i] else 0.0
                e_index[k, j, i] = add_var(f"e_k{k}_s{i}_t{t0 + j}", weights[k] * prices[j], 0.0, high)

    b_index = np.empty((K, steps), dtype=np.int64)
    big_m = np.zeros((K, steps))
    ub_rows, ub_cols, ub_vals, b_ub = [], [], [], []
    constant = 0.0
    for k, scenario in enumerate(scenarios):
        load_u = scenario.uncontrollable_kwh.sum(axis=1)
        constant += weights[k] * float(prices @ load_u)
        for j in range(steps):
            m = scenario.active[j].sum() * e_max + load_u[j] - c_max
            big_m[k, j] = m
            b_index[k, j] = add_var(f"b_k{k}_t{t0 + j}", weights[k] * config.xi, 0.0, 1.0 if m > 0 else 0.0)
            if m <= 0:
                continue
            row = len(b_ub)
            for i in np.flatnonzero(scenario.active[j]):
                ub_rows.append(row)
                ub_cols.append(e_index[k, j, i])
                ub_vals.append(1.0)
            ub_rows.append(row)
            ub_cols.append(b_index[k, j])
            ub_vals.append(-m)
            b_ub.append(c_max - load_u[j])

    eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
    r_index = {}
    for k, scenario in enumerate(scenarios):
        for i in range(n):
            for j in range(steps):
                if not scenario.active[j, i]:
                    continue
                z = scenario.z[j, i]
                weight = weights[k] * config.alpha / z if z >= ZERO_TOLERANCE else 0.0
                col = add_var(f"r_k{k}_s{i}_t{t0 + j}", weight, 0.0, np.inf)
                r_index[(k, i, j)] = col
                row = len(b_eq)
                eq_rows += [row, row]
                eq_cols += [col, e_index[k, j, i]]
                eq_vals += [1.0, eta]
                if j == 0:
                    b_eq.append(state.slots[i].remaining_kwh)
                elif scenario.new_session[j, i]:
                    b_eq.append(z)
                else:
                    eq_rows.append(row)
                    eq_cols.append(r_index[(k, i, j - 1)])
                    eq_vals.append(-1.0)
                    b_eq.append(0.0)

    n_vars = len(names)
    A_ub = sparse.csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(len(b_ub), n_vars))
    A_eq = sparse.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(len(b_eq), n_vars))
    program = StochasticProgram(
        c=np.array(c, dtype=float),
        A_ub=A_ub,
        b_ub=np.array(b_ub, dtype=float),
        A_eq=A_eq,
        b_eq=np.array(b_eq, dtype=float),
        lb=np.array(lb, dtype=float),
        ub=np.array(ub, dtype=float),
        binary_cols=b_index.ravel().copy(),
        first_stage_cols=e_index[0, 0].copy(),
        objective_constant=constant,
        names=names,
        t0=t0,
        R=R,
        weights=tuple(weights),
        big_m=big_m,
        e_index=e_index,
        b_index=b_index,
        r_index=r_index,
    )
    if not np.all(np.isfinite(program.c)):
        raise BuildError("objective has non-finite coefficients")
    return program


def solve_lp(program: StochasticProgram, lb=None, ub=None, engine=None):
    """LP relaxation through the chosen engine: (status, x, fun)"""
    engine = engine or LP_ENGINE
    lb = program.lb if lb is None else lb
    ub = program.ub if ub is None else ub
    if engine == "highs":
        result = linprog(
            program.c,
            A_ub=program.A_ub if program.A_ub.shape[0] else None,
            b_ub=program.b_ub if program.A_ub.shape[0] else None,
            A_eq=program.A_eq if program.A_eq.shape[0] else None,
            b_eq=program.b_eq if program.A_eq.shape[0] else None,
            bounds=np.column_stack([lb, ub]),
            method="highs",
            options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9},
        )
        if result.status == 0:
            return "optimal", result.x, float(result.fun)
        if result.status == 2:
            return "infeasible", None, np.inf
        raise DomainError(f"LP engine failed: {result.message}")
    if engine == "simplex":
        result = solve_lp_dense(program.c, program.A_ub, program.b_ub, program.A_eq, program.b_eq, lb, ub)
        if result.status == "optimal":
            return "optimal", result.x, result.fun
        if result.status == "infeasible":
            return "infeasible", None, np.inf
        raise DomainError(f"simplex engine stopped with status {result.status}")
    raise DomainError(f"unknown LP engine '{engine}'")


def _relative_gap(upper, lower):
    if not np.isfinite(upper):
        return np.inf
    return max(0.0, upper - lower) / max(abs(upper), 1.0)


def _fixed_bounds(program, fixings_lo, fixings_hi):
    lb = program.lb.copy()
    ub = program.ub.copy()
    lb[program.binary_cols] = fixings_lo
    ub[program.binary_cols] = fixings_hi
    return lb, ub


def _branch_and_bound(program, budget, gap, engine):
    binaries = program.binary_cols
    counter = {"lp": 0}

    def relax(lo, hi):
        counter["lp"] += 1
        return solve_lp(program, *_fixed_bounds(program, lo, hi), engine=engine)

    base_lo = program.lb[binaries].copy()
    base_hi = program.ub[binaries].copy()
    status, x, bound = relax(base_lo, base_hi)
    if status == "infeasible":
        return SolverSolution(None, np.inf, "infeasible", np.inf, 1, "bnb", counter["lp"])

    best_x, best_value = None, np.inf
    tried_patterns = set()

    def try_pattern(pattern):
        nonlocal best_x, best_value
        key = pattern.tobytes()
        if key in tried_patterns:
            return
        tried_patterns.add(key)
        status, xr, value = relax(pattern, pattern)
        if status == "optimal" and value < best_value:
            best_x, best_value = xr, value

    def rounding(xv, lo, hi):
        values = xv[binaries]
        up = np.where(values > INTEGRALITY_TOL, 1.0, 0.0)
        try_pattern(np.clip(up, lo, hi))
        down = np.where(values >= 1.0 - INTEGRALITY_TOL, 1.0, 0.0)
        try_pattern(np.clip(down, lo, hi))

    heap = [(bound, 0, base_lo, base_hi, x)]
    next_id = 1
    nodes = 0
    while heap:
        lower = heap[0][0]
        if _relative_gap(best_value, lower) <= gap:
            break
        if nodes >= budget:
            break
        bound, _, lo, hi, xv = heapq.heappop(heap)
        nodes += 1
        if bound >= best_value:
            continue

        values = xv[binaries]
        fractionality = np.minimum(values - lo, hi - values)
        fractionality = np.minimum(fractionality, np.minimum(values, 1.0 - values))
        if fractionality.max(initial=0.0) <= INTEGRALITY_TOL:
            if bound < best_value:
                best_x, best_value = xv, bound
            continue

        rounding(xv, lo, hi)
        branch = int(np.argmax(fractionality))
        for value in (0.0, 1.0):
            child_lo, child_hi = lo.copy(), hi.copy()
            child_lo[branch] = child_hi[branch] = value
            status, xc, child_bound = relax(child_lo, child_hi)
            if status == "optimal" and child_bound < best_value:
                heapq.heappush(heap, (child_bound, next_id, child_lo, child_hi, xc))
            next_id += 1

    lower = min(heap[0][0], best_value) if heap else best_value
    final_gap = _relative_gap(best_value, lower)
    if best_x is None:
        return SolverSolution(None, np.inf, "infeasible", np.inf, nodes, "bnb", counter["lp"])
    x = best_x.copy()
    x[binaries] = np.round(x[binaries])
    status = "optimal" if final_gap <= gap else "node-budget-exhausted"
    return SolverSolution(x, program.objective_value(x), status, final_gap, nodes, "bnb", counter["lp"])


def _highs_milp(program, budget, gap):
    constraints = []
    if program.A_ub.shape[0]:
        constraints.append(LinearConstraint(program.A_ub, -np.inf, program.b_ub))
    if program.A_eq.shape[0]:
        constraints.append(LinearConstraint(program.A_eq, program.b_eq, program.b_eq))
    result = milp(program.c, constraints=constraints, integrality=program.integrality,
                  bounds=Bounds(program.lb, program.ub),
                  options={"mip_rel_gap": gap, "node_limit": budget})
    if result.x is None:
        return SolverSolution(None, np.inf, "infeasible", np.inf, 0, "highs-milp", 0)
    x = result.x.copy()
    x[program.binary_cols] = np.round(x[program.binary_cols])
    reported_gap = float(getattr(result, "mip_gap", 0.0) or 0.0)
    status = "optimal" if result.status == 0 else "node-budget-exhausted"
    nodes = int(getattr(result, "mip_node_count", 0) or 0)
    return SolverSolution(x, program.objective_value(x), status, reported_gap, nodes, "highs-milp", 0)


def solve(program: StochasticProgram, budget=None, gap=None, backend=None, lp_engine=None) -> SolverSolution:
    """Solve to relative gap or node budget, returning the incumbent and its proven gap"""
    budget = NODE_BUDGET if budget is None else budget
    gap = MIP_GAP if gap is None else gap
    backend = backend or SOLVER_BACKEND
    if backend == "bnb":
        return _branch_and_bound(program, budget, gap, lp_engine)
    if backend == "highs-milp":
        return _highs_milp(program, budget, gap)
    raise DomainError(f"unknown solver backend '{backend}'")


def extract_first_stage(solution: SolverSolution, program: StochasticProgram, state: StationState,
                        config: StationConfig) -> ControlAction:
    """Shared t0 charges clamped against the true state"""
    if solution.status == "infeasible" or solution.x is None:
        raise DomainError("cannot extract an action from an infeasible solution")
    energies = []
    for i, col in enumerate(program.first_stage_cols):
        slot = state.slots[i]
        if not slot.active:
            energies.append(0.0)
            continue
        e = min(max(float(solution.x[col]), 0.0), config.e_max, slot.remaining_kwh / config.eta)
        energies.append(e)
    return ControlAction(tuple(energies))


def _lp_terms(coefficients, names, fallback):
    terms = [
        f"{'+' if coef > 0 else '-'} {abs(coef)!r} {name}"
        for coef, name in zip(coefficients, names) if coef != 0
    ]
    if not terms:
        terms = [f"0 {fallback}"]
    # LP readers cap line length
    return ["   " + " ".join(terms[start:start + 6]) for start in range(0, len(terms), 6)]


def write_lp_file(program: StochasticProgram, path):
    """Dump the program in CPLEX LP format for external cross-checks"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    names = program.names
    lines = [
        f"\\ evcs program t0={program.t0} R={program.R} scenarios={len(program.weights)}",
        f"\\ objective constant {program.objective_constant!r}",
        "Minimize",
        " obj:",
    ]
    nonzero = np.flatnonzero(program.c)
    lines += _lp_terms(program.c[nonzero], [names[j] for j in nonzero], names[0])
    lines.append("Subject To")
    for label, matrix, rhs, sense in (("u", program.A_ub, program.b_ub, "<="), ("q", program.A_eq, program.b_eq, "=")):
        for row in range(matrix.shape[0]):
            start, end = matrix.indptr[row], matrix.indptr[row + 1]
            cols, vals = matrix.indices[start:end], matrix.data[start:end]
            lines.append(f" {label}{row}:")
            lines += _lp_terms(vals, [names[j] for j in cols], names[0])
            lines.append(f"   {sense} {rhs[row]!r}")
    lines.append("Bounds")
    binary = set(program.binary_cols.tolist())
    for j, name in enumerate(names):
        if j in binary and program.ub[j] > 0:
            continue
        high = "+inf" if not np.isfinite(program.ub[j]) else repr(program.ub[j])
        lines.append(f" {program.lb[j]!r} <= {name} <= {high}")
    lines.append("Binaries")
    lines += [f" {names[j]}" for j in program.binary_cols if program.ub[j] > 0]
    lines.append("End")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
