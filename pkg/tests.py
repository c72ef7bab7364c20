#!/usr/bin/env python3
"""
Test Suite for the EVCS Control Testbed
Station dynamics, data pipeline, behavior model, scenarios, optimizer,
policies, simulation, reports and CLI
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from evcs_model import (
    ConfigError, ConstraintViolationError, ControlAction, DomainError, ExogenousInput, ModelConsistencyError,
    SlotEvent, SlotState, StationConfig, StationState, empty_input, empty_station, flat_price_schedule,
    stage_cost, step, validate_action, zero_action,
)

BASE = pd.Timestamp("2024-01-01", tz="UTC")
CLOCK = pd.Timestamp("2024-01-01 10:00", tz="UTC")


def make_config(n=2, alpha=5000.0, R=3, price=0.1, c_max=7.68, e_max=3.0, eta=0.91):
    return StationConfig(n=n, dt_minutes=15, e_max=e_max, c_max=c_max, xi=14.31, eta=eta, alpha=alpha,
                         price_schedule=flat_price_schedule(15, price), horizon_R=R)


def active(r, z=None, m=10, g=0):
    return SlotState(active=True, remaining_kwh=r, initial_request_kwh=z if z is not None else r,
                     announced_steps_left=m, sojourn_steps=g)


def raw(slot, s, q, kwh, announced_steps=None):
    from data_service import RawSession

    return RawSession(slot, BASE + pd.Timedelta(minutes=15 * s + 1), BASE + pd.Timedelta(minutes=15 * q + 1), kwh,
                      None if announced_steps is None else 15 * announced_steps, f"{slot}-{s}")


def make_trace(sessions, config, slot_ids=None):
    from data_service import discretize

    slot_ids = slot_ids or [f"slot-{i}" for i in range(config.n)]
    return discretize(sessions, 15, config, slot_ids=slot_ids, start=BASE)


def deterministic_world(n_slots=2, days=1):
    """Arrivals at 08:00 and 13:00, sessions of 9 steps, 7 kWh each"""
    from data_service import SyntheticConfig

    arrival = [0.0] * 24
    arrival[8] = arrival[13] = 1.0
    return SyntheticConfig(
        n_slots=n_slots, days=days, arrival_hazard_by_hour=arrival,
        duration_hazard_by_bin=[0.0] * 6 + [1.0] * 7,
        request_kwh_low=7.0, request_kwh_high=7.0, early_disconnect_prob=0.0,
    )


def test_imports():
    """Test 1: Verify all modules can be imported"""
    import config
    import evcs_model
    import data_service
    import behavior_service
    import scenario_service
    import simplex_service
    import optimizer_service
    import control_state
    import control_nodes
    import policy_workflow
    import simulation_service
    import report_service
    import sweep_state
    import sweep_nodes
    import sweep_workflow
    import main
    print("✅ PASS: All modules imported successfully")


def test_reference_station_parameters():
    """Test 2: Threshold derivation and peak/off-peak schedule"""
    from config import reference_station_config, validate_config

    config = reference_station_config()
    assert config.c_max == pytest.approx(0.08 * 32 * 3)
    assert config.c_max == pytest.approx(7.68)
    assert len(config.price_schedule) == 96
    assert config.price_at(0) == 0.102      # 00:00
    assert config.price_at(28) == 0.153     # 07:00
    assert config.price_at(36) == 0.102     # 09:00
    assert config.price_at(48) == 0.153     # 12:00
    assert config.price_at(84) == 0.102     # 21:00
    assert config.price_at(96 + 28) == 0.153
    assert validate_config()
    print("✅ PASS: Reference station parameters")


def test_station_config_validation():
    """Test 3: Invalid station parameters are rejected"""
    with pytest.raises(ConfigError):
        make_config(eta=1.5)
    with pytest.raises(ConfigError):
        make_config(c_max=0.0)
    with pytest.raises(ConfigError):
        StationConfig(n=1, dt_minutes=15, e_max=3, c_max=1, xi=1, eta=0.9, alpha=1, price_schedule=(0.1,) * 10)
    with pytest.raises(DomainError):
        SlotState(active=False, remaining_kwh=1.0)
    with pytest.raises(DomainError):
        SlotEvent(start=True, end=True)
    print("✅ PASS: Station config validation")


def test_charge_propagation():
    """Test 4: r=10, eta=0.91, e=3 gives r'=7.27"""
    config = make_config(n=1)
    state = StationState(0, (active(10.0),))
    result = step(state, ControlAction((3.0,)), empty_input(0, 1), config)
    assert result.state.slots[0].remaining_kwh == pytest.approx(7.27, abs=1e-12)
    assert result.state.slots[0].announced_steps_left == 9
    assert result.state.slots[0].sojourn_steps == 1
    assert result.state.t == 1
    print("✅ PASS: Charge propagation")


def test_stage_cost_components():
    """Test 5: Energy cost, strict threshold penalty and dissatisfaction"""
    config = make_config(n=3, c_max=6.0)
    state = StationState(0, (active(10.0), active(10.0), active(10.0)))

    cost = stage_cost(state, ControlAction((3.0, 3.0, 0.0)), config)
    assert cost.load_kwh == pytest.approx(6.0)
    assert cost.penalty_eur == 0.0  # load equal to the threshold is not an overrun
    assert cost.energy_cost_eur == pytest.approx(0.6)
    assert cost.dissatisfaction_units == pytest.approx(0.727 * 2 + 1.0)

    cost = stage_cost(state, ControlAction((3.0, 3.0, 1.0)), config)
    assert cost.penalty_eur == pytest.approx(14.31)
    expected = 0.1 * 7.0 + 14.31 + 5000.0 * (0.727 * 2 + (10 - 0.91) / 10)
    assert cost.total_weighted_eur == pytest.approx(expected, rel=1e-12)
    print("✅ PASS: Stage cost components")


def test_validate_action_kinds():
    """Test 6: Every constraint violation kind is reported"""
    config = make_config(n=2)
    state = StationState(0, (active(1.0), SlotState(active=False)))

    kinds = {v.kind for v in validate_action(state, ControlAction((3.0, 0.5)), config)}
    assert kinds == {"overcharge", "inactive slot charged"}
    kinds = {v.kind for v in validate_action(state, ControlAction((-0.5, 0.0)), config)}
    assert kinds == {"negative"}
    kinds = {v.kind for v in validate_action(StationState(0, (active(20.0), SlotState(active=False))),
                                             ControlAction((3.5, 0.0)), config)}
    assert kinds == {"above e_max"}
    assert validate_action(state, ControlAction((0.0,)), config)[0].kind == "length"
    assert validate_action(state, ControlAction((1.0 / 0.91, 0.0)), config) == []

    with pytest.raises(ConstraintViolationError) as error:
        step(state, ControlAction((0.0, 1.0)), empty_input(0, 2), config)
    assert error.value.violations[0].slot == 1
    print("✅ PASS: Action validation")


def test_session_lifecycle():
    """Test 7: Start, announced elapse, end record and clocks"""
    config = make_config(n=1)
    state = empty_station(1, 0)
    start = ExogenousInput(0, (SlotEvent(start=True, request_kwh=8.0, announced_duration_steps=2),))

    result = step(state, zero_action(1), start, config)
    slot = result.state.slots[0]
    assert slot.active and slot.remaining_kwh == 8.0 and slot.announced_steps_left == 2 and slot.sojourn_steps == 0

    result = step(result.state, zero_action(1), empty_input(1, 1), config)
    assert result.state.slots[0].announced_steps_left == 1
    assert result.ended == ()

    result = step(result.state, ControlAction((3.0,)), empty_input(2, 1), config)
    assert not result.state.slots[0].active
    assert result.state.slots[0].sojourn_steps == 0
    (record,) = result.ended
    assert record.start_step == 0 and record.end_step == 2
    assert record.announced_elapsed
    assert record.final_remaining_kwh == pytest.approx(8.0 - 2.73)
    assert record.satisfaction == pytest.approx(2.73 / 8.0)
    print("✅ PASS: Session lifecycle")


def test_step_consistency_errors():
    """Test 8: Starts on active slots and misaligned inputs are rejected; stray ends ignored"""
    config = make_config(n=1)
    state = StationState(0, (active(5.0),))
    start = ExogenousInput(0, (SlotEvent(start=True, request_kwh=4.0, announced_duration_steps=3),))
    with pytest.raises(ModelConsistencyError):
        step(state, zero_action(1), start, config)
    with pytest.raises(ModelConsistencyError):
        step(state, zero_action(1), empty_input(5, 1), config)

    stray_end = ExogenousInput(0, (SlotEvent(end=True),))
    result = step(empty_station(1, 0), zero_action(1), stray_end, config)
    assert result.ignored_end_events == 1
    assert result.state.slots[0].sojourn_steps == 1

    # an end and a new start at the same step hand the slot over
    handover = ExogenousInput(0, (SlotEvent(start=True, request_kwh=4.0, announced_duration_steps=3),))
    result = step(StationState(0, (active(5.0, m=1),)), zero_action(1), handover, config)
    assert len(result.ended) == 1
    assert result.state.slots[0].initial_request_kwh == 4.0
    print("✅ PASS: Step consistency")


def test_energy_conservation_random_sessions():
    """Test 9: Delivered energy equals eta times the charged energy"""
    config = make_config(n=1)
    rng = np.random.default_rng(7)
    for _ in range(200):
        z = float(rng.uniform(4.0, 20.0))
        state = StationState(0, (active(z, m=12),))
        charged = 0.0
        for t in range(10):
            r = state.slots[0].remaining_kwh
            e = float(rng.uniform(0.0, min(config.e_max, 0.5 * r / config.eta)))
            state = step(state, ControlAction((e,)), empty_input(t, 1), config).state
            charged += e
        assert z - state.slots[0].remaining_kwh == pytest.approx(config.eta * charged, abs=1e-9)
    print("✅ PASS: Energy conservation")


def test_parse_sessions_csv(tmp_path):
    """Test 10: CSV parsing, ordering and malformed-row threshold"""
    from data_service import parse_sessions
    from evcs_model import DataFormatError

    path = tmp_path / "sessions.csv"
    path.write_text(
        "slot_id,connection_time,disconnection_time,kwh,announced_minutes\n"
        "B,2024-01-01 09:00,2024-01-01 11:00,12.5,150\n"
        "A,2024-01-01 08:00,2024-01-01 10:00,8.0,\n"
    )
    parsed = parse_sessions(str(path))
    assert [s.slot_id for s in parsed.sessions] == ["A", "B"]
    assert parsed.sessions[0].announced_duration_minutes is None
    assert parsed.sessions[1].announced_duration_minutes == 150
    assert parsed.errors == []

    with open(path, "a") as f:
        f.write("C,2024-01-01 12:00,2024-01-01 11:00,5.0,60\n")
    with pytest.raises(DataFormatError):
        parse_sessions(str(path))

    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert parse_sessions(str(empty)).sessions == []
    print("✅ PASS: CSV parsing")


def test_parse_sessions_acn_json(tmp_path):
    """Test 11: ACN export with user inputs"""
    from data_service import parse_sessions

    path = tmp_path / "acn.json"
    path.write_text(json.dumps({"_items": [{
        "sessionID": "x1",
        "spaceID": "CA-301",
        "connectionTime": "Mon, 01 Jan 2024 08:05:00 GMT",
        "disconnectionTime": "Mon, 01 Jan 2024 12:00:00 GMT",
        "kWhDelivered": 9.5,
        "userInputs": [{"minutesAvailable": 120}, {"minutesAvailable": 200}],
    }]}))
    (session,) = parse_sessions(str(path), fmt="acn-json").sessions
    assert session.slot_id == "CA-301"
    assert session.announced_duration_minutes == 200
    assert session.kwh == 9.5
    print("✅ PASS: ACN parsing")


def test_discretize_and_preprocess():
    """Test 12: Step snapping, announced duration and request capping"""
    from data_service import RawSession, discretize, preprocess_requests

    config = make_config(n=1)
    session = RawSession("A", BASE + pd.Timedelta(minutes=487), BASE + pd.Timedelta(hours=10), 100.0, 90, "s1")
    trace = discretize([session], 15, config, slot_ids=["A"])
    assert trace.start == BASE
    assert trace.n_steps == 96
    (record,) = trace.sessions
    assert (record.start_step, record.announced_steps, record.end_step) == (32, 6, 38)
    assert trace.inputs[32].events[0].start
    assert trace.inputs[38].events[0].end

    capped = preprocess_requests(trace, config)
    assert capped.sessions[0].request_kwh == pytest.approx(6 * 3.0 * 0.91)
    assert capped.inputs[32].events[0].request_kwh == pytest.approx(16.38)
    assert capped.metadata["capped_requests"] == 1
    print("✅ PASS: Discretization")


def test_discretize_overlaps():
    """Test 13: Overlapping sessions on a slot truncate the earlier one"""
    config = make_config(n=1)
    trace = make_trace([raw("slot-0", 10, 30, 5.0), raw("slot-0", 20, 25, 5.0)], config)
    first, second = trace.sessions
    assert first.end_step == 19 and first.end_event
    assert second.start_step == 20
    assert trace.metadata["truncated_overlaps"] == 1

    # reconnection exactly when the announced time elapses needs no end event
    trace = make_trace([raw("slot-0", 10, 14, 5.0, announced_steps=4), raw("slot-0", 14, 20, 5.0)], config)
    assert not trace.sessions[0].end_event
    assert trace.inputs[14].events[0].start
    print("✅ PASS: Overlap resolution")


def test_trace_file_and_split(tmp_path):
    """Test 14: Trace file round trip and midnight split"""
    from data_service import read_trace, split, write_trace

    config = make_config(n=2)
    trace = make_trace([raw("slot-0", 10, 20, 5.0), raw("slot-1", 100, 110, 6.0, announced_steps=12)], config)
    path = str(tmp_path / "trace.csv")
    write_trace(trace, path)
    restored = read_trace(path)
    assert restored.inputs == trace.inputs
    assert restored.slot_ids == trace.slot_ids
    assert len(restored.sessions) == 2

    train, test = split(trace, "2024-01-02")
    assert len(train.sessions) == 1 and len(test.sessions) == 1
    assert test.sessions[0].start_step == 4
    assert test.start == BASE + pd.Timedelta(days=1)
    with pytest.raises(DomainError):
        split(trace, "2024-03-01")
    print("✅ PASS: Trace I/O and split")


def test_synthetic_generator_is_seeded():
    """Test 15: Same seed, same world; ground truth matches the generator"""
    from data_service import SyntheticConfig, generate_synthetic, synthetic_trace

    gen = SyntheticConfig(n_slots=2, days=2)
    first, truth = generate_synthetic(gen, 3)
    second, _ = generate_synthetic(gen, 3)
    assert first == second
    trace, _ = synthetic_trace(gen, 3, make_config(n=2))
    assert trace.n == 2 and trace.n_steps >= 192
    for record in trace.sessions:
        assert record.announced_steps >= record.end_step - record.start_step

    model = truth.as_behavior_model()
    from behavior_service import TransitionContext
    assert model.p_end(TransitionContext(True, 200, 10, 0, 0)) == 1.0
    print("✅ PASS: Synthetic generator")


def test_sojourn_bins():
    """Test 16: Sojourn binning"""
    from behavior_service import sojourn_bin

    assert sojourn_bin(0) == 0
    assert sojourn_bin(5) == 4
    assert sojourn_bin(96) == 12
    assert sojourn_bin(500) == 12
    print("✅ PASS: Sojourn bins")


def test_behavior_model_fit_and_persist(tmp_path):
    """Test 17: Fitting, probability range, backoff and model file"""
    from behavior_service import TransitionContext, fit, load_model, save_model
    from data_service import SyntheticConfig, synthetic_trace

    trace, _ = synthetic_trace(SyntheticConfig(n_slots=3, days=5), 11, make_config(n=3))
    model = fit(trace)
    ctx_idle = TransitionContext(False, 4, 9, 2, 1)
    ctx_busy = TransitionContext(True, 12, 15, 2, 1)
    assert 0.0 < model.p_start(ctx_idle) < 1.0
    assert 0.0 < model.p_end(ctx_busy) < 1.0
    assert model.predict_kwh(TransitionContext(False, 0, 9, 2, 1)) > 0
    with pytest.raises(DomainError):
        model.p_start(ctx_busy)

    # unseen slot falls back past the slot level
    assert model.start_estimator.lookup(TransitionContext(False, 4, 9, 2, 7)).level >= 1

    path = str(tmp_path / "model.json")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.p_start(ctx_idle) == model.p_start(ctx_idle)
    assert loaded.p_end(ctx_busy) == model.p_end(ctx_busy)
    print("✅ PASS: Behavior model")


def test_behavior_model_errors(tmp_path):
    """Test 18: No sessions, oracle models and foreign files"""
    from behavior_service import fit, load_model, save_model
    from data_service import DiscretizedTrace, SyntheticConfig, generate_synthetic
    from evcs_model import DataFormatError

    empty = DiscretizedTrace(BASE, 15, tuple(empty_input(t, 1) for t in range(96)), ("A",))
    with pytest.raises(DomainError):
        fit(empty)

    _, truth = generate_synthetic(SyntheticConfig(n_slots=1, days=1), 1)
    with pytest.raises(DomainError):
        save_model(truth.as_behavior_model(), str(tmp_path / "oracle.json"))

    foreign = tmp_path / "foreign.json"
    foreign.write_text(json.dumps({"format": "other"}))
    with pytest.raises(DataFormatError):
        load_model(str(foreign))
    print("✅ PASS: Behavior model errors")


def constant_model(p_start=0.3, p_end=0.2, kwh=6.0):
    from behavior_service import BehaviorModel, FunctionEstimator

    return BehaviorModel(FunctionEstimator(lambda c: p_start), FunctionEstimator(lambda c: p_end),
                         FunctionEstimator(lambda c: kwh))


def test_forecasts_respect_announced_times():
    """Test 19: Real sessions end no later than announced in every forecast"""
    from scenario_service import check_scenario, point_forecast, sample_set

    state = StationState(40, (active(6.0, m=3), SlotState(active=False, sojourn_steps=5)))
    observed = empty_input(40, 2)
    model = constant_model(p_start=0.0, p_end=0.0)

    scenario = point_forecast(state, observed, model, 6, CLOCK)
    assert scenario.active[:, 0].tolist() == [True, True, True, False, False, False, False]
    assert not scenario.active[:, 1].any()
    assert check_scenario(scenario) == []

    for sample in sample_set(state, observed, constant_model(), 6, 8, 5, CLOCK):
        assert not sample.active[3:, 0].any() or sample.new_session[3:, 0].any()
        assert check_scenario(sample) == []
    print("✅ PASS: Announced-time fidelity")


def test_sampling_is_seeded():
    """Test 20: Same seed same samples, different seeds differ"""
    from scenario_service import sample_set

    state = StationState(40, (active(6.0, m=20), SlotState(active=False)))
    observed = empty_input(40, 2)
    first = sample_set(state, observed, constant_model(), 10, 6, (1, 2), CLOCK)
    again = sample_set(state, observed, constant_model(), 10, 6, (1, 2), CLOCK, max_workers=3)
    other = sample_set(state, observed, constant_model(), 10, 6, (1, 3), CLOCK)
    assert [s.event_key() for s in first] == [s.event_key() for s in again]
    assert [s.event_key() for s in first] != [s.event_key() for s in other]
    print("✅ PASS: Seeded sampling")


def test_scenario_reduction():
    """Test 21: Reduction weights and degenerate cases"""
    from scenario_service import reduce, sample_set

    state = StationState(40, (active(6.0, m=20), SlotState(active=False)))
    samples = sample_set(state, empty_input(40, 2), constant_model(), 10, 12, 4, CLOCK)

    reduced = reduce(samples, 2, seed=4)
    assert 1 <= len(reduced) <= 2
    assert sum(reduced.weights) == pytest.approx(1.0)
    assert sorted(i for members in reduced.members for i in members) == list(range(12))

    full = reduce(samples, 12)
    assert full.weights == tuple([1.0 / 12] * 12)
    single = reduce(samples, 1)
    assert single.weights == (1.0,)
    with pytest.raises(DomainError):
        reduce(samples, 13)
    print("✅ PASS: Scenario reduction")


def test_request_and_perfect_forecasts():
    """Test 22: Table load on idle slots, oracle inputs padded past the trace end"""
    from policy_workflow import AvgLoadTable
    from scenario_service import perfect_forecast, request_based_forecast

    config = make_config(n=2)
    state = StationState(40, (active(6.0, m=2), SlotState(active=False)))
    table = AvgLoadTable(kwh=np.full((2, 24), 1.5), counts=np.ones((2, 24)))
    scenario = request_based_forecast(state, empty_input(40, 2), table, 4, CLOCK)
    assert scenario.uncontrollable_kwh[0].tolist() == [0.0, 0.0]
    assert scenario.uncontrollable_kwh[1].tolist() == [0.0, 1.5]
    assert scenario.uncontrollable_kwh[2].tolist() == [1.5, 1.5]

    trace = make_trace([raw("slot-0", 90, 94, 5.0)], config)
    late = perfect_forecast(trace, 94, 5, empty_station(2, 94))
    assert len(late.inputs) == 6
    assert late.inputs[-1].t == 99
    print("✅ PASS: Request-based and perfect forecasts")


def single_scenario_program(config, state, inputs=None, table=None):
    from optimizer_service import build_program
    from scenario_service import make_scenario

    inputs = inputs or [empty_input(state.t + j, state.n) for j in range(config.horizon_R + 1)]
    return build_program(state, make_scenario(state, inputs), config)


def test_program_structure():
    """Test 23: Shared first stage, fixed indicators and constant term"""
    config = make_config(n=2, R=2, c_max=7.68)
    state = StationState(0, (active(10.0), SlotState(active=False)))
    program = single_scenario_program(config, state)
    assert program.first_stage_cols.size == 2
    assert program.ub[program.first_stage_cols[1]] == 0.0
    # two slots at 3 kWh never exceed 7.68, every indicator is fixed at zero
    assert np.all(program.ub[program.binary_cols] == 0.0)
    assert program.A_ub.shape[0] == 0
    assert program.objective_constant == 0.0
    print("✅ PASS: Program structure")


def test_solver_charges_when_satisfaction_dominates():
    """Test 24: Large alpha fills the session as fast as possible"""
    from optimizer_service import extract_first_stage, solve

    config = make_config(n=1, R=1)
    state = StationState(0, (active(6.0),))
    program = single_scenario_program(config, state)
    solution = solve(program)
    assert solution.status == "optimal"
    action = extract_first_stage(solution, program, state, config)
    assert action.energy_kwh[0] == pytest.approx(3.0)
    expected = 0.1 * 6.0 + 5000.0 * ((6.0 - 2.73) / 6.0 + (6.0 - 5.46) / 6.0)
    assert solution.objective == pytest.approx(expected, rel=1e-9)
    print("✅ PASS: Satisfaction-dominated solve")


def random_instance(rng, n=2, R=1):
    config = make_config(n=n, R=R, alpha=float(rng.choice([0.5, 5.0, 50.0])), price=float(rng.uniform(0.05, 0.2)),
                         c_max=float(rng.uniform(1.0, 5.0)))
    slots = []
    for _ in range(n):
        r = float(rng.uniform(1.0, 10.0))
        slots.append(active(r, z=r + float(rng.uniform(0.0, 5.0)), m=R + 5))
    return config, StationState(0, tuple(slots))


def test_backends_and_engines_agree():
    """Test 25: Branch-and-bound, HiGHS MILP and both LP engines agree"""
    from optimizer_service import solve, solve_lp

    rng = np.random.default_rng(12)
    for _ in range(6):
        config, state = random_instance(rng, n=2, R=2)
        program = single_scenario_program(config, state)
        bnb = solve(program, backend="bnb", lp_engine="highs")
        dense = solve(program, backend="bnb", lp_engine="simplex")
        milp = solve(program, backend="highs-milp")
        assert bnb.objective == pytest.approx(milp.objective, rel=1e-6, abs=1e-6)
        assert dense.objective == pytest.approx(bnb.objective, rel=1e-6, abs=1e-6)
        _, _, highs_bound = solve_lp(program, engine="highs")
        _, _, simplex_bound = solve_lp(program, engine="simplex")
        assert simplex_bound == pytest.approx(highs_bound, rel=1e-7, abs=1e-7)
    print("✅ PASS: Solver backends agree")


def test_node_budget_reports_gap():
    """Test 26: A budget of one node returns an incumbent and a finite gap"""
    from optimizer_service import solve

    rng = np.random.default_rng(5)
    config, state = random_instance(rng, n=2, R=3)
    program = single_scenario_program(config, state)
    solution = solve(program, budget=1, gap=1e-12)
    assert solution.status in ("optimal", "node-budget-exhausted")
    assert solution.x is not None and np.isfinite(solution.gap)
    assert solution.nodes <= 1
    print("✅ PASS: Node budget")


def test_table_load_counts_against_threshold():
    """Test 27: Average-load headroom switches the overrun indicator on"""
    from optimizer_service import build_program, solve
    from policy_workflow import AvgLoadTable
    from scenario_service import request_based_forecast

    config = make_config(n=2, R=1, c_max=3.2)
    state = StationState(40, (active(10.0), SlotState(active=False)))
    indicators = []
    for load in (0.0, 1.5):
        table = AvgLoadTable(kwh=np.full((2, 24), load), counts=np.ones((2, 24)))
        program = build_program(state, request_based_forecast(state, empty_input(40, 2), table, 1, CLOCK), config)
        solution = solve(program)
        indicators.append(int(round(solution.x[program.b_index[0, 1]])))
    assert indicators == [0, 1]
    print("✅ PASS: Uncontrollable load in the threshold row")


def test_lp_dump(tmp_path):
    """Test 28: LP file dump"""
    from optimizer_service import write_lp_file

    config = make_config(n=2, R=1, c_max=2.0)
    program = single_scenario_program(config, StationState(0, (active(5.0), active(4.0))))
    path = tmp_path / "program.lp"
    write_lp_file(program, str(path))
    text = path.read_text()
    assert text.startswith("\\ evcs program t0=0 R=1")
    assert "Binaries" in text and "b_k0_t0" in text
    assert text.rstrip().endswith("End")
    print("✅ PASS: LP dump")


def test_trivial_step_and_policy_errors():
    """Test 29: No active slot short-circuits the solve; bad inputs raise"""
    from policy_workflow import AvgLoadTable, build_avg_load_table, make_policy, make_pmpc_policy, make_rmpc_policy
    from data_service import DiscretizedTrace

    config = make_config(n=2)
    trace = make_trace([raw("slot-0", 30, 40, 5.0)], config)
    decision = make_pmpc_policy(trace, config).decide(empty_station(2, 0), trace.inputs[0], clock=BASE)
    assert decision.action == zero_action(2)
    assert decision.diagnostics["status"] == "trivial"
    assert decision.diagnostics["solve_ms"] >= 0

    with pytest.raises(DomainError):
        make_policy("fifo", config)
    with pytest.raises(DomainError):
        make_policy("mpc", config)
    with pytest.raises(DomainError):
        make_rmpc_policy(AvgLoadTable(np.zeros((3, 24)), np.zeros((3, 24))), config)
    with pytest.raises(DomainError):
        build_avg_load_table(DiscretizedTrace(BASE, 15, (), ("A", "B")), config)

    idle = DiscretizedTrace(BASE, 15, tuple(empty_input(t, 2) for t in range(96)), ("A", "B"))
    table = build_avg_load_table(idle, config)
    assert table.kwh.shape == (2, 24) and not table.kwh.any()
    print("✅ PASS: Trivial step and policy errors")


def test_policy_decision_diagnostics():
    """Test 30: 2S reports its scenarios and an action feasible for the true state"""
    from policy_workflow import make_2s_policy

    config = make_config(n=2, R=6)
    state = StationState(40, (active(8.0, m=8, g=3), SlotState(active=False, sojourn_steps=2)))
    policy = make_2s_policy(constant_model(), config, K=10, K_prime=2, seed=3)
    decision = policy.decide(state, empty_input(40, 2), clock=CLOCK)
    assert validate_action(state, decision.action, config) == []
    diagnostics = decision.diagnostics
    assert diagnostics["scenarios_sampled"] == 10
    assert 1 <= diagnostics["scenarios"] <= 2
    assert sum(diagnostics["weights"]) == pytest.approx(1.0)
    assert diagnostics["status"] in ("optimal", "node-budget-exhausted")
    assert "gap" in diagnostics and "solve_ms" in diagnostics
    assert decision.action.energy_kwh[1] == 0.0
    print("✅ PASS: Policy diagnostics")


def test_simulate_empty_trace():
    """Test 31: A trace without sessions costs nothing"""
    from data_service import DiscretizedTrace
    from policy_workflow import make_pmpc_policy
    from simulation_service import compute_metrics, simulate

    config = make_config(n=2)
    trace = DiscretizedTrace(BASE, 15, tuple(empty_input(t, 2) for t in range(96)), ("A", "B"))
    result = simulate(trace, make_pmpc_policy(trace, config), config, verbose=False)
    metrics = compute_metrics(result)
    assert len(result.steps) == 96
    assert metrics.electricity_cost_eur == 0.0
    assert metrics.sessions == 0
    assert metrics.filling_rate_pct is None and metrics.full_satisfaction_rate_pct is None
    print("✅ PASS: Empty trace simulation")


def test_simulate_single_session_full_fill(tmp_path):
    """Test 32: One satisfiable session under P-MPC is filled completely"""
    from policy_workflow import make_pmpc_policy
    from simulation_service import compute_metrics, simulate

    config = make_config(n=1, R=8)
    trace = make_trace([raw("slot-0", 40, 48, 5.0, announced_steps=8)], config)
    log_path = str(tmp_path / "run.jsonl")
    result = simulate(trace, make_pmpc_policy(trace, config), config, log_path=log_path, verbose=False,
                      header={"policy": "pmpc"})
    metrics = compute_metrics(result)
    assert metrics.sessions == 1
    assert metrics.filling_rate_pct == pytest.approx(100.0)
    assert metrics.full_satisfaction_rate_pct == 100.0

    totals = result.totals
    assert metrics.electricity_cost_eur == pytest.approx(totals["energy_cost_eur"] + totals["penalty_eur"], abs=1e-6)
    lines = open(log_path).read().splitlines()
    assert json.loads(lines[0]) == {"policy": "pmpc"}
    assert len(lines) == 1 + trace.n_steps
    assert json.loads(lines[41])["t"] == 40
    print("✅ PASS: Single session simulation")


def test_simulate_rejects_infeasible_policy(tmp_path):
    """Test 33: An infeasible action aborts the run with a context dump"""
    from evcs_model import InfeasibleActionError
    from policy_workflow import PolicyDecision
    from simulation_service import simulate

    class Greedy:
        name = "greedy"

        def decide(self, state, observed_w, history=None, clock=None, seed=None):
            return PolicyDecision(ControlAction(tuple([3.0] * state.n)), {})

    config = make_config(n=1)
    trace = make_trace([raw("slot-0", 4, 10, 5.0)], config)
    log_path = tmp_path / "run.jsonl"
    with pytest.raises(InfeasibleActionError) as error:
        simulate(trace, Greedy(), config, log_path=str(log_path), verbose=False)
    assert error.value.context["t"] == 0
    assert (tmp_path / "infeasible_t0.json").exists()
    print("✅ PASS: Infeasible action abort")


def test_metrics_per_session():
    """Test 34: Filling and full-satisfaction rates average over sessions"""
    from evcs_model import SessionEndRecord
    from simulation_service import RunResult, compute_metrics

    result = RunResult("x", 1.0, 1, sessions=[
        SessionEndRecord(0, 0, 5, 10.0, 0.0),
        SessionEndRecord(1, 0, 5, 10.0, 5.0),
    ])
    metrics = compute_metrics(result)
    assert metrics.filling_rate_pct == pytest.approx(75.0)
    assert metrics.full_satisfaction_rate_pct == pytest.approx(50.0)
    assert metrics.delivered_kwh == pytest.approx(15.0)
    print("✅ PASS: Per-session metrics")


def test_experiment_config(tmp_path):
    """Test 35: YAML document, overrides, validation and hash"""
    from config import ExperimentConfig, load_experiment_config

    path = tmp_path / "experiment.yaml"
    path.write_text("policies: [mpc, pmpc]\nalphas: [500, 5000]\nsynthetic: {n_slots: 3, days: 2}\n"
                    "station: {c_max: 5.0}\n")
    config = load_experiment_config(str(path), {"horizon": 12, "output_dir": None})
    assert config.policies == ["mpc", "pmpc"]
    assert config.horizon == 12
    station = config.station_config(5000.0, n=3)
    assert station.n == 3 and station.c_max == 5.0 and station.alpha == 5000.0 and station.horizon_R == 12
    assert config.config_hash() == load_experiment_config(str(path), {"horizon": 12}).config_hash()
    assert len(config.config_hash()) == 12

    path.write_text("policies: [mpc]\nsynthetic: {}\nbogus: 1\n")
    with pytest.raises(ConfigError):
        load_experiment_config(str(path))
    with pytest.raises(ConfigError):
        ExperimentConfig(policies=["fifo"], synthetic={}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(synthetic=None).validate()
    print("✅ PASS: Experiment config")


def test_sweep_rows_relative_to_oracle():
    """Test 36: Oracle rows show 0% and differences follow the oracle"""
    from report_service import build_sweep_rows
    from simulation_service import MetricsSummary
    from sweep_state import CellResult

    def cell(policy, cost, filling, error=""):
        metrics = None if error else MetricsSummary(cost, filling, filling, 0, 1.0, sessions=2)
        return CellResult(policy, 500.0, 1, 1, metrics=metrics, error=error, error_type="X" if error else "")

    rows = build_sweep_rows([cell("mpc", 110.0, 80.0), cell("pmpc", 100.0, 100.0), cell("rmpc", 0, 0, "boom")])
    by_policy = {row["policy"]: row for row in rows}
    assert by_policy["pmpc"]["cost_rel_pmpc_pct"] == 0.0
    assert by_policy["mpc"]["cost_rel_pmpc_pct"] == pytest.approx(10.0)
    assert by_policy["mpc"]["filling_rel_pmpc_pct"] == pytest.approx(-20.0)
    assert by_policy["rmpc"]["status"] == "failed" and "boom" in by_policy["rmpc"]["error"]
    print("✅ PASS: Sweep rows")


def test_emit_reports_empty_and_unwritable(tmp_path):
    """Test 37: Empty results give header-only files; unwritable directory raises"""
    from report_service import emit_reports

    files = emit_reports([], [], str(tmp_path / "out"), "abc123", seeds=([1], [2]))
    table = open(files["sweep_table"]).read().splitlines()
    assert table[0] == "# config_hash=abc123 world_seeds=[1] policy_seeds=[2]"
    assert table[1].startswith("policy,alpha,world_seed,policy_seed,status")
    assert len(table) == 2
    assert len(open(files["unserved_histogram"]).read().splitlines()) == 2

    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        emit_reports([], [], str(blocker / "sub"), "abc123")
    print("✅ PASS: Report edge cases")


def test_small_sweep_end_to_end(tmp_path):
    """Test 38: Four policies on a deterministic synthetic world"""
    from config import ExperimentConfig
    from dataclasses import asdict
    from sweep_workflow import run_sweep

    config = ExperimentConfig(
        policies=["2s", "mpc", "rmpc", "pmpc"], alphas=[5000.0], horizon=6, samples_K=4, clusters_K_prime=2,
        policy_seeds=[1], world_seeds=[1], synthetic=asdict(deterministic_world()), output_dir=str(tmp_path),
        max_workers=1,
    ).validate()
    final_state = run_sweep(config)
    assert final_state["stage"] == "complete"
    rows = final_state["rows"]
    assert len(rows) == 4
    assert all(row["status"] == "ok" for row in rows)
    oracle = next(row for row in rows if row["policy"] == "pmpc")
    assert oracle["cost_rel_pmpc_pct"] == 0.0
    assert oracle["sessions"] == 4

    frame = pd.read_csv(final_state["report_files"]["unserved_distribution"], comment="#")
    assert len(frame) == sum(row["sessions"] for row in rows)
    histogram = pd.read_csv(final_state["report_files"]["unserved_histogram"], comment="#")
    assert histogram["sessions"].sum() == len(frame)
    assert os.path.exists(os.path.join(str(tmp_path), "runs", "pmpc_a5000_w1_p1_steps.jsonl"))
    print("✅ PASS: End-to-end sweep")


def test_cli_error_line(tmp_path, capsys):
    """Test 39: CLI failures print one machine-parsable line"""
    from main import main

    code = main(["train", "--trace", str(tmp_path / "missing.csv")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("ERROR code=FileNotFoundError message=")

    with pytest.raises(SystemExit) as exit_info:
        main(["simulate"])
    assert exit_info.value.code == 2
    print("✅ PASS: CLI errors")


def test_cli_synth_train_simulate(tmp_path):
    """Test 40: synth, train and simulate chained through files"""
    from main import main

    config_path = tmp_path / "experiment.yaml"
    config_path.write_text("synthetic: {n_slots: 2, days: 3}\nhorizon: 4\n")
    out = str(tmp_path)
    assert main(["synth", "--config", str(config_path), "--seed", "2", "--out", out]) == 0
    assert main(["train", "--trace", os.path.join(out, "synthetic_trace.csv"), "--out", out]) == 0
    assert main(["simulate", "--config", str(config_path), "--policy", "mpc", "--alpha", "500", "--seed", "1",
                 "--trace", os.path.join(out, "synthetic_trace.csv"),
                 "--model", os.path.join(out, "behavior_model.json"), "--out", out]) == 0
    metrics = json.load(open(os.path.join(out, "mpc_a500_p1_metrics.json")))
    assert metrics["policy"] == "mpc" and metrics["alpha"] == 500.0
    assert "mean_solve_ms" not in metrics
    print("✅ PASS: CLI chain")


def test_sweep_state_management():
    """Test 41: Sweep state creation, reducers and summary"""
    from config import ExperimentConfig
    from sweep_state import CellResult, add_to_list, create_sweep_state, get_sweep_summary, update_sweep_stage

    config = ExperimentConfig(policies=["mpc"], synthetic={})
    state = create_sweep_state(config)
    assert state["sweep_id"] == f"SWEEP-{config.config_hash()}", "Invalid sweep ID format"
    assert state["stage"] == "started", "Incorrect initial stage"
    assert update_sweep_stage(state, "data_loaded")["stage"] == "data_loaded", "Stage not updated correctly"

    assert add_to_list(None, ["mpc"]) == ["mpc"]
    assert add_to_list(["mpc"], ["pmpc"]) == ["mpc", "pmpc"]
    state["cell_results"] = [CellResult("mpc", 500.0, 1, 1, error="x")]
    assert "1 cells, 1 failed" in get_sweep_summary(state)
    print(f"✅ PASS: Sweep state management - ID: {state['sweep_id']}")


def test_featurize_contexts():
    """Test 42: Context from the pre-transition state and the step clock"""
    from behavior_service import TransitionContext, featurize

    tuesday = pd.Timestamp("2024-01-02 09:15", tz="UTC")
    state = StationState(5, (active(3.0, g=2), SlotState(active=False, sojourn_steps=4)))
    assert featurize(state, 1, tuesday) == TransitionContext(False, 4, 9, 1, 1)

    # a slot that just started charging restarts its sojourn clock
    w = ExogenousInput(5, (SlotEvent(), SlotEvent(start=True, request_kwh=5.0, announced_duration_steps=6)))
    after = step(state, zero_action(2), w, make_config(n=2)).state
    fresh = featurize(after, 1, tuesday + pd.Timedelta(minutes=15))
    assert fresh.prev_active and fresh.sojourn_steps == 0

    idle = empty_station(2, 0)
    first, second = featurize(idle, 0, tuesday), featurize(idle, 1, tuesday)
    assert (first.prev_active, first.sojourn_steps, first.hour_of_day, first.weekday) == \
        (second.prev_active, second.sojourn_steps, second.hour_of_day, second.weekday)
    assert (first.slot_index, second.slot_index) == (0, 1)
    with pytest.raises(DomainError):
        featurize(idle, 2, tuesday)
    print("✅ PASS: Featurization")


def test_laplace_and_empty_cells():
    """Test 43: Laplace smoothing, empty cells and the kWh mean"""
    from behavior_service import (BehaviorModel, BinnedFrequencyEstimator, BinnedMeanRegressor, BinningConfig,
                                  TransitionContext, p_start, predict_kwh)

    binning = BinningConfig(laplace_alpha=1.0, backoff_min_count=0)
    cell = np.tile([5, 10, 0, 0], (10, 1))
    starts = BinnedFrequencyEstimator(binning).fit(cell, [1, 1, 1] + [0] * 7)
    kwh = BinnedMeanRegressor(binning).fit(cell[:3], [4.0, 6.0, 8.0])
    model = BehaviorModel(starts, starts, kwh, binning)

    ctx = TransitionContext(False, 5, 10, 0, 0)
    assert p_start(model, ctx) == pytest.approx(1 / 3)
    assert starts.lookup(ctx) == (pytest.approx(1 / 3), 10, 0)
    assert predict_kwh(model, ctx) == pytest.approx(6.0)

    empty = starts.lookup(TransitionContext(False, 5, 22, 3, 0))
    assert empty.count == 0 and empty.value == pytest.approx(0.5)
    unfitted = BinnedFrequencyEstimator(binning).fit(np.zeros((0, 4)), [])
    assert unfitted.predict(ctx) == pytest.approx(0.5)
    print("✅ PASS: Laplace estimates")


def test_fixed_idle_gap_is_learned():
    """Test 44: A slot that always restarts 8 steps after freeing gets p_start near 1 at g=8 only"""
    from behavior_service import TransitionContext, fit

    config = make_config(n=1)
    # 5-step sessions with 8 idle steps in between: one start every 14 steps over a week
    sessions = [raw("slot-0", s, s + 5, 6.0, announced_steps=5) for s in range(8, 672, 14)]
    trace = make_trace(sessions, config)
    assert trace.n_steps == 672 and len(trace.sessions) == 48

    model = fit(trace)
    assert model.p_start(TransitionContext(False, 8, 10, 2, 0)) > 0.95
    for g in range(8):
        assert model.p_start(TransitionContext(False, g, 10, 2, 0)) < 0.05, f"g={g}"
    print("✅ PASS: Fixed idle gap")


def test_config_hash_ignores_execution_settings():
    """Test 45: Output directory and worker count do not change the hash"""
    from config import ExperimentConfig

    base = ExperimentConfig(policies=["mpc"], alphas=[500.0], synthetic={}, output_dir="a", max_workers=1)
    moved = ExperimentConfig(policies=["mpc"], alphas=[500.0], synthetic={}, output_dir="b", max_workers=8)
    other = ExperimentConfig(policies=["mpc"], alphas=[5000.0], synthetic={}, output_dir="a", max_workers=1)
    solver = ExperimentConfig(policies=["mpc"], alphas=[500.0], synthetic={}, solver={"backend": "highs-milp"})
    assert base.config_hash() == moved.config_hash()
    assert base.config_hash() != other.config_hash()
    assert base.config_hash() != solver.config_hash()
    print("✅ PASS: Config hash")


def test_station_overrides_and_solver_section():
    """Test 46: e_max override rescales the threshold; solver keys are checked"""
    from config import DEFAULT_THRESHOLD_SHARE, ExperimentConfig

    scaled = ExperimentConfig(station={"n": 4, "e_max": 2.0}, synthetic={}).station_config(500.0)
    assert scaled.e_max == 2.0
    assert scaled.c_max == pytest.approx(DEFAULT_THRESHOLD_SHARE * 4 * 2.0)
    assert scaled.c_max == pytest.approx(0.64)
    kept = ExperimentConfig(station={"n": 4, "e_max": 2.0, "c_max": 1.5}, synthetic={}).station_config(500.0)
    assert kept.c_max == 1.5

    ExperimentConfig(synthetic={}, solver={"backend": "highs-milp", "gap": 1e-4}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(synthetic={}, solver={"backend": "cplex"}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(synthetic={}, solver={"threads": 4}).validate()
    print("✅ PASS: Station overrides")


def test_decision_dump_writes_program_and_scenarios(tmp_path, monkeypatch):
    """Test 47: With a dump directory set every solved step leaves its program and scenarios"""
    import control_nodes
    from policy_workflow import make_pmpc_policy

    monkeypatch.setattr(control_nodes, "DUMP_LP_DIR", str(tmp_path))
    config = make_config(n=2)
    trace = make_trace([raw("slot-0", 0, 6, 5.0, announced_steps=6)], config)
    state = StationState(1, (active(5.0, m=5), SlotState(active=False, sojourn_steps=1)))
    decision = make_pmpc_policy(trace, config).decide(state, trace.inputs[1], clock=BASE)
    assert decision.diagnostics["status"] in ("optimal", "node-budget-exhausted")

    program = (tmp_path / "pmpc_t000001.lp").read_text()
    assert program.startswith("\\ evcs program t0=1")
    lines = (tmp_path / "pmpc_t000001_k0.scn").read_text().splitlines()
    assert lines[0].startswith("# evcs-scenario t0=1 R=3")
    assert lines[1] == "t slot a q k delta"
    print("✅ PASS: Decision dump")


def test_policy_sees_observed_prefix():
    """Test 48: History exposes exactly the inputs up to the current step"""
    from policy_workflow import PolicyDecision
    from simulation_service import simulate

    config = make_config(n=1)
    trace = make_trace([raw("slot-0", 4, 8, 3.0)], config)

    class Recorder:
        name = "recorder"

        def __init__(self):
            self.seen = []

        def decide(self, state, observed_w, history=None, clock=None, seed=None):
            observed = history.observed()
            assert observed[-1] is observed_w
            self.seen.append(len(observed))
            return PolicyDecision(zero_action(1), {"status": "trivial"})

    recorder = Recorder()
    simulate(trace, recorder, config, verbose=False)
    assert recorder.seen == list(range(1, trace.n_steps + 1))
    print("✅ PASS: Observed history")


def test_early_disconnections_counted():
    """Test 49: Sessions leaving before their announced time are counted at discretization"""
    config = make_config(n=2)
    trace = make_trace([raw("slot-0", 10, 14, 5.0, announced_steps=8), raw("slot-1", 10, 18, 5.0, announced_steps=8),
                        raw("slot-0", 30, 40, 5.0)], config)
    early = [r.early_disconnection for r in trace.sessions]
    assert early == [True, False, False]
    assert trace.metadata["early_disconnections"] == 1
    print("✅ PASS: Early disconnection count")


def test_synthetic_world_drawn_once():
    """Test 50: Discretizing drawn sessions matches the one-call synthetic trace"""
    from data_service import SyntheticConfig, discretize_synthetic, generate_synthetic, synthetic_trace

    gen = SyntheticConfig(n_slots=2, days=2)
    config = make_config(n=2)
    sessions, truth = generate_synthetic(gen, 5)
    trace = discretize_synthetic(sessions, gen, config)
    reference, _ = synthetic_trace(gen, 5, config)
    assert trace.inputs == reference.inputs
    assert trace.sessions == reference.sessions
    print("✅ PASS: Synthetic discretization")


if __name__ == "__main__":
    # Run pytest with verbose output
    pytest.main([__file__, "-v", "--tb=short"])
