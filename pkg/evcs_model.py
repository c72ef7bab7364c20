#!/usr/bin/env python3
"""
EVCS Station Model
Domain types, station dynamics, feasibility checks and the stage cost.
Single source of truth for the physics and economics of the station.
"""

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

# Remaining energies below this are float dust and clamp to zero
ZERO_TOLERANCE = 1e-6
FEASIBILITY_TOLERANCE = 1e-9


class EVCSError(Exception):
    """Base class for every error raised by the testbed"""


class ConfigError(EVCSError, ValueError):
    """Invalid station or experiment configuration"""


class DomainError(EVCSError, ValueError):
    """Operation called outside its domain"""


class ModelConsistencyError(EVCSError):
    """Exogenous input contradicts the station state"""


class BuildError(EVCSError):
    """Scenario set and state cannot be turned into a program"""


class DataFormatError(EVCSError):
    """Session data could not be parsed"""


class ConstraintViolationError(EVCSError):
    """Action breaks the feasibility constraints"""

    def __init__(self, violations):
        self.violations = list(violations)
        slots = sorted({v.slot for v in self.violations})
        details = "; ".join(v.message for v in self.violations[:5])
        super().__init__(f"{len(self.violations)} violation(s) on slots {slots}: {details}")


class InfeasibleActionError(EVCSError):
    """A policy returned an action the simulator rejects"""

    def __init__(self, message, context=None):
        self.context = context or {}
        super().__init__(message)


class PolicyError(EVCSError):
    """A policy failed to produce an action at a given step"""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


@dataclass(frozen=True)
class StationConfig:
    """Physical and economic parameters of the station"""
    n: int
    dt_minutes: int
    e_max: float
    c_max: float
    xi: float
    eta: float
    alpha: float
    price_schedule: Tuple[float, ...]
    horizon_R: int = 40

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if self.dt_minutes <= 0 or (24 * 60) % self.dt_minutes != 0:
            raise ConfigError("dt_minutes must divide a day")
        if self.e_max <= 0:
            raise ConfigError("e_max must be positive")
        if self.c_max <= 0:
            raise ConfigError("c_max must be positive")
        if not 0 < self.eta <= 1:
            raise ConfigError("eta must be in (0, 1]")
        if self.xi <= 0:
            raise ConfigError("xi must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.horizon_R < 1:
            raise ConfigError("horizon_R must be at least 1")
        if len(self.price_schedule) != self.steps_per_day:
            raise ConfigError(
                f"price_schedule needs {self.steps_per_day} entries, got {len(self.price_schedule)}")
        if any(p < 0 for p in self.price_schedule):
            raise ConfigError("prices must be nonnegative")

    @property
    def steps_per_day(self):
        return 24 * 60 // self.dt_minutes

    def price_at(self, t):
        """Price of step t; traces start at local midnight"""
        return self.price_schedule[t % self.steps_per_day]


def flat_price_schedule(dt_minutes, price):
    return tuple([float(price)] * (24 * 60 // dt_minutes))


@dataclass(frozen=True, slots=True)
class SlotState:
    """State of one charging slot (o, r, z, m, g)"""
    active: bool
    remaining_kwh: float = 0.0
    initial_request_kwh: float = 0.0
    announced_steps_left: Optional[int] = None
    sojourn_steps: int = 0

    def __post_init__(self):
        if self.sojourn_steps < 0:
            raise DomainError("sojourn_steps must be nonnegative")
        if not self.active:
            if self.remaining_kwh != 0 or self.announced_steps_left is not None:
                raise DomainError("inactive slot must have no remaining energy and no announced end")
        else:
            if self.initial_request_kwh <= 0:
                raise DomainError("active slot needs a positive initial request")
            if not 0 <= self.remaining_kwh <= self.initial_request_kwh + FEASIBILITY_TOLERANCE:
                raise DomainError("remaining energy must lie in [0, initial request]")


INACTIVE_SLOT = SlotState(active=False)


@dataclass(frozen=True)
class StationState:
    """Station state x_t"""
    t: int
    slots: Tuple[SlotState, ...]

    @property
    def n(self):
        return len(self.slots)

    def active_flags(self):
        return [slot.active for slot in self.slots]

    def active_count(self):
        return sum(1 for slot in self.slots if slot.active)


def empty_station(n, t=0):
    return StationState(t=t, slots=tuple([INACTIVE_SLOT] * n))


@dataclass(frozen=True, slots=True)
class SlotEvent:
    """Per-slot exogenous input (a, q, k, delta)"""
    start: bool = False
    end: bool = False
    request_kwh: float = 0.0
    announced_duration_steps: int = 0

    def __post_init__(self):
        if self.start and self.end:
            raise DomainError("a slot cannot start and end a session at the same step")
        if self.start and (self.request_kwh <= 0 or self.announced_duration_steps < 1):
            raise DomainError("a session start needs a positive request and announced duration")


NO_EVENT = SlotEvent()


@dataclass(frozen=True)
class ExogenousInput:
    """Exogenous input w_t for all slots"""
    t: int
    events: Tuple[SlotEvent, ...]


def empty_input(t, n):
    return ExogenousInput(t=t, events=tuple([NO_EVENT] * n))


@dataclass(frozen=True)
class ControlAction:
    """Energy delivered by each slot during one step (kWh)"""
    energy_kwh: Tuple[float, ...]


def zero_action(n):
    return ControlAction(tuple([0.0] * n))


@dataclass(frozen=True)
class StageCostBreakdown:
    energy_cost_eur: float
    penalty_eur: float
    dissatisfaction_units: float
    total_weighted_eur: float
    load_kwh: float = 0.0


@dataclass(frozen=True)
class SessionEndRecord:
    """Emitted for every session that ends"""
    slot: int
    start_step: int
    end_step: int
    initial_request_kwh: float
    final_remaining_kwh: float
    announced_elapsed: bool = False

    @property
    def satisfaction(self):
        return 1.0 - self.final_remaining_kwh / self.initial_request_kwh

    @property
    def delivered_kwh(self):
        return self.initial_request_kwh - self.final_remaining_kwh


@dataclass(frozen=True)
class Violation:
    slot: int
    kind: str
    message: str


class StepResult(NamedTuple):
    state: StationState
    cost: StageCostBreakdown
    ended: Tuple[SessionEndRecord, ...] = ()
    ignored_end_events: int = 0


def station_load(action: ControlAction) -> float:
    """Station consumption c_t = sum of slot energies"""
    return math.fsum(action.energy_kwh)


def satisfaction(slot: SlotState) -> float:
    """Satisfaction chi = 1 - r / z of an active slot"""
    if not slot.active or slot.initial_request_kwh <= 0:
        raise DomainError("satisfaction is only defined for an active slot with a positive request")
    return 1.0 - slot.remaining_kwh / slot.initial_request_kwh


def validate_action(state: StationState, action: ControlAction, config: StationConfig) -> List[Violation]:
    """Full list of constraint violations; empty means the action is feasible"""
    if len(action.energy_kwh) != state.n or state.n != config.n:
        return [Violation(-1, "length", f"action has {len(action.energy_kwh)} entries, station has {config.n} slots")]

    violations = []
    tol = FEASIBILITY_TOLERANCE
    for i, (slot, e) in enumerate(zip(state.slots, action.energy_kwh)):
        if not math.isfinite(e):
            violations.append(Violation(i, "not finite", f"slot {i}: energy {e} is not finite"))
            continue
        if e < -tol:
            violations.append(Violation(i, "negative", f"slot {i}: negative energy {e}"))
        if e > config.e_max + tol:
            violations.append(Violation(i, "above e_max", f"slot {i}: energy {e} above e_max {config.e_max}"))
        if not slot.active:
            if e > tol:
                violations.append(Violation(i, "inactive slot charged", f"slot {i}: inactive slot charged {e}"))
        elif config.eta * e > slot.remaining_kwh + tol:
            violations.append(Violation(
                i, "overcharge",
                f"slot {i}: overcharge, eta*e={config.eta * e:.6g} > r={slot.remaining_kwh:.6g}"))
    return violations


def _charged_remaining(state, action, config):
    remaining = []
    for slot, e in zip(state.slots, action.energy_kwh):
        if not slot.active:
            remaining.append(0.0)
            continue
        r = slot.remaining_kwh - config.eta * max(e, 0.0)
        remaining.append(0.0 if r < ZERO_TOLERANCE else r)
    return remaining


def _cost_of(state, action, remaining, config):
    load = station_load(action)
    energy_cost = config.price_at(state.t) * load
    penalty = config.xi if load > config.c_max else 0.0
    dissatisfaction = math.fsum(
        r / slot.initial_request_kwh
        for slot, r in zip(state.slots, remaining) if slot.active
    )
    total = energy_cost + penalty + config.alpha * dissatisfaction
    return StageCostBreakdown(energy_cost, penalty, dissatisfaction, total, load)


def stage_cost(state: StationState, action: ControlAction, config: StationConfig) -> StageCostBreakdown:
    """Stage cost L_t evaluated on the post-charge state"""
    violations = validate_action(state, action, config)
    if violations:
        raise ConstraintViolationError(violations)
    return _cost_of(state, action, _charged_remaining(state, action, config), config)


def step(state: StationState, action: ControlAction, w: ExogenousInput, config: StationConfig) -> StepResult:
    """Station dynamics: charge, cost, session ends, session starts, clocks"""
    violations = validate_action(state, action, config)
    if violations:
        raise ConstraintViolationError(violations)
    if w.t != state.t:
        raise ModelConsistencyError(f"input for step {w.t} applied to state at step {state.t}")
    if len(w.events) != state.n:
        raise ModelConsistencyError(f"input has {len(w.events)} slots, station has {state.n}")

    remaining = _charged_remaining(state, action, config)
    cost = _cost_of(state, action, remaining, config)

    slots = []
    ended = []
    ignored_ends = 0
    for i, (slot, event) in enumerate(zip(state.slots, w.events)):
        r = remaining[i]
        still_active = False
        switched = False
        if slot.active:
            elapsed = slot.announced_steps_left is not None and slot.announced_steps_left <= 1
            if event.end or elapsed:
                ended.append(SessionEndRecord(
                    slot=i,
                    start_step=state.t - slot.sojourn_steps - 1,
                    end_step=state.t,
                    initial_request_kwh=slot.initial_request_kwh,
                    final_remaining_kwh=r,
                    announced_elapsed=elapsed and not event.end,
                ))
                switched = True
            else:
                still_active = True
        elif event.end:
            ignored_ends += 1

        if event.start:
            if still_active:
                raise ModelConsistencyError(f"slot {i}: session start on an active slot at step {state.t}")
            slots.append(SlotState(
                active=True,
                remaining_kwh=event.request_kwh,
                initial_request_kwh=event.request_kwh,
                announced_steps_left=event.announced_duration_steps,
                sojourn_steps=0,
            ))
        elif still_active:
            m = slot.announced_steps_left
            slots.append(SlotState(
                active=True,
                remaining_kwh=r,
                initial_request_kwh=slot.initial_request_kwh,
                announced_steps_left=None if m is None else m - 1,
                sojourn_steps=slot.sojourn_steps + 1,
            ))
        elif switched:
            slots.append(INACTIVE_SLOT)
        else:
            slots.append(SlotState(active=False, sojourn_steps=slot.sojourn_steps + 1))

    next_state = StationState(t=state.t + 1, slots=tuple(slots))
    return StepResult(next_state, cost, tuple(ended), ignored_ends)


def close_sessions(state: StationState) -> Tuple[SessionEndRecord, ...]:
    """End records for sessions still active when a run stops"""
    return tuple(
        SessionEndRecord(
            slot=i,
            start_step=state.t - slot.sojourn_steps - 1,
            end_step=state.t,
            initial_request_kwh=slot.initial_request_kwh,
            final_remaining_kwh=slot.remaining_kwh,
        )
        for i, slot in enumerate(state.slots) if slot.active
    )
