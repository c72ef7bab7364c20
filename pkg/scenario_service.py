#!/usr/bin/env python3
"""
Scenario Engine
Turns a behavior model and the current station state into the uncertainty
inputs of each policy: sampled and reduced scenario sets, a point forecast,
a request-based forecast and a perfect forecast
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from behavior_service import BehaviorModel, TransitionContext, p_end, p_start, predict_kwh
from evcs_model import (
    NO_EVENT, BuildError, DomainError, ExogenousInput, SlotEvent, StationState, empty_input,
)

KMEANS_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class Scenario:
    """Inputs w_t0..w_t0+R plus the activity profile they imply"""
    t0: int
    inputs: Tuple[ExogenousInput, ...]
    weight: float
    active: np.ndarray          # (R+1, n) slot active at x_t
    z: np.ndarray               # (R+1, n) initial request of the session at x_t
    new_session: np.ndarray     # (R+1, n) session started by the previous step's input
    uncontrollable_kwh: np.ndarray  # (R+1, n)
    source: str = ""
    sample_index: Optional[int] = None

    @property
    def R(self):
        return len(self.inputs) - 1

    @property
    def n(self):
        return self.active.shape[1]

    def event_key(self):
        """Hashable identity of the scenario's data"""
        return (self.t0, self.inputs, self.uncontrollable_kwh.tobytes())


@dataclass(frozen=True)
class ReducedScenarioSet:
    scenarios: Tuple[Scenario, ...]
    weights: Tuple[float, ...]
    members: Tuple[Tuple[int, ...], ...] = ()

    def __len__(self):
        return len(self.scenarios)


def single_scenario_set(scenario: Scenario) -> ReducedScenarioSet:
    return ReducedScenarioSet((replace(scenario, weight=1.0),), (1.0,), ((0,),))


def horizon_calendar(clock, dt_minutes, R):
    """Hour-of-day and weekday for steps t0..t0+R"""
    index = pd.date_range(pd.Timestamp(clock), periods=R + 1, freq=pd.Timedelta(minutes=dt_minutes))
    return np.asarray(index.hour), np.asarray(index.weekday)


def make_scenario(state: StationState, inputs: Sequence[ExogenousInput], weight=1.0, uncontrollable_kwh=None,
                  source="", sample_index=None) -> Scenario:
    """Scenario from explicit inputs, replaying starts, ends and announced elapses"""
    inputs = tuple(inputs)
    if not inputs:
        raise BuildError("scenario needs at least the observed input")
    if inputs[0].t != state.t:
        raise BuildError(f"scenario starts at step {inputs[0].t}, state is at step {state.t}")
    if not 0 < weight <= 1:
        raise BuildError(f"scenario weight {weight} outside (0, 1]")

    steps, n = len(inputs), state.n
    active = np.zeros((steps, n), dtype=bool)
    z = np.zeros((steps, n))
    new_session = np.zeros((steps, n), dtype=bool)

    cur_active = [s.active for s in state.slots]
    cur_z = [s.initial_request_kwh if s.active else 0.0 for s in state.slots]
    cur_m = [s.announced_steps_left for s in state.slots]
    cur_new = [False] * n
    for j, w in enumerate(inputs):
        if w.t != state.t + j or len(w.events) != n:
            raise BuildError(f"scenario input {j} does not match step {state.t + j} with {n} slots")
        active[j] = cur_active
        z[j] = cur_z
        new_session[j] = cur_new
        for i, ev in enumerate(w.events):
            ended = cur_active[i] and (ev.end or (cur_m[i] is not None and cur_m[i] <= 1))
            if ev.start:
                if cur_active[i] and not ended:
                    raise BuildError(f"scenario starts a session on active slot {i} at step {w.t}")
                cur_active[i], cur_z[i], cur_m[i], cur_new[i] = True, ev.request_kwh, ev.announced_duration_steps, True
            elif ended:
                cur_active[i], cur_z[i], cur_m[i], cur_new[i] = False, 0.0, None, False
            else:
                cur_new[i] = False
                if cur_active[i] and cur_m[i] is not None:
                    cur_m[i] -= 1

    if uncontrollable_kwh is None:
        uncontrollable_kwh = np.zeros((steps, n))
    return Scenario(state.t, inputs, float(weight), active, z, new_session,
                    np.asarray(uncontrollable_kwh, dtype=float), source, sample_index)


def check_scenario(scenario: Scenario) -> List[str]:
    """Legality problems of a scenario; empty when valid.

    Starts on a still-active slot are rejected by make_scenario already, here
    a start must open a fresh session at the next step.
    """
    problems = []
    if not 0 < scenario.weight <= 1:
        problems.append(f"weight {scenario.weight} outside (0, 1]")
    for j, w in enumerate(scenario.inputs):
        for i, ev in enumerate(w.events):
            if ev.start and j + 1 < len(scenario.inputs) and not (
                    scenario.active[j + 1, i] and scenario.new_session[j + 1, i]):
                problems.append(f"step {w.t}: start on slot {i} does not open a session")
            if ev.end and not scenario.active[j, i]:
                problems.append(f"step {w.t}: end on inactive slot {i}")
            if ev.start and not ev.request_kwh > 0:
                problems.append(f"step {w.t}: session on slot {i} without a request")
    return problems


class _SampledSwitches:
    def __init__(self, draws):
        self.draws = draws

    def switch(self, j, i, p):
        return self.draws[j - 1, i] < p

    def reset(self, i):
        pass


class _MedianSwitches:
    """Switch where the cumulative switch probability first reaches one half"""

    def __init__(self, n):
        self.survival = np.ones(n)

    def switch(self, j, i, p):
        survival = self.survival[i] * (1.0 - p)
        if 1.0 - survival >= 0.5:
            self.survival[i] = 1.0
            return True
        self.survival[i] = survival
        return False

    def reset(self, i):
        self.survival[i] = 1.0


def _forecast_walk(state, observed_w, model, R, clock, dt_minutes, switches, source, sample_index=None):
    if R < 1:
        raise DomainError("horizon R must be at least 1")
    hours, weekdays = horizon_calendar(clock, dt_minutes, R)
    n = state.n
    starts = {}
    ends = set()

    for i in range(n):
        slot, ev = state.slots[i], observed_w.events[i]
        active, sojourn, announced = slot.active, slot.sojourn_steps, slot.announced_steps_left
        ended = active and (ev.end or (announced is not None and announced <= 1))
        if ev.start:
            active, sojourn, announced = True, 0, ev.announced_duration_steps
        elif ended:
            active, sojourn, announced = False, 0, None
        else:
            sojourn += 1
            if active and announced is not None:
                announced -= 1

        open_start = None
        for j in range(1, R + 1):
            ctx = TransitionContext(active, sojourn, int(hours[j]), int(weekdays[j]), i)
            if active:
                if announced is not None and announced <= 1:
                    switched = True
                    switches.reset(i)
                else:
                    switched = switches.switch(j, i, p_end(model, ctx))
                    if switched:
                        ends.add((j, i))
                if switched:
                    if open_start is not None:
                        starts[open_start] = (starts[open_start][0], j - open_start[0])
                        open_start = None
                    active, sojourn, announced = False, 0, None
                else:
                    sojourn += 1
                    if announced is not None:
                        announced -= 1
            elif switches.switch(j, i, p_start(model, ctx)):
                open_start = (j, i)
                starts[open_start] = (predict_kwh(model, ctx), None)
                active, sojourn, announced = True, 0, None
            else:
                sojourn += 1
        if open_start is not None:
            starts[open_start] = (starts[open_start][0], R + 1 - open_start[0])

    inputs = [observed_w]
    for j in range(1, R + 1):
        events = []
        for i in range(n):
            if (j, i) in starts:
                k, duration = starts[(j, i)]
                events.append(SlotEvent(start=True, request_kwh=k, announced_duration_steps=duration))
            elif (j, i) in ends:
                events.append(SlotEvent(end=True))
            else:
                events.append(NO_EVENT)
        inputs.append(ExogenousInput(state.t + j, tuple(events)))
    return make_scenario(state, inputs, 1.0, source=source, sample_index=sample_index)


def sample_scenario(state: StationState, observed_w: ExogenousInput, model: BehaviorModel, R, rng, clock,
                    dt_minutes=15, sample_index=None) -> Scenario:
    """One Monte-Carlo scenario; real sessions end no later than announced"""
    draws = rng.random((R, state.n))
    return _forecast_walk(state, observed_w, model, R, clock, dt_minutes, _SampledSwitches(draws), "sample",
                          sample_index)


def seed_entropy(seed):
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2 ** 63))
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return int(seed)


def sample_set(state, observed_w, model, R, K, seed, clock, dt_minutes=15, max_workers=1) -> List[Scenario]:
    """K independent samples; sample k uses child stream k of the master seed"""
    if K < 1:
        raise DomainError("K must be at least 1")
    children = np.random.SeedSequence(seed_entropy(seed)).spawn(K)

    def draw(k):
        return sample_scenario(state, observed_w, model, R, np.random.default_rng(children[k]), clock,
                               dt_minutes, sample_index=k)

    if max_workers > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(draw, range(K)))
    return [draw(k) for k in range(K)]


def embed(scenario: Scenario) -> np.ndarray:
    """Per-step newly requested kWh followed by per-step active count"""
    new_kwh = np.array([sum(ev.request_kwh for ev in w.events if ev.start) for w in scenario.inputs])
    return np.concatenate([new_kwh, scenario.active.sum(axis=1).astype(float)])


def _random_state(seed):
    entropy = seed_entropy(seed)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0] % (2 ** 31 - 1))


def reduce(scenarios: Sequence[Scenario], K_prime, seed=0) -> ReducedScenarioSet:
    """Cluster K samples into K' representatives weighted by cluster share"""
    K = len(scenarios)
    if not 1 <= K_prime <= K:
        raise DomainError(f"need 1 <= K' <= K, got K'={K_prime}, K={K}")

    if K_prime == K:
        weight = 1.0 / K
        return ReducedScenarioSet(tuple(replace(s, weight=weight) for s in scenarios), tuple([weight] * K),
                                  tuple((k,) for k in range(K)))

    points = np.vstack([embed(s) for s in scenarios])
    kmeans = KMeans(n_clusters=K_prime, init="k-means++", n_init=1, max_iter=KMEANS_MAX_ITER,
                    random_state=_random_state(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        labels = kmeans.fit_predict(points)

    retained = []
    for cluster in range(K_prime):
        members = np.flatnonzero(labels == cluster)
        if members.size == 0:
            continue
        distances = np.linalg.norm(points[members] - kmeans.cluster_centers_[cluster], axis=1)
        nearest = int(members[np.argmin(distances)])
        retained.append((nearest, tuple(int(m) for m in members)))

    retained.sort()
    weights = [len(members) / K for _, members in retained]
    total = sum(weights)
    weights = [w / total for w in weights]
    return ReducedScenarioSet(
        tuple(replace(scenarios[index], weight=w) for (index, _), w in zip(retained, weights)),
        tuple(weights),
        tuple(members for _, members in retained),
    )


def point_forecast(state, observed_w, model, R, clock, dt_minutes=15) -> Scenario:
    """Single deterministic forecast at median switch times"""
    return _forecast_walk(state, observed_w, model, R, clock, dt_minutes, _MedianSwitches(state.n), "point")


def request_based_forecast(state, observed_w, table, R, clock, dt_minutes=15) -> Scenario:
    """Announced ends are trusted, no arrivals, inactive slots draw the average load"""
    if R < 1:
        raise DomainError("horizon R must be at least 1")
    inputs = [observed_w] + [empty_input(state.t + j, state.n) for j in range(1, R + 1)]
    scenario = make_scenario(state, inputs, 1.0, source="requests")
    hours, _ = horizon_calendar(clock, dt_minutes, R)
    load = np.zeros((R + 1, state.n))
    for j in range(1, R + 1):
        idle = ~scenario.active[j]
        load[j, idle] = table.kwh[idle, int(hours[j])]
    return replace(scenario, uncontrollable_kwh=load)


def perfect_forecast(trace, t0, R, state: StationState) -> Scenario:
    """True future inputs, padded with empty inputs past the trace end"""
    if not 0 <= t0 < trace.n_steps:
        raise DomainError(f"step {t0} outside trace of {trace.n_steps} steps")
    inputs = list(trace.inputs[t0:t0 + R + 1])
    inputs += [empty_input(t, state.n) for t in range(t0 + len(inputs), t0 + R + 1)]
    return make_scenario(state, inputs, 1.0, source="perfect")


def dump_scenario(scenario: Scenario, path):
    """Line-delimited debug dump: t slot a q k delta"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# evcs-scenario t0={scenario.t0} R={scenario.R} weight={scenario.weight!r} "
                f"source={scenario.source}\n")
        f.write("t slot a q k delta\n")
        for w in scenario.inputs:
            for i, ev in enumerate(w.events):
                if ev.start or ev.end:
                    f.write(f"{w.t} {i} {int(ev.start)} {int(ev.end)} {ev.request_kwh!r} "
                            f"{ev.announced_duration_steps}\n")
