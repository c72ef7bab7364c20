#!/usr/bin/env python3
"""
Behavior Model Service
Sojourn-dependent switching process (session starts and ends) and the
kWh request function, learned from discretized session traces
"""

import bisect
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional, Protocol, Tuple

import numpy as np
import pandas as pd

from evcs_model import DataFormatError, DomainError, StationState

MODEL_FORMAT = "evcs-behavior-model"
MODEL_VERSION = 1

# Quarter-hour sojourn bins, the last one is open-ended
DEFAULT_SOJOURN_EDGES = (0, 1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 96)

FEATURE_COLUMNS = ("bin", "hour", "weekday", "slot")
# Backoff order: drop slot, then weekday, then hour, then the bin
BACKOFF_LEVELS = (("bin", "hour", "weekday", "slot"), ("bin", "hour", "weekday"), ("bin", "hour"), ("bin",), ())


def sojourn_bin(sojourn_steps, edges=DEFAULT_SOJOURN_EDGES):
    return bisect.bisect_right(edges, sojourn_steps) - 1


@dataclass(frozen=True, slots=True)
class TransitionContext:
    prev_active: bool
    sojourn_steps: int
    hour_of_day: int
    weekday: int
    slot_index: int

    def __post_init__(self):
        if self.sojourn_steps < 0 or not 0 <= self.hour_of_day <= 23 or not 0 <= self.weekday <= 6 \
                or self.slot_index < 0:
            raise DomainError(f"transition context out of range: {self}")


@dataclass(frozen=True)
class BinningConfig:
    sojourn_bin_edges: Tuple[int, ...] = DEFAULT_SOJOURN_EDGES
    laplace_alpha: float = 1.0
    backoff_min_count: int = 20

    def __post_init__(self):
        edges = self.sojourn_bin_edges
        if not edges or edges[0] != 0 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise DomainError("sojourn bin edges must start at 0 and be strictly ascending")
        if self.laplace_alpha <= 0:
            raise DomainError("laplace_alpha must be positive")
        if self.backoff_min_count < 0:
            raise DomainError("backoff_min_count must be nonnegative")


class Estimate(NamedTuple):
    value: float
    count: int
    level: int


class Estimator(Protocol):
    """Anything mapping a context to a number; learners plug in here"""

    def predict(self, ctx: TransitionContext) -> float:
        ...


class FunctionEstimator:
    """Wraps a plain function, used for oracle models"""
    kind = "function"

    def __init__(self, fn: Callable[[TransitionContext], float]):
        self.fn = fn

    def predict(self, ctx):
        return float(self.fn(ctx))


class _BinnedTable:
    """Per-level (count, sum) tables with hierarchical backoff"""

    def __init__(self, binning: BinningConfig):
        self.binning = binning
        self.levels = [dict() for _ in BACKOFF_LEVELS]
        self.trusted_slots = frozenset()

    def fit(self, features, targets, trusted_slots=None):
        features = np.asarray(features, dtype=np.int64).reshape(-1, len(FEATURE_COLUMNS))
        frame = pd.DataFrame({
            "bin": np.searchsorted(self.binning.sojourn_bin_edges, features[:, 0], side="right") - 1,
            "hour": features[:, 1],
            "weekday": features[:, 2],
            "slot": features[:, 3],
            "y": np.asarray(targets, dtype=float),
        })
        for level, columns in enumerate(BACKOFF_LEVELS):
            if not columns:
                self.levels[level] = {(): (int(len(frame)), float(frame["y"].sum()))}
                continue
            grouped = frame.groupby(list(columns), sort=True)["y"].agg(["count", "sum"])
            table = {}
            for key, row in grouped.iterrows():
                key = key if isinstance(key, tuple) else (key,)
                table[tuple(int(k) for k in key)] = (int(row["count"]), float(row["sum"]))
            self.levels[level] = table
        if trusted_slots is None:
            trusted_slots = set(int(s) for s in np.unique(features[:, 3]))
        self.trusted_slots = frozenset(int(s) for s in trusted_slots)
        return self

    def key(self, ctx):
        full = {
            "bin": sojourn_bin(ctx.sojourn_steps, self.binning.sojourn_bin_edges),
            "hour": ctx.hour_of_day,
            "weekday": ctx.weekday,
            "slot": ctx.slot_index,
        }
        return [tuple(full[c] for c in columns) for columns in BACKOFF_LEVELS]

    def cell(self, ctx, usable=lambda count: True):
        keys = self.key(ctx)
        min_count = self.binning.backoff_min_count
        for level, key in enumerate(keys):
            if level == 0 and ctx.slot_index not in self.trusted_slots:
                continue
            count, total = self.levels[level].get(key, (0, 0.0))
            if count >= min_count and usable(count):
                return count, total, level
        count, total = self.levels[-1].get((), (0, 0.0))
        return count, total, len(keys) - 1

    def to_dict(self):
        return {
            "trusted_slots": sorted(self.trusted_slots),
            "levels": [
                [list(key) + [count, total] for key, (count, total) in sorted(table.items())]
                for table in self.levels
            ],
        }

    def load(self, payload):
        self.trusted_slots = frozenset(payload["trusted_slots"])
        self.levels = [
            {tuple(int(k) for k in row[:-2]): (int(row[-2]), float(row[-1])) for row in rows}
            for rows in payload["levels"]
        ]
        return self


class BinnedFrequencyEstimator(_BinnedTable):
    """Laplace-smoothed switch frequency per cell"""
    kind = "binned-frequency"

    def lookup(self, ctx) -> Estimate:
        count, switches, level = self.cell(ctx)
        alpha = self.binning.laplace_alpha
        return Estimate((switches + alpha) / (count + 2 * alpha), count, level)

    def predict(self, ctx):
        return self.lookup(ctx).value


class BinnedMeanRegressor(_BinnedTable):
    """Empirical mean request per cell"""
    kind = "binned-mean"

    def lookup(self, ctx) -> Estimate:
        count, total, level = self.cell(ctx, usable=lambda c: c > 0)
        if count == 0:
            raise DomainError("kWh model has no training requests")
        return Estimate(total / count, count, level)

    def predict(self, ctx):
        return self.lookup(ctx).value


ESTIMATOR_KINDS = {cls.kind: cls for cls in (BinnedFrequencyEstimator, BinnedMeanRegressor)}


@dataclass(frozen=True)
class BehaviorModel:
    start_estimator: Estimator
    end_estimator: Estimator
    kwh_model: Estimator
    binning: BinningConfig = field(default_factory=BinningConfig)
    metadata: Dict = field(default_factory=dict)

    def p_start(self, ctx):
        return p_start(self, ctx)

    def p_end(self, ctx):
        return p_end(self, ctx)

    def predict_kwh(self, ctx):
        return predict_kwh(self, ctx)


class Observations(NamedTuple):
    """Training rows; feature columns are (sojourn, hour, weekday, slot)"""
    start_features: np.ndarray
    start_outcomes: np.ndarray
    end_features: np.ndarray
    end_outcomes: np.ndarray
    kwh_features: np.ndarray
    kwh_values: np.ndarray
    slot_sessions: np.ndarray


def featurize(state: StationState, slot_index, clock) -> TransitionContext:
    if not 0 <= slot_index < state.n:
        raise DomainError(f"slot index {slot_index} outside station of {state.n} slots")
    slot = state.slots[slot_index]
    return TransitionContext(
        prev_active=slot.active,
        sojourn_steps=slot.sojourn_steps,
        hour_of_day=clock.hour,
        weekday=clock.weekday(),
        slot_index=slot_index,
    )


def step_calendar(trace, n_steps=None):
    """Hour-of-day and weekday arrays for every step of a trace"""
    n_steps = trace.n_steps if n_steps is None else n_steps
    index = pd.date_range(trace.start, periods=n_steps, freq=pd.Timedelta(minutes=trace.dt_minutes))
    return np.asarray(index.hour, dtype=np.int64), np.asarray(index.weekday, dtype=np.int64)


def transition_observations(trace) -> Observations:
    """Replay the trace events and record one switch observation per slot and step"""
    hours, weekdays = step_calendar(trace)
    start_rows, start_y = [], []
    end_rows, end_y = [], []
    kwh_rows, kwh_y = [], []
    slot_sessions = np.zeros(trace.n, dtype=np.int64)

    for i in range(trace.n):
        active = False
        sojourn = 0
        announced = None
        for w in trace.inputs:
            t = w.t
            event = w.events[i]
            row = (sojourn, hours[t], weekdays[t], i)
            ended = False
            if active:
                ended = event.end or (announced is not None and announced <= 1)
                end_rows.append(row)
                end_y.append(1.0 if ended else 0.0)
            else:
                start_rows.append(row)
                start_y.append(1.0 if event.start else 0.0)

            if event.start:
                kwh_rows.append(row if not active else (0, hours[t], weekdays[t], i))
                kwh_y.append(event.request_kwh)
                slot_sessions[i] += 1
                active, sojourn, announced = True, 0, event.announced_duration_steps
            elif ended:
                active, sojourn, announced = False, 0, None
            else:
                sojourn += 1
                if active and announced is not None:
                    announced -= 1

    def as_array(rows):
        return np.asarray(rows, dtype=np.int64).reshape(-1, len(FEATURE_COLUMNS))

    return Observations(
        as_array(start_rows), np.asarray(start_y), as_array(end_rows), np.asarray(end_y),
        as_array(kwh_rows), np.asarray(kwh_y, dtype=float), slot_sessions,
    )


def _bin_counts(features, outcomes, edges):
    bins = np.searchsorted(edges, features[:, 0], side="right") - 1 if len(features) else np.array([], dtype=int)
    return {
        "observations": np.bincount(bins, minlength=len(edges)).tolist(),
        "switches": np.bincount(bins, weights=outcomes, minlength=len(edges)).astype(int).tolist()
        if len(features) else [0] * len(edges),
    }


def fit(trace, config: Optional[BinningConfig] = None, start_estimator=None, end_estimator=None,
        kwh_model=None) -> BehaviorModel:
    """Fit c1, c2 and r1; estimators default to the binned reference learners"""
    config = config or BinningConfig()
    if not trace.sessions and not any(ev.start for w in trace.inputs for ev in w.events):
        raise DomainError("cannot fit a behavior model on a trace without sessions")

    obs = transition_observations(trace)
    trusted = [i for i, count in enumerate(obs.slot_sessions) if count > 0]

    start_estimator = start_estimator or BinnedFrequencyEstimator(config)
    end_estimator = end_estimator or BinnedFrequencyEstimator(config)
    kwh_model = kwh_model or BinnedMeanRegressor(config)
    start_estimator.fit(obs.start_features, obs.start_outcomes, trusted_slots=trusted)
    end_estimator.fit(obs.end_features, obs.end_outcomes, trusted_slots=trusted)
    kwh_model.fit(obs.kwh_features, obs.kwh_values, trusted_slots=trusted)

    metadata = {
        "sessions": int(obs.slot_sessions.sum()),
        "slots": trace.n,
        "steps": trace.n_steps,
        "dt_minutes": trace.dt_minutes,
        "date_range": [trace.clock(0).isoformat(), trace.clock(trace.n_steps).isoformat()],
        "start_counts": _bin_counts(obs.start_features, obs.start_outcomes, config.sojourn_bin_edges),
        "end_counts": _bin_counts(obs.end_features, obs.end_outcomes, config.sojourn_bin_edges),
    }
    return BehaviorModel(start_estimator, end_estimator, kwh_model, config, metadata)


def _probability(value):
    return min(1.0, max(0.0, float(value)))


def p_start(model: BehaviorModel, ctx: TransitionContext) -> float:
    """P(slot activates at this step | inactive context)"""
    if ctx.prev_active:
        raise DomainError("p_start needs an inactive context")
    return _probability(model.start_estimator.predict(ctx))


def p_end(model: BehaviorModel, ctx: TransitionContext) -> float:
    """P(session ends at this step | active context)"""
    if not ctx.prev_active:
        raise DomainError("p_end needs an active context")
    return _probability(model.end_estimator.predict(ctx))


def predict_kwh(model: BehaviorModel, ctx: TransitionContext) -> float:
    value = float(model.kwh_model.predict(ctx))
    if not value > 0:
        raise DomainError(f"kWh model returned a nonpositive request {value}")
    return value


def _estimator_payload(estimator):
    kind = getattr(estimator, "kind", None)
    if kind not in ESTIMATOR_KINDS:
        raise DomainError(f"estimator of kind '{kind}' cannot be serialized")
    return {"kind": kind, **estimator.to_dict()}


def save_model(model: BehaviorModel, path):
    """Write the model as a versioned JSON document"""
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "binning": {
            "sojourn_bin_edges": list(model.binning.sojourn_bin_edges),
            "laplace_alpha": model.binning.laplace_alpha,
            "backoff_min_count": model.binning.backoff_min_count,
        },
        "start_estimator": _estimator_payload(model.start_estimator),
        "end_estimator": _estimator_payload(model.end_estimator),
        "kwh_model": _estimator_payload(model.kwh_model),
        "metadata": model.metadata,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=1, sort_keys=True)
    print(f"💾 Behavior model saved to {path}")


def load_model(path) -> BehaviorModel:
    with open(path, "r") as f:
        document = json.load(f)
    if document.get("format") != MODEL_FORMAT:
        raise DataFormatError(f"{path} is not an {MODEL_FORMAT} file")
    if document.get("version") != MODEL_VERSION:
        raise DataFormatError(f"unsupported model version {document.get('version')}")

    binning = BinningConfig(
        sojourn_bin_edges=tuple(document["binning"]["sojourn_bin_edges"]),
        laplace_alpha=document["binning"]["laplace_alpha"],
        backoff_min_count=document["binning"]["backoff_min_count"],
    )

    def estimator(payload):
        return ESTIMATOR_KINDS[payload["kind"]](binning).load(payload)

    return BehaviorModel(
        start_estimator=estimator(document["start_estimator"]),
        end_estimator=estimator(document["end_estimator"]),
        kwh_model=estimator(document["kwh_model"]),
        binning=binning,
        metadata=document["metadata"],
    )
