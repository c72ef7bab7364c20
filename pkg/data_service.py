#!/usr/bin/env python3
"""
Session Data Service
Parses charging-session logs, discretizes them into exogenous-input traces,
applies request preprocessing, splits train/test and generates synthetic worlds
"""

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import TIMEZONE
from evcs_model import (
    NO_EVENT, DataFormatError, DomainError, ExogenousInput, SlotEvent, StationConfig, ZERO_TOLERANCE,
)
from behavior_service import (
    DEFAULT_SOJOURN_EDGES, BehaviorModel, BinningConfig, FunctionEstimator, sojourn_bin,
)

TRACE_FORMAT = "evcs-trace"
TRACE_VERSION = 1
CSV_COLUMNS = ["slot_id", "connection_time", "disconnection_time", "kwh", "announced_minutes"]
MAX_MALFORMED_SHARE = 0.01


@dataclass(frozen=True)
class RawSession:
    slot_id: str
    connection_time: pd.Timestamp
    disconnection_time: pd.Timestamp
    kwh: float
    announced_duration_minutes: Optional[int] = None
    session_id: str = ""


class RowError(NamedTuple):
    row: int
    message: str


class ParsedSessions(NamedTuple):
    sessions: List[RawSession]
    errors: List[RowError]


@dataclass(frozen=True)
class SessionRecord:
    """One discretized session: start event at start_step, end at end_step"""
    session_id: str
    slot: int
    start_step: int
    end_step: int
    request_kwh: float
    announced_steps: int
    raw_request_kwh: float = 0.0
    end_event: bool = True

    @property
    def early_disconnection(self):
        return self.end_step < self.start_step + self.announced_steps


@dataclass(frozen=True)
class DiscretizedTrace:
    start: pd.Timestamp
    dt_minutes: int
    inputs: Tuple[ExogenousInput, ...]
    slot_ids: Tuple[str, ...]
    sessions: Tuple[SessionRecord, ...] = ()
    metadata: Dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.inputs)

    @property
    def n(self):
        return len(self.slot_ids)

    def clock(self, t):
        """Wall-clock timestamp of step t"""
        return self.start + pd.Timedelta(minutes=self.dt_minutes * t)

    def slot_index(self):
        return {slot_id: i for i, slot_id in enumerate(self.slot_ids)}


def _timestamp(value, timezone):
    ts = pd.to_datetime(value)
    if ts is pd.NaT or pd.isna(ts):
        raise ValueError(f"missing timestamp '{value}'")
    if ts.tzinfo is None:
        return ts.tz_localize(timezone)
    return ts.tz_convert(timezone)


def _session_from_fields(slot_id, connection, disconnection, kwh, announced, timezone, session_id):
    slot_id = str(slot_id).strip()
    if not slot_id:
        raise ValueError("empty slot id")
    connection_time = _timestamp(connection, timezone)
    disconnection_time = _timestamp(disconnection, timezone)
    if disconnection_time <= connection_time:
        raise ValueError("disconnection is not after connection")

    kwh = float(kwh)
    if not math.isfinite(kwh) or kwh < 0:
        raise ValueError(f"invalid kWh value {kwh}")

    minutes = None
    if announced is not None and str(announced).strip() not in ("", "nan", "None"):
        minutes = int(math.ceil(float(announced)))
        if minutes <= 0:
            raise ValueError(f"announced minutes must be positive, got {announced}")

    return RawSession(slot_id, connection_time, disconnection_time, kwh, minutes, str(session_id))


def _parse_csv_rows(path, timezone):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return [], [], 0

    missing = [c for c in CSV_COLUMNS[:4] if c not in frame.columns]
    if missing:
        raise DataFormatError(f"{path}: missing columns {missing}")

    sessions, errors = [], []
    has_announced = "announced_minutes" in frame.columns
    has_id = "session_id" in frame.columns
    for position, row in enumerate(frame.itertuples(index=False)):
        line = position + 2  # header is line 1
        record = row._asdict()
        try:
            sessions.append(_session_from_fields(
                record["slot_id"], record["connection_time"], record["disconnection_time"], record["kwh"],
                record["announced_minutes"] if has_announced else None, timezone,
                record["session_id"] if has_id else f"row{line}",
            ))
        except (ValueError, TypeError) as e:
            errors.append(RowError(line, str(e)))
    return sessions, errors, len(frame)


def _minutes_available(user_inputs):
    if not user_inputs:
        return None
    if isinstance(user_inputs, dict):
        user_inputs = [user_inputs]
    return user_inputs[-1].get("minutesAvailable")


def _parse_acn_rows(path, timezone):
    with open(path, "r") as f:
        text = f.read()
    if not text.strip():
        return [], [], 0
    document = json.loads(text)
    records = document.get("_items", []) if isinstance(document, dict) else document

    sessions, errors = [], []
    for position, record in enumerate(records):
        row = position + 1
        try:
            sessions.append(_session_from_fields(
                record["spaceID"], record["connectionTime"], record["disconnectionTime"],
                record["kWhDelivered"], _minutes_available(record.get("userInputs")), timezone,
                record.get("sessionID", f"item{row}"),
            ))
        except (KeyError, ValueError, TypeError) as e:
            errors.append(RowError(row, f"{type(e).__name__}: {e}"))
    return sessions, errors, len(records)


def parse_sessions(path, fmt="csv", timezone=TIMEZONE) -> ParsedSessions:
    """Parse a session log; malformed rows go to the error report"""
    if not os.path.exists(path):
        raise DataFormatError(f"session file not found: {path}")

    if fmt == "csv":
        sessions, errors, total = _parse_csv_rows(path, timezone)
    elif fmt == "acn-json":
        sessions, errors, total = _parse_acn_rows(path, timezone)
    else:
        raise DataFormatError(f"unknown session format '{fmt}', expected 'csv' or 'acn-json'")

    if errors:
        print(f"⚠️ {len(errors)} malformed row(s) in {path}")
        if len(errors) > MAX_MALFORMED_SHARE * total:
            preview = "; ".join(f"row {e.row}: {e.message}" for e in errors[:5])
            raise DataFormatError(f"{len(errors)} of {total} rows malformed in {path}: {preview}")

    sessions.sort(key=lambda s: (s.connection_time, s.slot_id))
    return ParsedSessions(sessions, errors)


def _ceil_to_day(steps, steps_per_day):
    return int(math.ceil(steps / steps_per_day)) * steps_per_day


def _assemble(records, n, n_steps):
    """ExogenousInput sequence built from session records"""
    per_step = [dict() for _ in range(n_steps)]
    for rec in records:
        per_step[rec.start_step][rec.slot] = SlotEvent(
            start=True, request_kwh=rec.request_kwh, announced_duration_steps=rec.announced_steps)
        if rec.end_event and rec.end_step < n_steps:
            per_step[rec.end_step][rec.slot] = SlotEvent(end=True)
    return tuple(
        ExogenousInput(t, tuple(events.get(i, NO_EVENT) for i in range(n)))
        for t, events in enumerate(per_step)
    )


def _resolve_overlaps(records):
    """Truncate the earlier of two overlapping sessions on one slot"""
    resolved = []
    truncated = dropped = 0
    by_slot = {}
    for rec in sorted(records, key=lambda r: (r.slot, r.start_step, r.session_id)):
        by_slot.setdefault(rec.slot, []).append(rec)

    for slot_records in by_slot.values():
        kept = []
        for rec in slot_records:
            while kept and rec.start_step <= kept[-1].end_step:
                prev = kept.pop()
                natural_end = prev.start_step + prev.announced_steps
                if rec.start_step == prev.end_step == natural_end:
                    # announced time elapses at the reconnection step, no end event needed
                    kept.append(replace(prev, end_event=False))
                    break
                new_end = rec.start_step - 1
                if new_end < prev.start_step + 1:
                    dropped += 1
                    continue
                truncated += 1
                kept.append(replace(prev, end_step=new_end, end_event=True))
                break
            kept.append(rec)
        resolved.extend(kept)

    if truncated or dropped:
        print(f"⚠️ Overlapping sessions: {truncated} truncated, {dropped} dropped")
    return resolved, truncated, dropped


def discretize(sessions: Sequence[RawSession], dt_minutes, config: StationConfig, slot_ids=None,
               start=None) -> DiscretizedTrace:
    """Snap sessions onto the step grid; the trace starts at local midnight"""
    if dt_minutes <= 0 or 60 % dt_minutes != 0:
        raise DomainError("dt_minutes must divide 60")

    if slot_ids is None:
        slot_ids = sorted({s.slot_id for s in sessions})
    slot_ids = tuple(slot_ids)
    unknown = sorted({s.slot_id for s in sessions} - set(slot_ids))
    if unknown:
        raise DataFormatError(f"unknown slot ids {unknown[:5]}")
    if len(slot_ids) > config.n:
        raise DataFormatError(f"{len(slot_ids)} slot ids do not fit a station of {config.n} slots")
    slot_ids = slot_ids + tuple(f"unused-{i}" for i in range(len(slot_ids), config.n))
    index = {slot_id: i for i, slot_id in enumerate(slot_ids)}

    if start is None:
        start = min(s.connection_time for s in sessions).normalize() if sessions \
            else pd.Timestamp("1970-01-01", tz=TIMEZONE)
    step = pd.Timedelta(minutes=dt_minutes)

    records = []
    zero_requests = 0
    for number, raw in enumerate(sessions):
        if raw.kwh <= 0:
            zero_requests += 1
            continue
        s = int((raw.connection_time - start) // step)
        if s < 0:
            raise DomainError(f"session {raw.session_id} connects before the trace start")
        if raw.announced_duration_minutes is not None:
            delta = int(math.ceil(raw.announced_duration_minutes / dt_minutes))
        else:
            delta = int(math.ceil((raw.disconnection_time - raw.connection_time) / step))
        delta = max(delta, 1)
        d = int((raw.disconnection_time - start) // step)
        q = max(min(d, s + delta), s + 1)
        records.append(SessionRecord(
            session_id=raw.session_id or f"s{number}",
            slot=index[raw.slot_id],
            start_step=s,
            end_step=q,
            request_kwh=raw.kwh,
            announced_steps=delta,
            raw_request_kwh=raw.kwh,
        ))

    records, truncated, dropped = _resolve_overlaps(records)
    records.sort(key=lambda r: (r.start_step, r.slot))
    steps_per_day = 24 * 60 // dt_minutes
    last = max((r.end_step for r in records), default=-1)
    n_steps = _ceil_to_day(last + 1, steps_per_day)

    metadata = {
        "sessions": len(records),
        "truncated_overlaps": truncated,
        "dropped_overlaps": dropped,
        "dropped_zero_requests": zero_requests,
        "early_disconnections": sum(1 for r in records if r.early_disconnection),
    }
    return DiscretizedTrace(start, dt_minutes, _assemble(records, config.n, n_steps), slot_ids,
                            tuple(records), metadata)


def preprocess_requests(trace: DiscretizedTrace, config: StationConfig) -> DiscretizedTrace:
    """Cap each request to what the announced window can physically deliver"""
    kept = []
    capped = dropped = 0
    for rec in trace.sessions:
        bound = rec.announced_steps * config.e_max * config.eta
        k = min(rec.request_kwh, bound)
        if k <= ZERO_TOLERANCE:
            dropped += 1
            continue
        if k < rec.request_kwh:
            capped += 1
        kept.append(replace(rec, request_kwh=k))

    if dropped:
        print(f"⚠️ Dropped {dropped} session(s) with a negligible request")
    metadata = dict(trace.metadata, sessions=len(kept), capped_requests=capped, dropped_small_requests=dropped)
    return replace(trace, inputs=_assemble(kept, trace.n, trace.n_steps), sessions=tuple(kept), metadata=metadata)


def split(trace: DiscretizedTrace, boundary) -> Tuple[DiscretizedTrace, DiscretizedTrace]:
    """Chronological split at the midnight of boundary, by connection step"""
    boundary = pd.Timestamp(boundary)
    boundary = boundary.tz_localize(trace.start.tz) if boundary.tzinfo is None else boundary.tz_convert(trace.start.tz)
    boundary = boundary.normalize()
    end = trace.clock(trace.n_steps)
    if not trace.start <= boundary <= end:
        raise DomainError(f"split boundary {boundary} outside trace range {trace.start} .. {end}")

    b = int((boundary - trace.start) // pd.Timedelta(minutes=trace.dt_minutes))
    steps_per_day = 24 * 60 // trace.dt_minutes
    train_records = [r for r in trace.sessions if r.start_step < b]
    test_records = [
        replace(r, start_step=r.start_step - b, end_step=r.end_step - b)
        for r in trace.sessions if r.start_step >= b
    ]

    train_steps = max(b, _ceil_to_day(max((r.end_step + 1 for r in train_records), default=0), steps_per_day))
    test_steps = max(trace.n_steps - b, _ceil_to_day(max((r.end_step + 1 for r in test_records), default=0),
                                                     steps_per_day))

    def build(records, start, n_steps, part):
        metadata = dict(trace.metadata, sessions=len(records), part=part)
        return DiscretizedTrace(start, trace.dt_minutes, _assemble(records, trace.n, n_steps), trace.slot_ids,
                                tuple(records), metadata)

    return (build(train_records, trace.start, train_steps, "train"),
            build(test_records, boundary, test_steps, "test"))


def _records_from_inputs(inputs, n):
    """Rebuild session records by walking start/end events"""
    records = []
    open_sessions = {}
    for w in inputs:
        for i, ev in enumerate(w.events):
            if i in open_sessions:
                rec = open_sessions[i]
                if ev.end or w.t >= rec.start_step + rec.announced_steps:
                    records.append(replace(rec, end_step=w.t, end_event=ev.end))
                    del open_sessions[i]
            if ev.start:
                open_sessions[i] = SessionRecord(
                    session_id=f"t{w.t}-s{i}", slot=i, start_step=w.t, end_step=w.t + ev.announced_duration_steps,
                    request_kwh=ev.request_kwh, announced_steps=ev.announced_duration_steps,
                    raw_request_kwh=ev.request_kwh, end_event=False)
    records.extend(open_sessions.values())
    return sorted(records, key=lambda r: (r.start_step, r.slot))


def write_trace(trace: DiscretizedTrace, path):
    """Canonical trace file: header comments then one line per event"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# {TRACE_FORMAT} v{TRACE_VERSION}\n")
        f.write(f"# start={trace.start.isoformat()} dt_minutes={trace.dt_minutes} "
                f"steps={trace.n_steps} n={trace.n}\n")
        f.write(f"# slots={json.dumps(list(trace.slot_ids))}\n")
        f.write(f"# metadata={json.dumps(trace.metadata, sort_keys=True)}\n")
        f.write("step,slot,a,q,k,delta\n")
        for w in trace.inputs:
            for i, ev in enumerate(w.events):
                if ev.start or ev.end:
                    f.write(f"{w.t},{i},{int(ev.start)},{int(ev.end)},{ev.request_kwh!r},"
                            f"{ev.announced_duration_steps}\n")


def read_trace(path) -> DiscretizedTrace:
    with open(path, "r") as f:
        header = [f.readline() for _ in range(4)]
    if not header[0].startswith(f"# {TRACE_FORMAT} v"):
        raise DataFormatError(f"{path} is not an {TRACE_FORMAT} file")
    version = int(header[0].strip().split(" v")[-1])
    if version != TRACE_VERSION:
        raise DataFormatError(f"unsupported trace version {version}")

    fields = dict(part.split("=", 1) for part in header[1][2:].split())
    slot_ids = tuple(json.loads(header[2].split("=", 1)[1]))
    metadata = json.loads(header[3].split("=", 1)[1])
    n_steps, n = int(fields["steps"]), int(fields["n"])

    events = pd.read_csv(path, comment="#", dtype={"k": float})
    per_step = [dict() for _ in range(n_steps)]
    for row in events.itertuples(index=False):
        per_step[int(row.step)][int(row.slot)] = SlotEvent(
            start=bool(row.a), end=bool(row.q), request_kwh=float(row.k) if row.a else 0.0,
            announced_duration_steps=int(row.delta) if row.a else 0)
    inputs = tuple(
        ExogenousInput(t, tuple(step_events.get(i, NO_EVENT) for i in range(n)))
        for t, step_events in enumerate(per_step)
    )
    return DiscretizedTrace(pd.Timestamp(fields["start"]), int(fields["dt_minutes"]), inputs, slot_ids,
                            tuple(_records_from_inputs(inputs, n)), metadata)


def write_sessions_csv(sessions: Sequence[RawSession], path):
    frame = pd.DataFrame({
        "session_id": [s.session_id for s in sessions],
        "slot_id": [s.slot_id for s in sessions],
        "connection_time": [s.connection_time.isoformat() for s in sessions],
        "disconnection_time": [s.disconnection_time.isoformat() for s in sessions],
        "kwh": [s.kwh for s in sessions],
        "announced_minutes": [
            "" if s.announced_duration_minutes is None else s.announced_duration_minutes for s in sessions],
    }, columns=["session_id"] + CSV_COLUMNS)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False)


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic session process"""
    n_slots: int = 5
    days: int = 7
    dt_minutes: int = 15
    start: str = "2024-01-01"
    arrival_hazard_by_hour: List = field(default_factory=lambda: [0.0] * 7 + [0.08] * 12 + [0.0] * 5)
    idle_hazard_by_bin: Optional[List[float]] = None
    duration_hazard_by_bin: List[float] = field(
        default_factory=lambda: [0.0, 0.02, 0.02, 0.03, 0.03, 0.04, 0.05, 0.08, 0.1, 0.15, 0.25, 0.5, 1.0])
    sojourn_bin_edges: List[int] = field(default_factory=lambda: list(DEFAULT_SOJOURN_EDGES))
    request_kwh_low: float = 4.0
    request_kwh_high: float = 20.0
    early_disconnect_prob: float = 0.3
    early_extra_steps_max: int = 8
    timezone: str = TIMEZONE

    def __post_init__(self):
        if self.n_slots < 1 or self.days < 1:
            raise DomainError("synthetic world needs at least one slot and one day")
        if len(self.duration_hazard_by_bin) != len(self.sojourn_bin_edges):
            raise DomainError("duration hazard needs one value per sojourn bin")
        if self.idle_hazard_by_bin is not None and len(self.idle_hazard_by_bin) != len(self.sojourn_bin_edges):
            raise DomainError("idle hazard needs one value per sojourn bin")
        if not 0 < self.request_kwh_low <= self.request_kwh_high:
            raise DomainError("request range must be positive and ordered")
        if not 0 <= self.early_disconnect_prob <= 1:
            raise DomainError("early_disconnect_prob must be a probability")

    def arrival_matrix(self):
        """Per-slot, per-hour arrival hazard as an (n_slots, 24) array"""
        hazard = np.asarray(self.arrival_hazard_by_hour, dtype=float)
        if hazard.ndim == 1:
            hazard = np.tile(hazard, (self.n_slots, 1))
        if hazard.shape != (self.n_slots, 24):
            raise DomainError(f"arrival hazard must have shape (24,) or ({self.n_slots}, 24)")
        return hazard

    @classmethod
    def from_dict(cls, values):
        return cls(**(values or {}))


@dataclass(frozen=True)
class GroundTruth:
    """True parameters of a synthetic world"""
    arrival_hazard: Tuple[Tuple[float, ...], ...]
    idle_hazard_by_bin: Optional[Tuple[float, ...]]
    duration_hazard_by_bin: Tuple[float, ...]
    sojourn_bin_edges: Tuple[int, ...]
    mean_request_kwh: float

    def p_start(self, ctx):
        if self.idle_hazard_by_bin is not None:
            return self.idle_hazard_by_bin[sojourn_bin(ctx.sojourn_steps, self.sojourn_bin_edges)]
        return self.arrival_hazard[ctx.slot_index][ctx.hour_of_day]

    def p_end(self, ctx):
        return self.duration_hazard_by_bin[sojourn_bin(ctx.sojourn_steps, self.sojourn_bin_edges)]

    def as_behavior_model(self) -> BehaviorModel:
        """Oracle model answering with the exact generating process"""
        request = self.mean_request_kwh
        return BehaviorModel(
            start_estimator=FunctionEstimator(self.p_start),
            end_estimator=FunctionEstimator(self.p_end),
            kwh_model=FunctionEstimator(lambda ctx: request),
            binning=BinningConfig(sojourn_bin_edges=tuple(self.sojourn_bin_edges)),
            metadata={"oracle": True},
        )


def generate_synthetic(gen_config: SyntheticConfig, seed) -> Tuple[List[RawSession], GroundTruth]:
    """Draw sessions step by step from the configured hazards"""
    rng = np.random.default_rng(seed)
    dt = gen_config.dt_minutes
    steps_per_day = 24 * 60 // dt
    n_steps = gen_config.days * steps_per_day
    start = pd.Timestamp(gen_config.start, tz=gen_config.timezone).normalize()
    arrival = gen_config.arrival_matrix()
    edges = tuple(gen_config.sojourn_bin_edges)
    idle = gen_config.idle_hazard_by_bin
    duration = gen_config.duration_hazard_by_bin
    hours = (np.arange(n_steps) * dt // 60) % 24

    sessions = []
    for slot in range(gen_config.n_slots):
        switch_draws = rng.random(n_steps)
        active = False
        sojourn = 0
        session_start = 0
        for t in range(n_steps):
            if active:
                p = duration[sojourn_bin(sojourn, edges)]
            elif idle is not None:
                p = idle[sojourn_bin(sojourn, edges)]
            else:
                p = arrival[slot, hours[t]]
            if switch_draws[t] < p:
                if active:
                    sessions.append((slot, session_start, t))
                else:
                    session_start = t
                active = not active
                sojourn = 0
            else:
                sojourn += 1
        if active:
            sessions.append((slot, session_start, n_steps))

    sessions.sort(key=lambda s: (s[1], s[0]))
    raw = []
    for number, (slot, s, q) in enumerate(sessions):
        steps = q - s
        extra = 0
        if rng.random() < gen_config.early_disconnect_prob:
            extra = int(rng.integers(1, gen_config.early_extra_steps_max + 1))
        kwh = float(rng.uniform(gen_config.request_kwh_low, gen_config.request_kwh_high))
        connection = start + pd.Timedelta(minutes=s * dt + int(rng.integers(0, dt)))
        disconnection = start + pd.Timedelta(minutes=q * dt + int(rng.integers(0, dt)))
        raw.append(RawSession(
            slot_id=f"slot-{slot:02d}",
            connection_time=connection,
            disconnection_time=max(disconnection, connection + pd.Timedelta(minutes=1)),
            kwh=kwh,
            announced_duration_minutes=(steps + extra) * dt,
            session_id=f"syn-{number:05d}",
        ))

    truth = GroundTruth(
        arrival_hazard=tuple(tuple(float(p) for p in row) for row in arrival),
        idle_hazard_by_bin=None if idle is None else tuple(float(p) for p in idle),
        duration_hazard_by_bin=tuple(float(p) for p in duration),
        sojourn_bin_edges=edges,
        mean_request_kwh=(gen_config.request_kwh_low + gen_config.request_kwh_high) / 2,
    )
    return raw, truth


def discretize_synthetic(sessions: Sequence[RawSession], gen_config: SyntheticConfig, config: StationConfig):
    """Trace of already drawn synthetic sessions, anchored at the generator's first midnight"""
    slot_ids = [f"slot-{i:02d}" for i in range(gen_config.n_slots)]
    start = pd.Timestamp(gen_config.start, tz=gen_config.timezone).normalize()
    trace = discretize(sessions, gen_config.dt_minutes, config, slot_ids=slot_ids, start=start)
    return preprocess_requests(trace, config)


def synthetic_trace(gen_config: SyntheticConfig, seed, config: StationConfig):
    """Generate, discretize and preprocess a synthetic world in one call"""
    sessions, truth = generate_synthetic(gen_config, seed)
    return discretize_synthetic(sessions, gen_config, config), truth
