"""Reading interaction logs into encoded sessions and empirical MDPs.

Log format (UTF-8, one JSON object per line):

* event records: ``{"session_id", "timestamp", "topic_id", "object_order", "duration_s"}``
* attribute records: ``{"session_id", "attr", "value"}``

A situation is the triple (topic, object order, duration bin). Taking action
``a`` means moving to some situation whose topic is ``a``; actions are
reconstructed from the visit sequence as the topic of the next situation.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EncodingError,
    EstimationError,
    ParseError,
    SegmentationError,
)
from .mdp import ActionSpace, FeatureMap, Mdp, StateSpace, TransitionModel

log = logging.getLogger(__name__)

MUSEUM_TOPICS = (
    "appearance",
    "death",
    "religion",
    "architecture",
    "entertainment",
    "food",
    "trade",
    "army",
)

EVENT_FIELDS = ("session_id", "timestamp", "topic_id", "object_order", "duration_s")
ATTRIBUTE_FIELDS = ("session_id", "attr", "value")


@dataclass(frozen=True)
class SchemaConfig:
    """Cardinalities of the situation encoding and the required user attributes.

    ``duration_bounds`` are right-closed upper edges: with (30, 90) a duration
    of exactly 30 s falls in bin 0 and exactly 90 s in bin 1.
    """

    n_topics: int = 8
    n_objects: int = 3
    duration_bounds: tuple[float, ...] = (30.0, 90.0)
    required_attributes: tuple[str, ...] = ("age",)
    topic_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "duration_bounds", tuple(float(b) for b in self.duration_bounds))
        object.__setattr__(self, "required_attributes", tuple(self.required_attributes))
        if self.n_topics < 1 or self.n_objects < 1:
            raise ConfigurationError("topic and object counts must be positive")
        if list(self.duration_bounds) != sorted(set(self.duration_bounds)):
            raise ConfigurationError("duration bounds must be strictly increasing")
        if self.topic_names is not None:
            object.__setattr__(self, "topic_names", tuple(self.topic_names))
            if len(self.topic_names) != self.n_topics:
                raise ConfigurationError("topic_names length must equal n_topics")

    @property
    def n_bins(self) -> int:
        return len(self.duration_bounds) + 1

    @property
    def n_states(self) -> int:
        return self.n_topics * self.n_objects * self.n_bins

    @property
    def n_features(self) -> int:
        return self.n_topics + self.n_objects + self.n_bins

    def topic_labels(self) -> tuple[str, ...]:
        if self.topic_names is not None:
            return self.topic_names
        if self.n_topics == len(MUSEUM_TOPICS):
            return MUSEUM_TOPICS
        return tuple(f"topic{i}" for i in range(self.n_topics))

    def bin_labels(self) -> tuple[str, ...]:
        edges = [0.0, *self.duration_bounds]
        labels = [f"duration_{_fmt(lo)}_{_fmt(hi)}s" for lo, hi in zip(edges, edges[1:])]
        labels.append(f"duration_{_fmt(edges[-1])}s_plus")
        return tuple(labels)

    def feature_names(self) -> tuple[str, ...]:
        objects = tuple(f"object{j + 1}" for j in range(self.n_objects))
        return self.topic_labels() + objects + self.bin_labels()

    def to_dict(self) -> dict:
        return {
            "n_topics": self.n_topics,
            "n_objects": self.n_objects,
            "duration_bounds": list(self.duration_bounds),
            "required_attributes": list(self.required_attributes),
            "topic_names": list(self.topic_names) if self.topic_names else None,
        }

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "SchemaConfig":
        doc = dict(doc or {})
        if doc.get("topic_names") is None:
            doc.pop("topic_names", None)
        return cls(**doc)


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


MUSEUM_SCHEMA = SchemaConfig()


def discretize_duration(seconds: float, schema: SchemaConfig = MUSEUM_SCHEMA) -> int:
    """Duration bin index; bins are closed on the right."""
    if seconds < 0 or math.isnan(seconds):
        raise ValueError(f"negative duration {seconds}")
    for i, bound in enumerate(schema.duration_bounds):
        if seconds <= bound:
            return i
    return len(schema.duration_bounds)


def encode_state(
    topic_id: int, object_order: int, duration_bin: int, schema: SchemaConfig = MUSEUM_SCHEMA
) -> int:
    for name, value, limit in (
        ("topic_id", topic_id, schema.n_topics),
        ("object_order", object_order, schema.n_objects),
        ("duration_bin", duration_bin, schema.n_bins),
    ):
        if not 0 <= value < limit:
            raise EncodingError(f"{name}={value} outside [0, {limit})")
    return (topic_id * schema.n_objects + object_order) * schema.n_bins + duration_bin


def decode_state(s: int, schema: SchemaConfig = MUSEUM_SCHEMA) -> tuple[int, int, int]:
    if not 0 <= s < schema.n_states:
        raise EncodingError(f"state {s} outside [0, {schema.n_states})")
    rest, duration_bin = divmod(s, schema.n_bins)
    topic_id, object_order = divmod(rest, schema.n_objects)
    return topic_id, object_order, duration_bin


def topic_of_states(schema: SchemaConfig = MUSEUM_SCHEMA) -> np.ndarray:
    return np.arange(schema.n_states) // (schema.n_objects * schema.n_bins)


def state_space(schema: SchemaConfig = MUSEUM_SCHEMA) -> StateSpace:
    topics = schema.topic_labels()
    bins = schema.bin_labels()
    labels = []
    for s in range(schema.n_states):
        t, o, b = decode_state(s, schema)
        labels.append(f"{topics[t]}/object{o + 1}/{bins[b]}")
    return StateSpace(schema.n_states, labels)


def action_space(schema: SchemaConfig = MUSEUM_SCHEMA) -> ActionSpace:
    return ActionSpace(schema.n_topics, schema.topic_labels())


def museum_feature_map(schema: SchemaConfig = MUSEUM_SCHEMA) -> FeatureMap:
    """Concatenated one-hot blocks (topic, object order, duration bin)."""
    F = np.zeros((schema.n_states, schema.n_features))
    for s in range(schema.n_states):
        t, o, b = decode_state(s, schema)
        F[s, t] = 1.0
        F[s, schema.n_topics + o] = 1.0
        F[s, schema.n_topics + schema.n_objects + b] = 1.0
    return FeatureMap(F, schema.feature_names())


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    timestamp: float
    topic_id: int
    object_order: int
    duration: float


@dataclass(frozen=True)
class UserProfile:
    session_id: str
    static_attributes: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Session:
    session_id: str
    profile: UserProfile
    state_seq: tuple[int, ...]
    action_seq: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.state_seq)


def make_session(
    session_id: str,
    states: Sequence[int],
    attributes: Mapping | None = None,
    schema: SchemaConfig = MUSEUM_SCHEMA,
) -> Session:
    """Build a session from its state sequence; actions are next-state topics."""
    states = tuple(int(s) for s in states)
    if not states:
        raise EncodingError(f"session {session_id} has no states")
    for s in states:
        if not 0 <= s < schema.n_states:
            raise EncodingError(f"state {s} outside [0, {schema.n_states})")
    topic = topic_of_states(schema)
    actions = tuple(int(topic[s]) for s in states[1:])
    return Session(session_id, UserProfile(session_id, dict(attributes or {})), states, actions)


@dataclass
class IngestReport:
    """Per-reason drop counts and line-numbered parse errors."""

    n_sessions_seen: int = 0
    n_kept: int = 0
    dropped: Counter = field(default_factory=Counter)
    parse_errors: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_sessions_seen": self.n_sessions_seen,
            "n_kept": self.n_kept,
            "dropped": dict(sorted(self.dropped.items())),
            "parse_errors": [{"line": n, "error": msg} for n, msg in self.parse_errors],
        }


@dataclass(frozen=True)
class SessionSet:
    sessions: tuple[Session, ...]
    schema: SchemaConfig | None = MUSEUM_SCHEMA
    group_label: str | None = None
    report: IngestReport | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    @property
    def max_length(self) -> int:
        return max((len(s) for s in self.sessions), default=0)


def _parse_line(lineno: int, text: str):
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    sid = rec.get("session_id")
    if not isinstance(sid, (str, int)) or isinstance(sid, bool):
        raise ValueError("missing or invalid session_id")
    sid = str(sid)
    if "attr" in rec:
        missing = [k for k in ATTRIBUTE_FIELDS if k not in rec]
        if missing:
            raise ValueError(f"attribute record missing {missing}")
        return sid, ("attr", str(rec["attr"]), rec["value"])
    missing = [k for k in EVENT_FIELDS if k not in rec]
    if missing:
        raise ValueError(f"event record missing {missing}")
    return sid, ("event", rec)


def _validate_event(sid: str, rec: dict, schema: SchemaConfig) -> RawEvent:
    def _int(name):
        v = rec[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or float(v) != int(v):
            raise ValueError(f"{name}={v!r} is not an integer")
        return int(v)

    def _num(name):
        v = rec[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
            raise ValueError(f"{name}={v!r} is not a number")
        return float(v)

    event = RawEvent(sid, _num("timestamp"), _int("topic_id"), _int("object_order"), _num("duration_s"))
    if not 0 <= event.topic_id < schema.n_topics:
        raise ValueError(f"topic_id={event.topic_id} outside [0, {schema.n_topics})")
    if not 0 <= event.object_order < schema.n_objects:
        raise ValueError(f"object_order={event.object_order} outside [0, {schema.n_objects})")
    if event.duration < 0:
        raise ValueError(f"negative duration_s={event.duration}")
    return event


def parse_sessions(paths, schema: SchemaConfig = MUSEUM_SCHEMA) -> SessionSet:
    """Parse one or more log files into encoded sessions.

    Sessions without events, with a missing required attribute, with
    conflicting attribute values, or containing a malformed event line are
    dropped; the reasons are counted in ``SessionSet.report``.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    report = IngestReport()
    events: dict[str, list[RawEvent]] = {}
    attrs: dict[str, dict[str, object]] = {}
    bad: dict[str, str] = {}
    order: list[str] = []
    lineno = 0
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise ParseError(f"log file not found: {path}")
        with path.open(encoding="utf-8") as fh:
            for raw in fh:
                lineno += 1
                text = raw.strip()
                if not text:
                    continue
                try:
                    sid, payload = _parse_line(lineno, text)
                except ValueError as exc:
                    report.parse_errors.append((lineno, str(exc)))
                    continue
                if sid not in events:
                    events[sid] = []
                    attrs[sid] = {}
                    order.append(sid)
                if payload[0] == "attr":
                    _, name, value = payload
                    if name in attrs[sid] and attrs[sid][name] != value:
                        bad.setdefault(sid, "inconsistent_attribute")
                    attrs[sid][name] = value
                    continue
                try:
                    events[sid].append(_validate_event(sid, payload[1], schema))
                except ValueError as exc:
                    report.parse_errors.append((lineno, f"session {sid}: {exc}"))
                    bad.setdefault(sid, "malformed_event")

    sessions = []
    report.n_sessions_seen = len(order)
    for sid in order:
        if sid in bad:
            report.dropped[bad[sid]] += 1
            continue
        if not events[sid]:
            report.dropped["no_events"] += 1
            continue
        if any(attrs[sid].get(a) is None for a in schema.required_attributes):
            report.dropped["missing_attribute"] += 1
            continue
        evs = sorted(events[sid], key=lambda e: e.timestamp)
        states = [
            encode_state(e.topic_id, e.object_order, discretize_duration(e.duration, schema), schema)
            for e in evs
        ]
        sessions.append(make_session(sid, states, attrs[sid], schema))
    report.n_kept = len(sessions)
    if report.parse_errors:
        log.warning("%d malformed log lines", len(report.parse_errors))
    return SessionSet(tuple(sessions), schema, None, report)


@dataclass(frozen=True)
class GroupSpec:
    """Maps one static attribute to group labels.

    Exact matches in ``partition`` (keyed by the value's string form) win;
    otherwise numeric ``thresholds`` ``(upper_bound, label)`` are tried in
    order with ``value < upper_bound``; otherwise ``other``.
    """

    attribute: str
    partition: Mapping[str, str] = field(default_factory=dict)
    thresholds: tuple[tuple[float, str], ...] = ()
    other: str | None = None

    @classmethod
    def age_threshold(cls, threshold: float = 18, below: str = "child", above: str = "adult"):
        return cls("age", {}, ((float(threshold), below), (math.inf, above)))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GroupSpec":
        attribute = doc.get("attribute", "age")
        if "threshold" in doc:
            thresholds = (
                (float(doc["threshold"]), doc.get("below", "child")),
                (math.inf, doc.get("above", "adult")),
            )
        else:
            thresholds = tuple((float(b), str(l)) for b, l in doc.get("thresholds", ()))
        partition = {str(k): str(v) for k, v in doc.get("partition", {}).items()}
        return cls(attribute, partition, thresholds, doc.get("other"))

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "partition": dict(self.partition),
            "thresholds": [[b if math.isfinite(b) else "inf", l] for b, l in self.thresholds],
            "other": self.other,
        }

    def label_for(self, value) -> str:
        key = str(value)
        if key in self.partition:
            return self.partition[key]
        if self.thresholds:
            try:
                x = float(value)
            except (TypeError, ValueError):
                x = None
            if x is not None and not math.isnan(x):
                for bound, label in self.thresholds:
                    if x < bound:
                        return label
        if self.other is not None:
            return self.other
        raise SegmentationError(
            f"value {value!r} of attribute {self.attribute!r} has no group and no 'other' bucket"
        )


def segment_groups(sessions: SessionSet, spec: GroupSpec) -> dict[str, SessionSet]:
    """Partition sessions by a static attribute; labels come back sorted."""
    buckets: dict[str, list[Session]] = {}
    for sess in sessions:
        attributes = sess.profile.static_attributes
        if spec.attribute not in attributes:
            raise SegmentationError(
                f"session {sess.session_id} lacks attribute {spec.attribute!r}"
            )
        buckets.setdefault(spec.label_for(attributes[spec.attribute]), []).append(sess)
    return {
        label: SessionSet(tuple(buckets[label]), sessions.schema, label)
        for label in sorted(buckets)
    }


def transition_counts(sessions: Iterable[Session], n_states: int, n_actions: int) -> np.ndarray:
    counts = np.zeros((n_states, n_actions, n_states))
    for sess in sessions:
        s = np.asarray(sess.state_seq)
        if len(s) > 1:
            np.add.at(counts, (s[:-1], np.asarray(sess.action_seq), s[1:]), 1.0)
    return counts


def estimate_transitions(sessions: SessionSet, smoothing: float = 0.0) -> TransitionModel:
    """Frequency estimate of P(s'|s,a), optionally Laplace-smoothed.

    Smoothing mass goes only to successors whose topic equals the action, and
    only for actions observed somewhere in the data.
    """
    if len(sessions) == 0:
        raise EstimationError("cannot estimate transitions from an empty session set")
    if smoothing < 0:
        raise ConfigurationError("smoothing must be non-negative")
    schema = sessions.schema
    n, k = schema.n_states, schema.n_topics
    counts = transition_counts(sessions, n, k)
    consistent = (topic_of_states(schema)[None, :] == np.arange(k)[:, None]).astype(float)
    pair_counts = counts.sum(axis=2)
    if smoothing > 0:
        observed = pair_counts.sum(axis=0) > 0
        support = np.broadcast_to(observed, (n, k)).copy() | (pair_counts > 0)
        numer = counts + smoothing * consistent[None, :, :]
        denom = pair_counts + smoothing * consistent.sum(axis=1)[None, :]
    else:
        support = pair_counts > 0
        numer = counts
        denom = pair_counts
    probs = np.zeros_like(counts)
    np.divide(numer, denom[:, :, None], out=probs, where=support[:, :, None])
    return TransitionModel(probs, support)


def estimate_initial_distribution(sessions: SessionSet) -> np.ndarray:
    if len(sessions) == 0:
        raise EstimationError("cannot estimate d0 from an empty session set")
    first = np.array([sess.state_seq[0] for sess in sessions])
    return np.bincount(first, minlength=sessions.schema.n_states) / len(first)


def build_mdp(
    sessions: SessionSet,
    discount: float = 0.9,
    horizon: int | None = None,
    smoothing: float = 0.0,
) -> Mdp:
    """Empirical MDP for a session set; horizon defaults to the longest session."""
    schema = sessions.schema
    return Mdp(
        state_space(schema),
        action_space(schema),
        estimate_transitions(sessions, smoothing),
        estimate_initial_distribution(sessions),
        discount,
        horizon if horizon is not None else sessions.max_length,
    )


def sessions_to_dict(sessions: SessionSet) -> dict:
    doc = {
        "schema": sessions.schema.to_dict(),
        "group_label": sessions.group_label,
        "sessions": [
            {
                "session_id": s.session_id,
                "attributes": dict(s.profile.static_attributes),
                "states": list(s.state_seq),
            }
            for s in sessions
        ],
    }
    if sessions.report is not None:
        doc["report"] = sessions.report.to_dict()
    return doc


def sessions_from_dict(doc: Mapping) -> SessionSet:
    schema = SchemaConfig.from_dict(doc.get("schema"))
    sessions = tuple(
        make_session(rec["session_id"], rec["states"], rec.get("attributes"), schema)
        for rec in doc["sessions"]
    )
    return SessionSet(sessions, schema, doc.get("group_label"))


def load_sessions(path) -> SessionSet:
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"sessions file not found: {path}")
    return sessions_from_dict(json.loads(path.read_text(encoding="utf-8")))
