"""Synthetic session corpora from a planted reward, and the brute-force oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, EnumerationTooLarge
from .ingest import (
    MUSEUM_SCHEMA,
    SchemaConfig,
    Session,
    SessionSet,
    UserProfile,
    action_space,
    decode_state,
    state_space,
    topic_of_states,
)
from .maxent import _soft_backups
from .mdp import FeatureMap, Mdp, RewardWeights, TransitionModel, state_rewards

ENUMERATION_LIMIT = 10**6

# right-closed duration bins; the open-ended bin is drawn from (90, 300] s
BIN_SECONDS = ((0, 30), (31, 90), (91, 300))


@dataclass(frozen=True)
class GeneratorSpec:
    mdp: Mdp
    features: FeatureMap
    true_theta: RewardWeights
    n_sessions: int
    length_dist: tuple = ("geometric", 0.125)
    seed: int = 0
    group_label: str = "group"
    profile_template: Mapping[str, object] = field(default_factory=dict)
    schema: SchemaConfig | None = MUSEUM_SCHEMA

    def __post_init__(self):
        if self.n_sessions < 1:
            raise ConfigurationError("n_sessions must be at least 1")
        kind, param = self.length_dist
        if kind == "geometric":
            if not 0 < param <= 1:
                raise ConfigurationError(f"geometric p={param} outside (0, 1]")
        elif kind == "fixed":
            if int(param) < 1:
                raise ConfigurationError(f"fixed length {param} must be >= 1")
        else:
            raise ConfigurationError(f"unknown length distribution {kind!r}")


def museum_mdp(
    seed: int = 0,
    concentration: float = 0.2,
    discount: float = 0.9,
    horizon: int = 50,
    schema: SchemaConfig = MUSEUM_SCHEMA,
) -> Mdp:
    """Random museum-schema MDP: action ``a`` leads to a situation of topic ``a``.

    Successor situations within a topic follow a Dirichlet draw per (s, a);
    small concentrations make the outcome of a topic choice predictable.
    """
    rng = np.random.default_rng(seed)
    n, k = schema.n_states, schema.n_topics
    topic = topic_of_states(schema)
    P = np.zeros((n, k, n))
    for s in range(n):
        for a in range(k):
            targets = np.nonzero(topic == a)[0]
            P[s, a, targets] = rng.dirichlet(np.full(len(targets), concentration))
    d0 = rng.dirichlet(np.ones(n))
    return Mdp(
        state_space(schema),
        action_space(schema),
        TransitionModel(P, np.ones((n, k), dtype=bool)),
        d0,
        discount,
        horizon,
    )


def _draw_length(rng: np.random.Generator, length_dist) -> int:
    kind, param = length_dist
    if kind == "fixed":
        return int(param)
    return int(rng.geometric(param))


def sample_trajectories(spec: GeneratorSpec) -> SessionSet:
    """Draw sessions from the MaxEnt model of ``spec.true_theta``.

    Each session first draws its length ``L``, then ``s_0 ~ d0``, then at
    every step an (action, successor) pair from the horizon-``L`` MaxEnt
    policy and successor distribution.
    """
    mdp, schema = spec.mdp, spec.schema
    if schema is not None and mdp.n_states != schema.n_states:
        raise ConfigurationError("generator MDP does not match the schema")
    r = state_rewards(spec.true_theta, spec.features)
    rng = np.random.default_rng(spec.seed)
    S, A = mdp.n_states, mdp.n_actions
    P_flat = mdp.P.reshape(S, A * S)
    arrival_by_length: dict[int, np.ndarray] = {}
    sessions: list[Session] = []
    cdf0 = np.cumsum(mdp.initial_dist)
    for i in range(spec.n_sessions):
        L = _draw_length(rng, spec.length_dist)
        if L not in arrival_by_length:
            policy, _ = _soft_backups(mdp.replace(horizon=L), r)
            arrival_by_length[L] = policy.arrival
        arrival = arrival_by_length[L]
        s = int(min(np.searchsorted(cdf0, rng.random() * cdf0[-1], side="right"), S - 1))
        states, actions = [s], []
        for t in range(L - 1):
            w = arrival[t + 1]
            w = w - np.max(w)
            joint = P_flat[s] * np.tile(np.exp(w), A)
            cdf = np.cumsum(joint)
            idx = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), A * S - 1))
            a, s = divmod(idx, S)
            states.append(s)
            actions.append(a)
        sid = f"{spec.group_label}-{i:05d}"
        profile = UserProfile(sid, dict(spec.profile_template))
        sessions.append(Session(sid, profile, tuple(states), tuple(actions)))
    return SessionSet(tuple(sessions), schema, spec.group_label)


def enumerate_trajectories(
    mdp: Mdp, weights: RewardWeights, features: FeatureMap, horizon: int | None = None
) -> list[tuple[tuple[tuple[int, ...], tuple[int, ...]], float]]:
    """Every trajectory of ``horizon`` states with its exact MaxEnt probability.

    A trajectory is ``(states, actions)``. Its probability is
    ``d0(s_0) * prod P(s'|s,a) * exp(sum_t gamma^t R(s_t))``, normalised
    among trajectories sharing the same start state.
    """
    H = mdp.horizon if horizon is None else int(horizon)
    if H > 6:
        raise EnumerationTooLarge(f"horizon {H} exceeds the enumeration limit of 6")
    size = mdp.n_states**H
    if size > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(
            f"{mdp.n_states}^{H} = {size} state sequences exceeds {ENUMERATION_LIMIT}"
        )
    r = state_rewards(weights, features)
    P, gamma = mdp.P, mdp.discount
    mask = mdp.transitions.support_mask
    by_start: dict[int, list] = {}

    def extend(states, actions, weight, ret):
        t = len(states) - 1
        if t == H - 1:
            by_start[states[0]].append(((tuple(states), tuple(actions)), weight * np.exp(ret)))
            return
        s = states[-1]
        for a in range(mdp.n_actions):
            if not mask[s, a]:
                continue
            for s2 in range(mdp.n_states):
                p = P[s, a, s2]
                if p > 0:
                    extend(states + [s2], actions + [a], weight * p, ret + gamma ** (t + 1) * r[s2])

    for s0 in range(mdp.n_states):
        if mdp.initial_dist[s0] > 0:
            by_start[s0] = []
            extend([s0], [], 1.0, r[s0])
    out = []
    for s0, items in by_start.items():
        z = sum(w for _, w in items)
        if z <= 0:
            continue
        out.extend((traj, mdp.initial_dist[s0] * w / z) for traj, w in items)
    return out


def exact_feature_expectations(enumeration, features: FeatureMap, discount: float) -> np.ndarray:
    """Probability-weighted discounted feature sums over enumerated trajectories."""
    total = np.zeros(features.k)
    for (states, _), prob in enumeration:
        disc = discount ** np.arange(len(states))
        total += prob * (disc @ features.matrix[list(states)])
    return total


def write_session_log(
    sessions: SessionSet,
    path,
    seed: int = 0,
    invalid: Mapping[str, int] | None = None,
    start_time: int = 1_500_000_000,
) -> int:
    """Write sessions in the ingest log format; returns the number of lines.

    Durations are integer seconds drawn uniformly inside each situation's
    duration bin. ``invalid`` plants sessions that ingestion must drop:
    ``{"missing_attribute": n, "no_events": n}``.
    """
    schema = sessions.schema
    if schema.duration_bounds != MUSEUM_SCHEMA.duration_bounds:
        raise ConfigurationError("log writer only knows the 30 s / 90 s duration bins")
    rng = np.random.default_rng(seed)
    lines = []
    clock = start_time
    for sess in sessions:
        for name, value in sess.profile.static_attributes.items():
            lines.append({"session_id": sess.session_id, "attr": name, "value": value})
        for s in sess.state_seq:
            topic, obj, b = decode_state(s, schema)
            lo, hi = BIN_SECONDS[b]
            duration = int(rng.integers(lo, hi + 1))
            lines.append(
                {
                    "session_id": sess.session_id,
                    "timestamp": clock,
                    "topic_id": topic,
                    "object_order": obj,
                    "duration_s": duration,
                }
            )
            clock += duration + 5
        clock += 600
    label = sessions.group_label or "group"
    invalid = dict(invalid or {})
    for i in range(invalid.pop("missing_attribute", 0)):
        sid = f"{label}-noattr-{i:05d}"
        for obj in range(2):
            lines.append(
                {"session_id": sid, "timestamp": clock, "topic_id": 0, "object_order": obj, "duration_s": 10}
            )
            clock += 15
    for i in range(invalid.pop("no_events", 0)):
        lines.append({"session_id": f"{label}-empty-{i:05d}", "attr": "age", "value": 30})
    if invalid:
        raise ConfigurationError(f"unknown invalid-session kinds {sorted(invalid)}")
    text = "".join(json.dumps(rec) + "\n" for rec in lines)
    Path(path).write_text(text, encoding="utf-8")
    return len(lines)


def ground_truth_document(spec: GeneratorSpec, extra: Mapping | None = None) -> dict:
    doc = {
        "group_label": spec.group_label,
        "feature_names": list(spec.true_theta.feature_names),
        "true_theta": spec.true_theta.theta.tolist(),
        "feature_matrix": spec.features.matrix.tolist(),
        "n_sessions": spec.n_sessions,
        "length_dist": list(spec.length_dist),
        "seed": spec.seed,
        "profile_template": dict(spec.profile_template),
        "discount": spec.mdp.discount,
    }
    doc.update(extra or {})
    return doc
