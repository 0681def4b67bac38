"""Finite MDP without reward, state features and linear rewards.

All containers are frozen dataclasses holding read-only numpy arrays, so a
single instance can be shared between concurrent fits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UnsupportedActionError

PROB_TOL = 1e-9


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StateSpace:
    n_states: int
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.n_states < 1:
            raise ConfigurationError("state space needs at least one state")
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if len(self.labels) != self.n_states:
            raise ConfigurationError(
                f"{len(self.labels)} state labels for {self.n_states} states"
            )

    @classmethod
    def anonymous(cls, n_states: int) -> "StateSpace":
        return cls(n_states, tuple(f"s{i}" for i in range(n_states)))


@dataclass(frozen=True)
class ActionSpace:
    n_actions: int
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.n_actions < 1:
            raise ConfigurationError("action space needs at least one action")
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if len(self.labels) != self.n_actions:
            raise ConfigurationError(
                f"{len(self.labels)} action labels for {self.n_actions} actions"
            )

    @classmethod
    def anonymous(cls, n_actions: int) -> "ActionSpace":
        return cls(n_actions, tuple(f"a{i}" for i in range(n_actions)))


@dataclass(frozen=True)
class TransitionModel:
    """``probs[s, a, s']`` with ``support_mask[s, a]`` flagging defined actions."""

    probs: np.ndarray
    support_mask: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        mask = _frozen(self.support_mask, dtype=bool)
        if probs.ndim != 3 or probs.shape[0] != probs.shape[2]:
            raise ConfigurationError(f"transition tensor has shape {probs.shape}")
        if mask.shape != probs.shape[:2]:
            raise ConfigurationError(
                f"support mask {mask.shape} does not match transitions {probs.shape}"
            )
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "support_mask", mask)

    @classmethod
    def from_probs(cls, probs) -> "TransitionModel":
        """Infer the support mask from the non-zero rows."""
        probs = np.asarray(probs, dtype=float)
        return cls(probs, probs.sum(axis=2) > 0)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """State-indexed feature matrix with values in [0, 1]."""

    matrix: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        matrix = _frozen(self.matrix)
        if matrix.ndim != 2:
            raise ConfigurationError("feature matrix must be two-dimensional")
        names = tuple(str(x) for x in self.feature_names)
        if len(names) != matrix.shape[1]:
            raise ConfigurationError(
                f"{len(names)} feature names for {matrix.shape[1]} columns"
            )
        if matrix.size and (matrix.min() < 0 or matrix.max() > 1):
            raise ConfigurationError("feature values must lie in [0, 1]")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "feature_names", names)

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    def __getitem__(self, s: int) -> np.ndarray:
        return self.matrix[s]


@dataclass(frozen=True)
class RewardWeights:
    theta: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        theta = _frozen(self.theta)
        if theta.ndim != 1:
            raise ConfigurationError("theta must be a vector")
        names = tuple(str(x) for x in self.feature_names)
        if len(names) != theta.shape[0]:
            raise ConfigurationError(
                f"{len(names)} feature names for {theta.shape[0]} weights"
            )
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "feature_names", names)

    @classmethod
    def zeros(cls, features: FeatureMap) -> "RewardWeights":
        return cls(np.zeros(features.k), features.feature_names)

    @property
    def k(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class Mdp:
    """A finite MDP with the reward removed, plus a session-length bound."""

    states: StateSpace
    actions: ActionSpace
    transitions: TransitionModel
    initial_dist: np.ndarray
    discount: float
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "horizon", int(self.horizon))
        n, a = self.states.n_states, self.actions.n_actions
        if self.transitions.probs.shape != (n, a, n):
            raise ConfigurationError(
                f"transitions {self.transitions.probs.shape} do not match "
                f"{n} states x {a} actions"
            )
        if self.initial_dist.shape != (n,):
            raise ConfigurationError(
                f"initial distribution has shape {self.initial_dist.shape}"
            )

    @property
    def n_states(self) -> int:
        return self.states.n_states

    @property
    def n_actions(self) -> int:
        return self.actions.n_actions

    @property
    def P(self) -> np.ndarray:
        return self.transitions.probs

    def replace(self, **changes) -> "Mdp":
        kwargs = dict(
            states=self.states,
            actions=self.actions,
            transitions=self.transitions,
            initial_dist=self.initial_dist,
            discount=self.discount,
            horizon=self.horizon,
        )
        kwargs.update(changes)
        return Mdp(**kwargs)


def _check_dims(weights: RewardWeights, features: FeatureMap):
    if weights.k != features.k:
        raise ConfigurationError(
            f"weights have {weights.k} components, feature map has {features.k}"
        )


def state_rewards(weights: RewardWeights, features: FeatureMap) -> np.ndarray:
    """Reward of every state, ``F @ theta``."""
    _check_dims(weights, features)
    return features.matrix @ weights.theta


def reward_of_state(weights: RewardWeights, features: FeatureMap, s: int) -> float:
    _check_dims(weights, features)
    if not 0 <= s < features.n_states:
        raise ConfigurationError(f"state {s} outside 0..{features.n_states - 1}")
    return float(np.dot(weights.theta, features.matrix[s]))


def expected_next_reward(
    mdp: Mdp, weights: RewardWeights, features: FeatureMap, s: int, a: int
) -> float:
    """Expected reward of the successor state after taking ``a`` in ``s``."""
    if features.n_states != mdp.n_states:
        raise ConfigurationError("feature map and MDP disagree on state count")
    if not mdp.transitions.support_mask[s, a]:
        raise UnsupportedActionError(f"action {a} is not supported in state {s}")
    return float(mdp.P[s, a] @ state_rewards(weights, features))


def validate_mdp(mdp: Mdp, tol: float = PROB_TOL) -> list[str]:
    """List every violated stochasticity invariant; empty means valid."""
    problems = []
    P = mdp.P
    mask = mdp.transitions.support_mask
    if np.any(P < 0):
        for s, a, s2 in zip(*np.nonzero(P < 0)):
            problems.append(f"negative transition probability at ({s},{a},{s2})")
    sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(mask)):
        if abs(sums[s, a] - 1.0) > tol:
            problems.append(
                f"transition row ({s},{a}) sums to {sums[s, a]!r}, expected 1"
            )
    for s, a in zip(*np.nonzero(~mask)):
        if np.any(P[s, a] != 0):
            problems.append(f"unsupported row ({s},{a}) is not all-zero")
    d0 = mdp.initial_dist
    for s in np.nonzero(d0 < 0)[0]:
        problems.append(f"negative initial probability for state {s}")
    if abs(d0.sum() - 1.0) > tol:
        problems.append(f"initial distribution sums to {d0.sum()!r}, expected 1")
    if not 0.0 <= mdp.discount < 1.0:
        problems.append(f"discount {mdp.discount} outside [0, 1)")
    if mdp.horizon < 1:
        problems.append(f"horizon {mdp.horizon} is not positive")
    return problems


def mdp_to_dict(mdp: Mdp, features: FeatureMap | None = None) -> dict:
    doc = {
        "states": list(mdp.states.labels),
        "actions": list(mdp.actions.labels),
        "transitions": mdp.P.tolist(),
        "support_mask": mdp.transitions.support_mask.tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
        "discount": mdp.discount,
        "horizon": mdp.horizon,
    }
    if features is not None:
        doc["feature_matrix"] = features.matrix.tolist()
        doc["feature_names"] = list(features.feature_names)
    return doc


def mdp_from_dict(doc: dict) -> tuple[Mdp, FeatureMap | None]:
    probs = np.array(doc["transitions"], dtype=float)
    if "support_mask" in doc:
        transitions = TransitionModel(probs, np.array(doc["support_mask"], dtype=bool))
    else:
        transitions = TransitionModel.from_probs(probs)
    states = StateSpace(len(doc["states"]), doc["states"])
    actions = ActionSpace(len(doc["actions"]), doc["actions"])
    mdp = Mdp(
        states,
        actions,
        transitions,
        np.array(doc["initial_dist"], dtype=float),
        doc["discount"],
        doc["horizon"],
    )
    features = None
    if "feature_matrix" in doc:
        features = FeatureMap(np.array(doc["feature_matrix"]), doc["feature_names"])
    return mdp, features


def save_mdp(path, mdp: Mdp, features: FeatureMap | None = None) -> None:
    # json writes floats via repr, which round-trips doubles exactly
    Path(path).write_text(json.dumps(mdp_to_dict(mdp, features)), encoding="utf-8")


def load_mdp(path) -> tuple[Mdp, FeatureMap | None]:
    return mdp_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_mdp(
    probs,
    initial_dist,
    discount: float,
    horizon: int,
    state_labels: Sequence[str] | None = None,
    action_labels: Sequence[str] | None = None,
) -> Mdp:
    """Convenience constructor; the support mask comes from non-zero rows."""
    probs = np.asarray(probs, dtype=float)
    n, a, _ = probs.shape
    states = StateSpace(n, state_labels) if state_labels else StateSpace.anonymous(n)
    actions = ActionSpace(a, action_labels) if action_labels else ActionSpace.anonymous(a)
    return Mdp(states, actions, TransitionModel.from_probs(probs), initial_dist, discount, horizon)
