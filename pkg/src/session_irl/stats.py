"""Empirical discounted feature expectations and visit counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EstimationError
from .ingest import SessionSet
from .mdp import FeatureMap


@dataclass(frozen=True)
class FeatureExpectations:
    """Average discounted feature sum over sessions.

    ``start_lengths[L - 1, s]`` is the fraction of sessions that start in
    ``s`` and last ``L`` steps after truncation at ``horizon``. The solver
    conditions its model-side counts on this profile, so that empirical and
    expected counts describe trajectories of the same lengths.
    """

    mu: np.ndarray
    n_sessions: int
    discount: float
    horizon: int
    start_lengths: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.mu.shape[0]


def empirical_feature_expectations(
    sessions: SessionSet, features: FeatureMap, discount: float, horizon: int
) -> FeatureExpectations:
    if len(sessions) == 0:
        raise EstimationError("feature expectations need at least one session")
    if not 0.0 <= discount < 1.0:
        raise ConfigurationError(f"discount {discount} outside [0, 1)")
    if horizon < 1:
        raise ConfigurationError("horizon must be positive")
    n_states = features.n_states
    weights = discount ** np.arange(horizon)
    # discounted occupancy per state, accumulated session by session in file order
    occupancy = np.zeros(n_states)
    start_lengths = np.zeros((horizon, n_states))
    for sess in sessions:
        states = np.asarray(sess.state_seq[:horizon])
        if states.min() < 0 or states.max() >= n_states:
            raise ConfigurationError(f"session {sess.session_id} has out-of-range states")
        np.add.at(occupancy, states, weights[: len(states)])
        start_lengths[len(states) - 1, states[0]] += 1
    m = len(sessions)
    mu = features.matrix.T @ (occupancy / m)
    return FeatureExpectations(mu, m, float(discount), int(horizon), start_lengths / m)


def state_visit_counts(sessions: SessionSet, n_states: int) -> np.ndarray:
    counts = np.zeros(n_states, dtype=np.int64)
    for sess in sessions:
        counts += np.bincount(sess.state_seq, minlength=n_states)
    return counts
