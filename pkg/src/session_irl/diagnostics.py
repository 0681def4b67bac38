"""Randomised small MDPs and the finite-difference gradient check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import SessionSet
from .maxent import gradient, log_likelihood
from .mdp import FeatureMap, Mdp, RewardWeights, make_mdp
from .simulate import GeneratorSpec, sample_trajectories
from .stats import empirical_feature_expectations


@dataclass(frozen=True)
class ToyInstance:
    mdp: Mdp
    features: FeatureMap
    weights: RewardWeights
    sessions: SessionSet


def random_toy_mdp(
    rng: np.random.Generator,
    max_states: int = 5,
    max_actions: int = 3,
    max_horizon: int = 5,
    discount: float | None = None,
) -> Mdp:
    """Random MDP with sparse stochastic rows; every state keeps one action."""
    n = int(rng.integers(2, max_states + 1))
    k = int(rng.integers(1, max_actions + 1))
    H = int(rng.integers(2, max_horizon + 1))
    P = np.zeros((n, k, n))
    for s in range(n):
        keep = rng.random(k) < 0.75
        keep[rng.integers(k)] = True
        for a in np.nonzero(keep)[0]:
            targets = rng.random(n) < 0.6
            targets[rng.integers(n)] = True
            P[s, a, targets] = rng.dirichlet(np.ones(targets.sum()))
    d0 = rng.dirichlet(np.ones(n))
    gamma = float(rng.choice([0.5, 0.9, 0.99])) if discount is None else discount
    return make_mdp(P, d0, gamma, H)


def random_toy_instance(
    rng: np.random.Generator, n_sessions: int = 40, **mdp_kwargs
) -> ToyInstance:
    """Toy MDP, features in [0,1], theta in [-1,1]^k, and sessions of mixed length."""
    mdp = random_toy_mdp(rng, **mdp_kwargs)
    n_features = int(rng.integers(2, 5))
    features = FeatureMap(
        rng.random((mdp.n_states, n_features)), [f"f{i}" for i in range(n_features)]
    )
    weights = RewardWeights(rng.uniform(-1, 1, n_features), features.feature_names)
    data_theta = RewardWeights(rng.uniform(-1, 1, n_features), features.feature_names)
    sets = []
    for L in range(1, mdp.horizon + 1):
        spec = GeneratorSpec(
            mdp, features, data_theta, max(1, n_sessions // mdp.horizon),
            ("fixed", L), int(rng.integers(2**31)), f"len{L}", schema=None,
        )
        sets.extend(sample_trajectories(spec).sessions)
    return ToyInstance(mdp, features, weights, SessionSet(tuple(sets), None, "toy"))


def finite_difference_gradient(inst: ToyInstance, step: float = 1e-5) -> np.ndarray:
    """Central differences of the mean session log-likelihood."""
    m = len(inst.sessions)
    theta = inst.weights.theta
    names = inst.weights.feature_names
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        up = log_likelihood(inst.mdp, RewardWeights(theta + e, names), inst.features, inst.sessions)
        down = log_likelihood(inst.mdp, RewardWeights(theta - e, names), inst.features, inst.sessions)
        grad[i] = (up - down) / (2 * step * m)
    return grad


def analytic_gradient(inst: ToyInstance) -> np.ndarray:
    mu_hat = empirical_feature_expectations(
        inst.sessions, inst.features, inst.mdp.discount, inst.mdp.horizon
    )
    return gradient(inst.mdp, inst.weights, inst.features, mu_hat)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(n_instances: int = 20, seed: int = 0, step: float = 1e-5) -> list[float]:
    """Relative error of analytic vs finite-difference gradient per instance.

    Instances whose gradient vanishes identically (no behavioural choice
    anywhere) carry no information and are redrawn.
    """
    rng = np.random.default_rng(seed)
    errors = []
    while len(errors) < n_instances:
        inst = random_toy_instance(rng)
        numeric = finite_difference_gradient(inst, step)
        if np.linalg.norm(numeric) < 1e-6:
            continue
        errors.append(relative_error(analytic_gradient(inst), numeric))
    return errors
