"""Maximum-entropy IRL on a finite-horizon tabular MDP.

The model puts a distribution over trajectories of ``L`` states that start
in a given state::

    p(s_0, a_0, ..., s_{L-1} | s_0, L)  ∝  prod_t P(s_{t+1} | s_t, a_t) * exp(sum_t gamma^t R(s_t))

Write ``g_t(s) = gamma^t R(s)`` and let ``Z_t(s)`` be the total weight of all
continuations from ``s`` at time ``t`` (``Z_{L-1} = 1``)::

    Z_t(s)    = sum_a Z_t(s, a)
    Z_t(s, a) = sum_s' P(s'|s,a) exp(w_{t+1}(s')),   w_t(s) = g_t(s) + log Z_t(s)

The backward pass yields the time-indexed action distribution
``pi_t(a|s) = Z_t(s,a) / Z_t(s)`` and the successor distribution
``P(s'|s,a) exp(w_{t+1}(s')) / Z_t(s,a)``; pushing the start distribution
through both reproduces the trajectory distribution exactly. The
log-likelihood of a session (terms free of theta dropped) is
``sum_t g_t(s_t) - w_0(s_0)``, whose gradient averaged over sessions is the
empirical minus the expected discounted feature counts.

Everything is computed with log-domain shifts, so large rewards and long
horizons do not overflow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, ModelingError, UnsupportedActionError
from .ingest import SessionSet
from .mdp import PROB_TOL, FeatureMap, Mdp, RewardWeights, state_rewards
from .stats import FeatureExpectations

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    learning_rate: float = 0.05
    max_iters: int = 2000
    grad_tol: float = 1e-4
    discount: float = 0.9
    horizon: int | None = None
    init_theta: str = "zeros"
    init_scale: float = 0.01
    seed: int = 0
    check_invariants: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.grad_tol <= 0:
            raise ConfigurationError("grad_tol must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be at least 1")
        if self.init_theta not in ("zeros", "random"):
            raise ConfigurationError(f"unknown init_theta {self.init_theta!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_iters": self.max_iters,
            "grad_tol": self.grad_tol,
            "discount": self.discount,
            "horizon": self.horizon,
            "init_theta": self.init_theta,
            "init_scale": self.init_scale,
            "seed": self.seed,
            "check_invariants": self.check_invariants,
        }

    @classmethod
    def from_dict(cls, doc) -> "SolverConfig":
        return cls(**dict(doc or {}))


@dataclass(frozen=True)
class Policy:
    """Action probabilities ``probs[t, s, a]`` for decision steps ``t < horizon - 1``.

    A 2-D ``probs[s, a]`` is a stationary policy. ``arrival`` holds the
    log-weights ``w_t(s)`` from the backward pass; when present, successors
    follow the MaxEnt successor distribution instead of plain ``P``.
    Rows of states from which no trajectory of the remaining length exists
    are all-zero.
    """

    probs: np.ndarray
    arrival: np.ndarray | None = None

    def at(self, t: int) -> np.ndarray:
        return self.probs if self.probs.ndim == 2 else self.probs[t]

    def row_errors(self) -> float:
        """Largest deviation from 1 among non-empty rows."""
        sums = self.probs.sum(axis=-1)
        live = sums > 0
        return float(np.max(np.abs(sums[live] - 1.0), initial=0.0))


@dataclass(frozen=True)
class VisitationFrequencies:
    per_time: np.ndarray
    totals: np.ndarray

    def slice_errors(self) -> float:
        return float(np.max(np.abs(self.per_time.sum(axis=1) - 1.0), initial=0.0))


@dataclass
class FitResult:
    weights: RewardWeights
    ll_trace: list[float]
    grad_norm_trace: list[float]
    converged: bool
    iterations: int
    config: SolverConfig
    final_learning_rate: float
    moment_residual: float
    max_policy_row_error: float = 0.0
    max_visitation_error: float = 0.0
    message: str = ""


def _discounts(gamma: float, n: int) -> np.ndarray:
    return gamma ** np.arange(n)


def _check_inputs(mdp: Mdp, weights: RewardWeights, features: FeatureMap) -> np.ndarray:
    if features.n_states != mdp.n_states:
        raise ConfigurationError(
            f"feature map has {features.n_states} states, MDP has {mdp.n_states}"
        )
    return state_rewards(weights, features)


def _shift(nxt: np.ndarray) -> np.ndarray:
    shift = np.max(nxt, axis=0)
    return np.where(np.isfinite(shift), shift, 0.0)


@np.errstate(divide="ignore", under="ignore")
def _log_kernel_step(P2: np.ndarray, nxt: np.ndarray, support: np.ndarray) -> np.ndarray:
    """``log(P2 @ exp(nxt))`` column-wise with a per-column shift.

    ``P2`` is (rows, S) non-negative, ``nxt`` is (S, cols) log-weights and
    ``support`` is ``P2 > 0`` as floats. Entries lost to underflow are
    recomputed with an exact log-sum-exp.
    """
    shift = _shift(nxt)
    out = np.log(P2 @ np.exp(nxt - shift)) + shift
    bad = ~np.isfinite(out)
    if np.any(bad):
        lost = bad & (support @ np.isfinite(nxt) > 0)
        if np.any(lost):
            with np.errstate(divide="ignore"):
                logP = np.log(P2)
            for r, c in zip(*np.nonzero(lost)):
                out[r, c] = logsumexp(logP[r] + nxt[:, c])
    return out


def _soft_backups(mdp: Mdp, r: np.ndarray) -> tuple[Policy, np.ndarray]:
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    disc = _discounts(mdp.discount, H)
    P2 = mdp.P.reshape(S * A, S)
    support = (P2 > 0).astype(float)
    log_z = np.zeros((H, S))
    log_za = np.full((max(H - 1, 0), S, A), -np.inf)
    for t in range(H - 2, -1, -1):
        nxt = (disc[t + 1] * r + log_z[t + 1])[:, None]
        za = _log_kernel_step(P2, nxt, support)[:, 0].reshape(S, A)
        log_za[t] = za
        log_z[t] = _logsumexp_rows(za)
    arrival = disc[:, None] * r[None, :] + log_z
    with np.errstate(invalid="ignore"):
        probs = np.exp(log_za - log_z[:-1, :, None])
    return Policy(np.nan_to_num(probs, nan=0.0), arrival), log_z


@np.errstate(divide="ignore", under="ignore")
def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.exp(x - m[:, None]).sum(axis=1)) + m


def backward_pass(mdp: Mdp, weights: RewardWeights, features: FeatureMap) -> Policy:
    """Soft backups over ``mdp.horizon`` states; returns the time-indexed policy."""
    r = _check_inputs(mdp, weights, features)
    policy, log_z = _soft_backups(mdp, r)
    dead = np.nonzero((mdp.initial_dist > 0) & ~np.isfinite(log_z[0]))[0]
    if dead.size:
        s = dead[0]
        raise ModelingError(
            f"state {mdp.states.labels[s]} (index {s}) has initial mass but no "
            f"trajectory of {mdp.horizon} states leaves it (dead end downstream)"
        )
    return policy


def forward_pass(mdp: Mdp, policy: Policy) -> VisitationFrequencies:
    """Propagate ``d0`` for ``mdp.horizon`` steps under the policy."""
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    P = mdp.P
    per_time = np.zeros((H, S))
    per_time[0] = mdp.initial_dist
    for t in range(H - 1):
        pi = policy.at(t)
        if policy.arrival is None:
            succ = P
        else:
            w = policy.arrival[t + 1]
            finite = w[np.isfinite(w)]
            w = w - (finite.max() if finite.size else 0.0)
            with np.errstate(under="ignore"):
                tilted = P * np.exp(w)[None, None, :]
            norm = tilted.sum(axis=2, keepdims=True)
            succ = np.divide(tilted, norm, out=np.zeros_like(tilted), where=norm > 0)
        per_time[t + 1] = np.einsum("s,sa,sax->x", per_time[t], pi, succ)
    totals = _discounts(mdp.discount, H) @ per_time
    return VisitationFrequencies(per_time, totals)


def expected_feature_counts(freqs: VisitationFrequencies, features: FeatureMap) -> np.ndarray:
    if freqs.totals.shape[0] != features.n_states:
        raise ConfigurationError("visitation and feature map disagree on state count")
    return features.matrix.T @ freqs.totals


def evaluate_policy(
    mdp: Mdp, weights: RewardWeights, features: FeatureMap, policy: Policy
) -> float:
    """Expected discounted return from ``d0`` under ``policy``."""
    _check_inputs(mdp, weights, features)
    counts = expected_feature_counts(forward_pass(mdp, policy), features)
    return float(weights.theta @ counts)


@dataclass
class _ModelPass:
    """Length-conditioned model quantities for one reward vector."""

    mean_log_partition: float
    feature_counts: np.ndarray
    visitation_error: float


def _start_profile(mdp: Mdp, start_lengths: np.ndarray | None):
    if start_lengths is None:
        lengths = np.array([mdp.horizon])
        starts = mdp.initial_dist[:, None].copy()
        return lengths, starts
    rows = np.nonzero(start_lengths.sum(axis=1) > 0)[0]
    return rows + 1, start_lengths[rows].T.copy()


@np.errstate(under="ignore", over="ignore", invalid="ignore", divide="ignore")
def _model_pass(
    mdp: Mdp, r: np.ndarray, features: FeatureMap, start_lengths: np.ndarray | None
) -> _ModelPass:
    """Backward and forward passes for every observed session length at once.

    Actions only matter through ``K = sum_a P``, so both passes run on an
    S x S kernel with one column per distinct length, shortest first. At
    step ``t`` only the columns with ``L > t + 1`` are still running.
    """
    lengths, starts = _start_profile(mdp, start_lengths)
    H = int(lengths.max())
    S = mdp.n_states
    K = mdp.P.sum(axis=1)
    KT = np.ascontiguousarray(K.T)
    support = (K > 0).astype(float)
    disc = _discounts(mdp.discount, H)
    first_active = np.searchsorted(lengths, np.arange(H) + 1, side="right")
    log_z = np.zeros((H, S, len(lengths)))
    for t in range(H - 2, -1, -1):
        j = first_active[t]
        nxt = disc[t + 1] * r[:, None] + log_z[t + 1, :, j:]
        log_z[t, :, j:] = _log_kernel_step(K, nxt, support)

    w0 = r[:, None] + log_z[0]
    used = starts > 0
    if np.any(used & ~np.isfinite(w0)):
        s, j = np.argwhere(used & ~np.isfinite(w0))[0]
        raise ModelingError(
            f"state {mdp.states.labels[s]} (index {s}) starts a session of "
            f"{lengths[j]} states, but the MDP admits no such continuation"
        )
    mass = starts.sum(axis=0)
    mean_log_partition = float(np.sum(np.where(used, starts * w0, 0.0)))

    p = starts / mass
    occupancy = p @ mass
    worst = 0.0
    for t in range(H - 1):
        j = first_active[t]
        cur = p[:, j:]
        nxt = disc[t + 1] * r[:, None] + log_z[t + 1, :, j:]
        shift = _shift(nxt)
        # p_{t+1}(s') = sum_s p_t(s) K(s,s') exp(w_{t+1}(s') - log Z_t(s))
        ratio = np.where(cur > 0, cur / np.exp(log_z[t, :, j:] - shift), 0.0)
        new = np.exp(nxt - shift) * (KT @ ratio)
        if not np.all(np.isfinite(new)):
            new = _exact_forward_step(K, cur, log_z[t, :, j:], nxt)
        p = np.zeros_like(p)
        p[:, j:] = new
        worst = max(worst, float(np.max(np.abs(new.sum(axis=0) - 1.0))))
        occupancy += disc[t + 1] * (new @ mass[j:])
    return _ModelPass(mean_log_partition, features.matrix.T @ occupancy, worst)


def _exact_forward_step(K, cur, log_z_t, nxt):
    with np.errstate(divide="ignore"):
        logK = np.log(K)
        log_cur = np.log(cur)
    out = np.zeros_like(nxt)
    for j in range(cur.shape[1]):
        terms = log_cur[:, j, None] - log_z_t[:, j, None] + logK + nxt[None, :, j]
        terms = np.where(np.isnan(terms), -np.inf, terms)
        out[:, j] = np.exp(logsumexp(terms, axis=0))
    return out


def _check_expectations(mdp: Mdp, mu_hat: FeatureExpectations, features: FeatureMap):
    if mu_hat.k != features.k:
        raise ConfigurationError(f"mu_hat has {mu_hat.k} components, features {features.k}")
    if abs(mu_hat.discount - mdp.discount) > 0:
        raise ConfigurationError(
            f"mu_hat uses discount {mu_hat.discount}, MDP uses {mdp.discount}"
        )
    if mu_hat.start_lengths is not None and mu_hat.horizon != mdp.horizon:
        raise ConfigurationError(
            f"mu_hat truncated at horizon {mu_hat.horizon}, MDP horizon is {mdp.horizon}"
        )


def gradient(
    mdp: Mdp, weights: RewardWeights, features: FeatureMap, mu_hat: FeatureExpectations
) -> np.ndarray:
    """Empirical minus expected discounted feature counts.

    Expected counts are conditioned on the sessions' start states and lengths
    when ``mu_hat`` records them; otherwise every trajectory starts from
    ``d0`` and lasts ``mdp.horizon`` states.
    """
    r = _check_inputs(mdp, weights, features)
    _check_expectations(mdp, mu_hat, features)
    return mu_hat.mu - _model_pass(mdp, r, features, mu_hat.start_lengths).feature_counts


def log_likelihood(
    mdp: Mdp, weights: RewardWeights, features: FeatureMap, sessions: SessionSet
) -> float:
    """Summed session log-likelihood, dropping the terms that do not involve theta.

    Sessions are truncated at ``mdp.horizon``. Under deterministic dynamics
    this equals ``sum log pi_t(a_t | s_t)``.
    """
    r = _check_inputs(mdp, weights, features)
    if len(sessions) == 0:
        return 0.0
    H, S = mdp.horizon, mdp.n_states
    disc = _discounts(mdp.discount, H)
    mask = mdp.transitions.support_mask
    start_lengths = np.zeros((H, S))
    total = 0.0
    for sess in sessions:
        states = np.asarray(sess.state_seq[:H])
        actions = np.asarray(sess.action_seq[: len(states) - 1], dtype=int)
        if len(actions):
            unsupported = ~mask[states[:-1], actions]
            if np.any(unsupported):
                i = int(np.argmax(unsupported))
                raise UnsupportedActionError(
                    f"session {sess.session_id} takes unsupported action {actions[i]} "
                    f"in state {states[i]}"
                )
            if np.any(mdp.P[states[:-1], actions, states[1:]] <= 0):
                raise ModelingError(
                    f"session {sess.session_id} makes a transition with zero probability"
                )
        total += float(disc[: len(states)] @ r[states])
        start_lengths[len(states) - 1, states[0]] += 1
    model = _model_pass(mdp, r, features, start_lengths)
    return total - model.mean_log_partition


def mean_log_likelihood_and_gradient(
    mdp: Mdp, weights: RewardWeights, features: FeatureMap, mu_hat: FeatureExpectations
) -> tuple[float, np.ndarray, float]:
    """Per-session log-likelihood, gradient and worst visitation-slice error.

    Uses only the sufficient statistics in ``mu_hat``; the log-likelihood
    equals ``log_likelihood(...) / m`` for the sessions ``mu_hat`` came from.
    """
    r = _check_inputs(mdp, weights, features)
    _check_expectations(mdp, mu_hat, features)
    model = _model_pass(mdp, r, features, mu_hat.start_lengths)
    ll = float(weights.theta @ mu_hat.mu) - model.mean_log_partition
    return ll, mu_hat.mu - model.feature_counts, model.visitation_error


def _initial_theta(k: int, config: SolverConfig) -> np.ndarray:
    if config.init_theta == "zeros":
        return np.zeros(k)
    rng = np.random.default_rng(config.seed)
    return rng.normal(0.0, config.init_scale, size=k)


def fit(
    mdp: Mdp, features: FeatureMap, mu_hat: FeatureExpectations, config: SolverConfig
) -> FitResult:
    """Gradient ascent on the mean log-likelihood until the gradient is small.

    After ten consecutive likelihood decreases the step is halved; once it
    drops below 1e-12 the fit stops unconverged.
    """
    if config.horizon is not None and config.horizon != mdp.horizon:
        raise ConfigurationError(
            f"config horizon {config.horizon} differs from MDP horizon {mdp.horizon}"
        )
    if abs(config.discount - mdp.discount) > 0:
        raise ConfigurationError(
            f"config discount {config.discount} differs from MDP discount {mdp.discount}"
        )
    names = features.feature_names
    theta = _initial_theta(features.k, config)
    lr = config.learning_rate
    ll_trace: list[float] = []
    grad_trace: list[float] = []
    streak = 0
    converged = False
    message = "maximum iterations reached"
    policy_err = visit_err = 0.0
    iterations = 0
    grad = np.zeros(features.k)
    for it in range(config.max_iters + 1):
        weights = RewardWeights(theta, names)
        ll, grad, v_err = mean_log_likelihood_and_gradient(mdp, weights, features, mu_hat)
        visit_err = max(visit_err, v_err)
        if config.check_invariants:
            policy, _ = _soft_backups(mdp, features.matrix @ theta)
            policy_err = max(policy_err, policy.row_errors())
        gnorm = float(np.max(np.abs(grad)))
        if ll_trace and ll < ll_trace[-1]:
            streak += 1
        else:
            streak = 0
        ll_trace.append(ll)
        grad_trace.append(gnorm)
        if gnorm <= config.grad_tol:
            converged = True
            message = "gradient sup-norm below tolerance"
            break
        if it == config.max_iters:
            break
        if streak >= 10:
            lr /= 2.0
            streak = 0
            log.info("likelihood fell 10 times in a row; learning rate -> %g", lr)
            if lr < 1e-12:
                message = "learning rate underflow"
                break
        theta = theta + lr * grad
        iterations += 1
    if policy_err > PROB_TOL or visit_err > PROB_TOL:
        log.warning(
            "conservation drift: policy rows %.3g, visitation slices %.3g", policy_err, visit_err
        )
    return FitResult(
        weights=RewardWeights(theta, names),
        ll_trace=ll_trace,
        grad_norm_trace=grad_trace,
        converged=converged,
        iterations=iterations,
        config=config,
        final_learning_rate=lr,
        moment_residual=float(np.max(np.abs(grad))),
        max_policy_row_error=policy_err,
        max_visitation_error=visit_err,
        message=message,
    )

