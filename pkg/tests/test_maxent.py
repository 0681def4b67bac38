import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from session_irl.diagnostics import (
    analytic_gradient,
    finite_difference_gradient,
    random_toy_instance,
    relative_error,
)
from session_irl.errors import ConfigurationError, ModelingError, UnsupportedActionError
from session_irl.ingest import SessionSet, UserProfile, Session
from session_irl.maxent import (
    Policy,
    SolverConfig,
    VisitationFrequencies,
    backward_pass,
    evaluate_policy,
    expected_feature_counts,
    fit,
    forward_pass,
    gradient,
    log_likelihood,
    mean_log_likelihood_and_gradient,
)
from session_irl.mdp import FeatureMap, RewardWeights, make_mdp
from session_irl.simulate import enumerate_trajectories, exact_feature_expectations
from session_irl.stats import FeatureExpectations, empirical_feature_expectations

from conftest import (
    brute_force,
    one_hot_features,
    oracle_per_time,
    oracle_policy,
    oracle_totals,
    weights_for,
)


def sess(sid, states, actions):
    return Session(sid, UserProfile(sid, {}), tuple(states), tuple(actions))


@pytest.fixture
def three_state():
    P = np.zeros((3, 2, 3))
    P[0, 0] = [0, 0.7, 0.3]
    P[0, 1] = [0.2, 0, 0.8]
    P[1, 0] = [0.5, 0.5, 0]
    P[1, 1] = [0, 0, 1]
    P[2, 0] = [1, 0, 0]
    mdp = make_mdp(P, [0.5, 0.3, 0.2], 0.9, 3)
    F = one_hot_features(3)
    return mdp, F, weights_for(F, [0.5, -1.0, 1.0])


# values below come from exhaustive enumeration of all 3-state trajectories
FROZEN_POLICY_T0 = np.array(
    [[0.3405131961976985, 0.6594868038023016],
     [0.45452984207127356, 0.5454701579287264],
     [1.0, 0.0]]
)
FROZEN_POLICY_T1 = np.array(
    [[0.31964521724895356, 0.6803547827510464],
     [0.30188938644652374, 0.6981106135534763],
     [1.0, 0.0]]
)
FROZEN_TOTALS = np.array([1.30961770268295, 0.43329995871506166, 0.9670823386019887])
FROZEN_LL_012 = -1.8717402887525871


def test_backward_frozen_values(three_state):
    mdp, F, w = three_state
    policy = backward_pass(mdp, w, F)
    np.testing.assert_allclose(policy.at(0), FROZEN_POLICY_T0, atol=1e-12)
    np.testing.assert_allclose(policy.at(1), FROZEN_POLICY_T1, atol=1e-12)


def test_forward_frozen_totals(three_state):
    mdp, F, w = three_state
    freqs = forward_pass(mdp, backward_pass(mdp, w, F))
    np.testing.assert_allclose(freqs.totals, FROZEN_TOTALS, atol=1e-12)
    np.testing.assert_allclose(expected_feature_counts(freqs, F), FROZEN_TOTALS, atol=1e-12)


def test_log_likelihood_frozen(three_state):
    mdp, F, w = three_state
    sessions = SessionSet((sess("x", [0, 1, 2], [0, 1]),), None)
    assert log_likelihood(mdp, w, F, sessions) == pytest.approx(FROZEN_LL_012, abs=1e-12)


def test_uniform_policy_at_zero_theta():
    n, k = 4, 3
    P = np.full((n, k, n), 1 / n)
    mdp = make_mdp(P, np.full(n, 1 / n), 0.9, 5)
    F = FeatureMap(np.random.default_rng(0).random((n, 2)), ["a", "b"])
    policy = backward_pass(mdp, RewardWeights.zeros(F), F)
    np.testing.assert_allclose(policy.probs, 1 / k, atol=1e-15)


def test_single_action_policy_is_deterministic(chain_mdp):
    F = one_hot_features(3)
    policy = backward_pass(chain_mdp, weights_for(F, [1, -2, 3]), F)
    np.testing.assert_array_equal(policy.probs[:, :, 0], 1.0)


def test_dead_end_start_raises():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0  # state 1 has no way out
    mdp = make_mdp(P, [0.0, 1.0], 0.9, 3)
    F = one_hot_features(2)
    with pytest.raises(ModelingError, match="s1"):
        backward_pass(mdp, RewardWeights.zeros(F), F)


def test_forward_deterministic_chain(chain_mdp):
    F = one_hot_features(3)
    freqs = forward_pass(chain_mdp, backward_pass(chain_mdp, RewardWeights.zeros(F), F))
    np.testing.assert_array_equal(freqs.per_time, np.eye(3))
    np.testing.assert_allclose(freqs.totals, [1, 0.9, 0.81])


def test_forward_absorbing_state():
    mdp = make_mdp(np.ones((1, 1, 1)), [1.0], 0.5, 4)
    F = one_hot_features(1)
    freqs = forward_pass(mdp, backward_pass(mdp, weights_for(F, [2.0]), F))
    np.testing.assert_array_equal(freqs.per_time, np.ones((4, 1)))


def test_forward_stationary_policy_uses_raw_dynamics(fork_mdp):
    policy = Policy(np.array([[0.25, 0.75], [1, 0], [1, 0]]))
    freqs = forward_pass(fork_mdp, policy)
    np.testing.assert_allclose(freqs.per_time[1], [0, 0.25, 0.75])


def test_expected_counts_examples():
    F = FeatureMap(np.array([[1, 0], [0.5, 0.5], [0.5, 0.5]]), ["a", "b"])
    single = VisitationFrequencies(np.zeros((1, 3)), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(expected_feature_counts(single, F), [0.5, 0.5])
    spread = VisitationFrequencies(np.zeros((1, 3)), np.array([0.0, 1.5, 1.5]))
    np.testing.assert_array_equal(expected_feature_counts(spread, F), [1.5, 1.5])


def test_toy_policy_matches_enumeration(toys):
    for inst in toys:
        mdp, F, w = inst.mdp, inst.features, inst.weights
        dist = brute_force(mdp, w.theta, F.matrix, mdp.horizon)
        policy = backward_pass(mdp, w, F)
        for t in range(mdp.horizon - 1):
            oracle = oracle_policy(dist, t, mdp.n_states, mdp.n_actions)
            reached = ~np.isnan(oracle[:, 0])
            np.testing.assert_allclose(policy.at(t)[reached], oracle[reached], atol=1e-8)


def test_toy_forward_matches_enumeration(toys):
    for inst in toys:
        mdp, F, w = inst.mdp, inst.features, inst.weights
        dist = brute_force(mdp, w.theta, F.matrix, mdp.horizon)
        freqs = forward_pass(mdp, backward_pass(mdp, w, F))
        np.testing.assert_allclose(freqs.totals, oracle_totals(dist, mdp.n_states, mdp.discount), atol=1e-8)
        np.testing.assert_allclose(freqs.per_time, oracle_per_time(dist, mdp.n_states, mdp.horizon), atol=1e-8)
        assert freqs.slice_errors() <= 1e-9
        np.testing.assert_allclose(
            expected_feature_counts(freqs, F),
            F.matrix.T @ oracle_totals(dist, mdp.n_states, mdp.discount),
            atol=1e-8,
        )


def test_toy_log_likelihood_matches_enumeration(toys):
    for inst in toys:
        mdp, F, w = inst.mdp, inst.features, inst.weights
        expected = 0.0
        cache = {}
        for s in inst.sessions:
            L = len(s)
            if L not in cache:
                cache[L] = brute_force(mdp, w.theta, F.matrix, L)
            p = cache[L][(s.state_seq, s.action_seq)] / mdp.initial_dist[s.state_seq[0]]
            dynamics = sum(
                math.log(mdp.P[a, b, c]) for a, b, c in zip(s.state_seq, s.action_seq, s.state_seq[1:])
            )
            expected += math.log(p) - dynamics
        assert log_likelihood(mdp, w, F, inst.sessions) == pytest.approx(expected, abs=1e-8)


def test_log_likelihood_single_action_is_zero(chain_mdp):
    F = one_hot_features(3)
    sessions = SessionSet((sess("a", [0, 1, 2], [0, 0]), sess("b", [0, 1], [0])), None)
    assert log_likelihood(chain_mdp, weights_for(F, [0.3, 1, -2]), F, sessions) == pytest.approx(0, abs=1e-12)


def test_log_likelihood_symmetric_one_step():
    k = 4
    P = np.zeros((k + 1, k, k + 1))
    for a in range(k):
        P[0, a, a + 1] = 1.0
        P[a + 1, :, a + 1] = 1.0
    mdp = make_mdp(P, np.eye(k + 1)[0], 0.9, 2)
    F = one_hot_features(k + 1)
    sessions = SessionSet((sess("a", [0, 3], [2]),), None)
    assert log_likelihood(mdp, RewardWeights.zeros(F), F, sessions) == pytest.approx(math.log(1 / k))


def test_log_likelihood_unsupported_action(fork_mdp):
    F = one_hot_features(3)
    mdp = make_mdp(np.where(np.arange(2)[None, :, None] == 1, 0, fork_mdp.P), [1, 0, 0], 0.9, 2)
    with pytest.raises(UnsupportedActionError):
        log_likelihood(mdp, RewardWeights.zeros(F), F, SessionSet((sess("a", [0, 2], [1]),), None))


def test_gradient_symmetry(fork_mdp):
    F = one_hot_features(3)
    sessions = SessionSet((sess("a", [0, 1], [0]), sess("b", [0, 2], [1])), None)
    mu = empirical_feature_expectations(sessions, F, 0.9, 2)
    g = gradient(fork_mdp, weights_for(F, [0.0, 0.4, 0.4]), F, mu)
    assert g[1] == pytest.approx(g[2], abs=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 10:
        inst = random_toy_instance(rng)
        numeric = finite_difference_gradient(inst, 1e-5)
        if np.linalg.norm(numeric) < 1e-6:
            continue
        assert relative_error(analytic_gradient(inst), numeric) <= 1e-4
        checked += 1


def test_mean_ll_equals_per_session_ll(toys):
    for inst in toys[:5]:
        mu = empirical_feature_expectations(inst.sessions, inst.features, inst.mdp.discount, inst.mdp.horizon)
        ll, g, _ = mean_log_likelihood_and_gradient(inst.mdp, inst.weights, inst.features, mu)
        direct = log_likelihood(inst.mdp, inst.weights, inst.features, inst.sessions) / len(inst.sessions)
        assert ll == pytest.approx(direct, abs=1e-10)
        np.testing.assert_allclose(g, gradient(inst.mdp, inst.weights, inst.features, mu), atol=1e-14)


def _model_moments(mdp, F, theta):
    enum = enumerate_trajectories(mdp, RewardWeights(theta, F.feature_names), F)
    mu = exact_feature_expectations(enum, F, mdp.discount)
    return FeatureExpectations(mu, 1, mdp.discount, mdp.horizon)


def test_fit_matches_moments_of_model_data(toys):
    for inst in toys[:8]:
        mdp, F = inst.mdp, inst.features
        mu = _model_moments(mdp, F, inst.weights.theta)
        cfg = SolverConfig(learning_rate=0.5, max_iters=20000, grad_tol=1e-5,
                           discount=mdp.discount, horizon=mdp.horizon)
        result = fit(mdp, F, mu, cfg)
        assert result.converged, result.message
        recovered = _model_moments(mdp, F, result.weights.theta).mu
        assert np.max(np.abs(recovered - mu.mu)) <= 1e-4
        # the fitted point is stationary when re-evaluated
        assert np.max(np.abs(gradient(mdp, result.weights, F, mu))) <= cfg.grad_tol
        assert result.max_policy_row_error <= 1e-9 and result.max_visitation_error <= 1e-9


def test_fit_direction_is_forced(fork_mdp):
    F = FeatureMap(np.array([[0.0], [1.0], [0.0]]), ["high"])
    sessions = SessionSet(tuple(sess(f"s{i}", [0, 1], [0]) for i in range(3)) + (sess("z", [0, 2], [1]),), None)
    mu = empirical_feature_expectations(sessions, F, 0.9, 2)
    result = fit(fork_mdp, F, mu, SolverConfig(discount=0.9, horizon=2, learning_rate=0.5))
    assert result.converged
    assert result.weights.theta[0] > 0
    # the fitted choice odds reproduce the observed 3:1
    assert result.weights.theta[0] == pytest.approx(math.log(3) / 0.9, abs=1e-3)


def test_fit_halves_step_after_ten_decreases(fork_mdp):
    # a step of 12 overshoots the symmetric optimum with slowly growing amplitude
    F = FeatureMap(np.array([[0.0], [1.0], [0.0]]), ["high"])
    sessions = SessionSet((sess("a", [0, 1], [0]), sess("b", [0, 2], [1])), None)
    mu = empirical_feature_expectations(sessions, F, 0.9, 2)
    cfg = SolverConfig(discount=0.9, horizon=2, learning_rate=12.0, init_theta="random", seed=1)
    result = fit(fork_mdp, F, mu, cfg)
    assert all(b < a for a, b in zip(result.ll_trace[:11], result.ll_trace[1:11]))
    assert result.final_learning_rate == 6.0
    assert result.converged


def test_fit_aborts_on_learning_rate_underflow(fork_mdp, monkeypatch):
    import session_irl.maxent as maxent

    calls = iter(range(10**6))
    monkeypatch.setattr(
        maxent,
        "mean_log_likelihood_and_gradient",
        lambda *a: (-float(next(calls)), np.array([1.0]), 0.0),
    )
    F = FeatureMap(np.array([[0.0], [1.0], [0.0]]), ["high"])
    mu = FeatureExpectations(np.array([0.5]), 1, 0.9, 2)
    result = fit(fork_mdp, F, mu, SolverConfig(discount=0.9, horizon=2, max_iters=10**5))
    assert not result.converged
    assert result.message == "learning rate underflow"
    assert result.final_learning_rate < 1e-12


def test_fit_is_deterministic(toys):
    inst = toys[0]
    mu = empirical_feature_expectations(inst.sessions, inst.features, inst.mdp.discount, inst.mdp.horizon)
    cfg = SolverConfig(discount=inst.mdp.discount, horizon=inst.mdp.horizon, init_theta="random", seed=5)
    a = fit(inst.mdp, inst.features, mu, cfg)
    b = fit(inst.mdp, inst.features, mu, cfg)
    assert a.ll_trace == b.ll_trace and a.grad_norm_trace == b.grad_norm_trace
    assert np.array_equal(a.weights.theta, b.weights.theta)


def test_fit_rejects_mismatched_discount(toys):
    inst = toys[0]
    mu = empirical_feature_expectations(inst.sessions, inst.features, inst.mdp.discount, inst.mdp.horizon)
    with pytest.raises(ConfigurationError):
        fit(inst.mdp, inst.features, mu, SolverConfig(discount=0.123, horizon=inst.mdp.horizon))


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(grad_tol=-1)
    with pytest.raises(ConfigurationError):
        SolverConfig(max_iters=0)
    cfg = SolverConfig(seed=3)
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg


def test_evaluate_policy_examples():
    mdp = make_mdp(np.ones((1, 1, 1)), [1.0], 0.9, 6)
    F = one_hot_features(1)
    w = weights_for(F, [1.0])
    assert evaluate_policy(mdp, w, F, backward_pass(mdp, w, F)) == pytest.approx(sum(0.9**t for t in range(6)))
    zero = RewardWeights.zeros(F)
    assert evaluate_policy(mdp, zero, F, backward_pass(mdp, zero, F)) == 0.0


def test_evaluate_policy_matches_enumeration(toys):
    for inst in toys:
        mdp, F, w = inst.mdp, inst.features, inst.weights
        dist = brute_force(mdp, w.theta, F.matrix, mdp.horizon)
        oracle = sum(
            p * sum(mdp.discount**t * float(F.matrix[s] @ w.theta) for t, s in enumerate(states))
            for (states, _), p in dist.items()
        )
        assert evaluate_policy(mdp, w, F, backward_pass(mdp, w, F)) == pytest.approx(oracle, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_policy_invariant_to_constant_reward_shift(seed, c):
    inst = random_toy_instance(np.random.default_rng(seed), n_sessions=5)
    mdp = inst.mdp
    n = mdp.n_states
    # a constant column feature makes theta_c add exactly c to every state reward
    M = np.hstack([inst.features.matrix, np.ones((n, 1))])
    F = FeatureMap(M, [*inst.features.feature_names, "const"])
    base = backward_pass(mdp, RewardWeights(np.append(inst.weights.theta, 0.0), F.feature_names), F)
    shifted = backward_pass(mdp, RewardWeights(np.append(inst.weights.theta, c), F.feature_names), F)
    assert np.max(np.abs(base.probs - shifted.probs)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_policy_rows_and_slices_normalized(seed):
    inst = random_toy_instance(np.random.default_rng(seed), n_sessions=5)
    policy = backward_pass(inst.mdp, inst.weights, inst.features)
    assert policy.row_errors() <= 1e-9
    assert forward_pass(inst.mdp, policy).slice_errors() <= 1e-9
