import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentcoord.core import BudgetSpec, GraphSpec
from agentcoord.env import SimulatedBackend, reset, step
from agentcoord.policy import (PolicyParams, SupportError, feature_dim, featurize_state,
                               forward_logits, greedy_action, kl_divergence, masked_distribution,
                               mix_reference, prior_action_distribution, sample_action,
                               structural_mask)
from conftest import central_diff, rel_err

dists = st.lists(st.floats(0.01, 10), min_size=2, max_size=7).map(lambda w: np.array(w) / sum(w))


def _gs(z, p):
    return GraphSpec(np.array(z, float), np.array(p, float), 0.4, "")


def test_fresh_state_features(pipe_tasks):
    s = reset(pipe_tasks[0], BudgetSpec(3000, 3000), 3)
    f = featurize_state(s, np.zeros(8), t_max=6)
    assert f.shape == (feature_dim(8, 3),)
    assert np.all(f[8:12] == 0) and f[-1] == 1.0


def test_features_after_invocation(math_pool, hard_tasks, rng):
    s = reset(hard_tasks[0], BudgetSpec(10**6, 10**6), 6)
    s, _, _ = step(s, 3, SimulatedBackend(math_pool), 0.0, rng, 12)
    f = featurize_state(s, np.zeros(8), t_max=12)
    assert f[8 + 3] == 1.0 and f[8 + 7 + 3] == 1 / 12


def test_exhausted_budget_fraction(pipe_pool, pipe_tasks, rng):
    s = reset(pipe_tasks[0], BudgetSpec(10, 10), 3)
    s, _, _ = step(s, 0, SimulatedBackend(pipe_pool), 0.0, rng)
    assert featurize_state(s, np.zeros(8))[-1] == 0.0


def test_zero_init_logits_and_determinism():
    params = PolicyParams.create(8, 3, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=feature_dim(8, 3))
    assert np.all(forward_logits(params, x) == 0.0)
    params = params.with_theta(np.random.default_rng(2).normal(size=params.theta.size))
    np.testing.assert_array_equal(forward_logits(params, x), forward_logits(params, x))


def test_logit_jacobian_finite_differences():
    rng = np.random.default_rng(3)
    params = PolicyParams.create(8, 3, hidden=6, rng=rng)
    params = params.with_theta(rng.normal(size=params.theta.size))
    x = rng.normal(size=feature_dim(8, 3))
    from agentcoord import nn
    for k in range(4):
        out, hid = nn.forward(params.shape, params.theta, x[None])
        dout = np.zeros((1, 4))
        dout[0, k] = 1.0
        g = nn.backward(params.shape, params.theta, x[None], hid, dout)
        fd = central_diff(lambda t: forward_logits(params.with_theta(t), x)[k], params.theta)
        assert rel_err(g, fd) < 1e-4


def test_mask_gating_and_edges(pipe_pool, pipe_tasks, rng):
    gs = _gs([1, 0, 1], [[0, 0, 0], [0, 0, 0.5], [0.7, 0, 0]])
    s = reset(pipe_tasks[0], BudgetSpec(3000, 3000), 3)
    assert structural_mask(gs, s).tolist() == [True, False, True, True]
    s, _, _ = step(s, 0, SimulatedBackend(pipe_pool), 0.0, rng)
    assert structural_mask(gs, s).tolist() == [False, False, False, True]
    assert structural_mask(None, s).all()


def test_masked_distribution_examples():
    np.testing.assert_allclose(masked_distribution(np.zeros(3), np.array([1, 0, 1], bool)),
                               [0.5, 0, 0.5])
    np.testing.assert_allclose(masked_distribution(np.array([math.log(2), 0.0]), np.ones(2, bool)),
                               [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_array_equal(masked_distribution(np.ones(3), np.array([0, 0, 1], bool)), [0, 0, 1])
    with pytest.raises(ValueError):
        masked_distribution(np.zeros(2), np.zeros(2, bool))


def test_prior_distribution_examples(pipe_pool, pipe_tasks, rng):
    gs = _gs([1, 1, 1], [[0, 0.6, 0.2], [0, 0, 0], [0, 0, 0]])
    s = reset(pipe_tasks[0], BudgetSpec(3000, 3000), 3)
    s0, _, _ = step(s, 0, SimulatedBackend(pipe_pool), 0.0, rng)
    np.testing.assert_allclose(prior_action_distribution(gs, s0, 0.1, np.ones(4, bool)),
                               [0, 0.675, 0.225, 0.1])
    s1, _, _ = step(s, 1, SimulatedBackend(pipe_pool), 0.0, rng)
    np.testing.assert_allclose(prior_action_distribution(gs, s1, 0.1, np.array([1, 0, 1, 1], bool)),
                               [0.45, 0, 0.45, 0.1])
    first = _gs([1, 0], [[0, 0], [0, 0]])
    s2 = reset(pipe_tasks[0], BudgetSpec(3000, 3000), 2)
    np.testing.assert_allclose(prior_action_distribution(first, s2, 0.1), [0.9, 0, 0.1])


def test_mix_reference():
    p = np.array([0.2, 0.8])
    np.testing.assert_array_equal(mix_reference(p, p), p)
    np.testing.assert_array_equal(mix_reference([1, 0], [0, 1]), [0.5, 0.5])


def test_kl_examples():
    p = np.array([0.3, 0.7])
    assert kl_divergence(p, p) == 0.0
    assert abs(kl_divergence([1, 0], [0.5, 0.5]) - math.log(2)) < 1e-15
    with pytest.raises(SupportError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


@settings(max_examples=300, deadline=None)
@given(dists, st.data())
def test_kl_nonnegative_and_mixture_normalized(p, data):
    q = data.draw(st.lists(st.floats(0.01, 10), min_size=len(p), max_size=len(p)))
    q = np.array(q) / sum(q)
    assert kl_divergence(p, q) >= 0.0
    assert abs(mix_reference(p, q).sum() - 1.0) < 1e-9


def test_sampling(rng):
    assert sample_action(np.array([0.0, 0.0, 1.0]), rng) == (2, 0.0)
    draws = [sample_action(np.array([0.5, 0.5]), rng)[0] for _ in range(10000)]
    assert abs(draws.count(0) / 10000 - 0.5) < 0.02
    dist = np.array([0.1, 0.6, 0.3])
    a, lp = sample_action(dist, rng)
    assert lp == math.log(dist[a])
    assert greedy_action(dist) == (1, math.log(0.6))
