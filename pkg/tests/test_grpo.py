import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentcoord.core import BudgetSpec, GraphSpec, StepRecord, TerminatedBy, Trajectory
from agentcoord.env import SimulatedBackend
from agentcoord.featurizer import HashingFeaturizer
from agentcoord.grpo import (AdamState, StepBatch, TaskContext, TrainerConfig, apply_update,
                             clipped_objective, clipped_objective_grad, evaluate, group_advantages,
                             rollout_group, shaped_reward, top2_mass, train, transition_matrix)
from agentcoord.policy import PolicyParams, structural_mask
from conftest import central_diff, rel_err

BUDGET = BudgetSpec(3000, 3000)


def _contexts(tasks, pool, graphspec=None, d=16):
    feat = HashingFeaturizer(d)
    return [TaskContext(t, feat.embed_context(t, BUDGET), graphspec) for t in tasks]


def _traj(actions, n):
    steps = tuple(StepRecord(np.zeros(0), a, 0.0, 1, 0.0, 0.0) for a in actions)
    return Trajectory(steps, 0, len(actions), TerminatedBy.STOP_ACTION)


def test_shaped_reward_examples():
    p = np.array([0.4, 0.6])
    assert shaped_reward(0.3, p, p, 0.7) == 0.3
    # KL([1, 0] || [q, 1 - q]) = -ln q; choose q so the divergence is 0.5
    q = math.exp(-0.5)
    assert abs(shaped_reward(1.0, np.array([1.0, 0.0]), np.array([q, 1 - q]), 0.7) - 0.65) < 1e-12
    assert shaped_reward(0.3, np.array([1.0, 0.0]), np.array([0.5, 0.5]), 0.0) == 0.3


def test_group_advantages_examples():
    np.testing.assert_array_equal(group_advantages([0.5, 0.5, 0.5]), [0, 0, 0])
    np.testing.assert_allclose(group_advantages([1.0, 0.0]), [1.0, -1.0], atol=1e-7)
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16))
def test_advantages_center(returns):
    r = np.array(returns)
    assert abs((r - r.mean()).sum()) < 1e-9
    assert abs(group_advantages(r).sum()) < 1e-6 * max(1.0, len(r))


def _random_instance(rng, pool, tasks, k):
    n = len(pool)
    z = rng.uniform(0.2, 1.0, n)
    p = rng.uniform(0.0, 1.0, (n, n)) * z[None]
    np.fill_diagonal(p, 0.0)
    gs = GraphSpec(z, p, 0.4, "")
    ctx = _contexts([tasks[int(rng.integers(len(tasks)))]], pool, gs)[0]
    cfg = TrainerConfig(group_size=k, seed=int(rng.integers(1000)), t_max=6,
                        kl_coeff=float(rng.uniform(0, 0.1)))
    old = PolicyParams.create(16, n, hidden=8, rng=rng)
    old = old.with_theta(rng.normal(0, 0.5, old.theta.size))
    group = rollout_group(old, old, ctx, BUDGET, SimulatedBackend(pool), cfg)
    adv = rng.normal(size=k)
    params = old.with_theta(old.theta + rng.normal(0, 0.3, old.theta.size))
    ref = old.with_theta(old.theta + rng.normal(0, 0.3, old.theta.size))
    return params, ref, group, adv, cfg


def test_clipped_objective_gradient_matches_finite_differences(pipe_pool, pipe_tasks):
    rng = np.random.default_rng(11)
    for i in range(30):
        k = (2, 4, 8)[i % 3]
        params, ref, group, adv, cfg = _random_instance(rng, pipe_pool, pipe_tasks, k)
        batch = StepBatch.from_group(group, adv)
        _, g = clipped_objective(params, ref, batch, cfg)
        fd = central_diff(lambda t: clipped_objective(params, ref, batch, cfg, t)[0], params.theta)
        assert rel_err(g, fd) < 1e-4


def test_first_epoch_has_unit_ratios(pipe_pool, pipe_tasks):
    rng = np.random.default_rng(2)
    params, _, group, adv, cfg = _random_instance(rng, pipe_pool, pipe_tasks, 4)
    old = params.with_theta(params.theta)
    group = rollout_group(old, old, _contexts(pipe_tasks[:1], pipe_pool)[0], BUDGET,
                          SimulatedBackend(pipe_pool), cfg)
    batch = StepBatch.from_group(group, adv)
    loss, _ = clipped_objective(old, old, batch, replace(cfg, kl_coeff=0.0))
    assert abs(loss + batch.advantages.mean()) < 1e-12


def test_clip_selects_bound():
    # one step, one action; ratio 1.5 with positive advantage contributes 1.2 * A
    params = PolicyParams.create(4, 1, hidden=2, rng=np.random.default_rng(0))
    theta = params.theta.copy()
    theta[-2:] = [math.log(0.75), math.log(0.25)]  # output biases -> p(action 0) = 0.75
    params = params.with_theta(theta)
    feats = np.zeros((1, params.shape.in_dim))
    batch = StepBatch(feats, np.ones((1, 2), bool), np.array([0]), np.array([math.log(0.5)]),
                      np.array([2.0]))
    cfg = TrainerConfig(kl_coeff=0.0, clip_eps=0.2)
    loss, grad = clipped_objective(params, params, batch, cfg)
    assert abs(loss + 1.2 * 2.0) < 1e-12
    assert np.all(grad == 0.0)


def test_zero_advantage_zero_kl_gives_zero_gradient(pipe_pool, pipe_tasks):
    rng = np.random.default_rng(5)
    params, ref, group, _, cfg = _random_instance(rng, pipe_pool, pipe_tasks, 4)
    _, g = clipped_objective_grad(params, group, np.zeros(4), ref, replace(cfg, kl_coeff=0.0))
    assert np.all(g == 0.0)


def test_clip_bound_property(pipe_pool, pipe_tasks):
    rng = np.random.default_rng(6)
    for _ in range(20):
        params, ref, group, adv, cfg = _random_instance(rng, pipe_pool, pipe_tasks, 4)
        batch = StepBatch.from_group(group, adv)
        loss, _ = clipped_objective(params, ref, batch, replace(cfg, kl_coeff=0.0))
        assert abs(loss) <= (1 + cfg.clip_eps) * np.abs(batch.advantages).max() + 1e-12


def test_adam_fixed_point_and_descent():
    params = PolicyParams.create(4, 1, hidden=2, rng=np.random.default_rng(0))
    same, _ = apply_update(params, np.zeros_like(params.theta), AdamState.zeros(params.theta.size), 0.1)
    np.testing.assert_array_equal(same.theta, params.theta)
    target = np.ones_like(params.theta)
    loss = lambda t: float(((t - target) ** 2).sum())
    new, state = apply_update(params, 2 * (params.theta - target), AdamState.zeros(params.theta.size), 0.01)
    assert loss(new.theta) < loss(params.theta) and state.t == 1
    again, _ = apply_update(params, 2 * (params.theta - target), AdamState.zeros(params.theta.size), 0.01)
    np.testing.assert_array_equal(again.theta, new.theta)


def test_rollout_group_is_reproducible_and_in_budget(math_pool, hard_tasks):
    cfg = TrainerConfig(group_size=8, seed=3)
    ctx = _contexts(hard_tasks[:1], math_pool)[0]
    params = PolicyParams.create(16, 6, rng=np.random.default_rng(0))
    budget = BudgetSpec(400, 3000)
    a = rollout_group(params, params, ctx, budget, SimulatedBackend(math_pool), cfg, update=4)
    b = rollout_group(params, params, ctx, budget, SimulatedBackend(math_pool), cfg, update=4)
    assert [t.actions for t in a.trajectories] == [t.actions for t in b.trajectories]
    np.testing.assert_array_equal(a.returns, b.returns)
    assert all(t.total_tokens <= 400 for t in a.trajectories)


def test_point_mass_policy_gives_equal_returns(pipe_pool, pipe_tasks):
    # a GraphSpec that only allows 0 -> 1 -> 2 and a policy that never stops early
    p = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], float)
    gs = GraphSpec(np.ones(3), p, 0.4, "")
    ctx = _contexts(pipe_tasks[:1], pipe_pool, gs)[0]
    params = PolicyParams.create(16, 3, rng=np.random.default_rng(0))
    theta = params.theta.copy()
    theta[-4:] = [50.0, 0.0, 0.0, -50.0]
    cfg = TrainerConfig(group_size=8, t_max=3, reward_kl=0.0)
    group = rollout_group(params.with_theta(theta), params.with_theta(theta), ctx, BUDGET,
                          SimulatedBackend(pipe_pool), cfg)
    assert np.ptp(group.returns) == 0.0
    assert all(t.outcome == 1 for t in group.trajectories)


def test_train_zero_updates_and_determinism(pipe_pool, pipe_tasks):
    ctxs = _contexts(pipe_tasks, pipe_pool)
    cfg = TrainerConfig(max_updates=0, t_max=6)
    res = train(ctxs, BUDGET, SimulatedBackend(pipe_pool), cfg)
    assert res.metrics == []
    init = PolicyParams.create(16, 3, cfg.hidden, np.random.default_rng(cfg.seed))
    np.testing.assert_array_equal(res.params.theta, init.theta)
    cfg = replace(cfg, max_updates=15)
    a = train(ctxs, BUDGET, SimulatedBackend(pipe_pool), cfg)
    b = train(ctxs, BUDGET, SimulatedBackend(pipe_pool), cfg)
    assert a.metrics == b.metrics
    np.testing.assert_array_equal(a.params.theta, b.params.theta)


def test_training_rollouts_respect_the_mask(math_pool, hard_tasks):
    rng = np.random.default_rng(0)
    z = np.array([1.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    p = rng.uniform(0, 1, (6, 6)) * z[None] * (rng.random((6, 6)) < 0.6)
    np.fill_diagonal(p, 0.0)
    gs = GraphSpec(z, p, 0.4, "")
    ctxs = _contexts(hard_tasks, math_pool, gs)
    seen = []
    train(ctxs, BUDGET, SimulatedBackend(math_pool), TrainerConfig(max_updates=20),
          on_update=lambda row, group: seen.extend(group.trajectories))
    for traj in seen:
        acts = traj.actions
        for prev, a in zip([None] + acts[:-1], acts):
            if a == 6:
                continue
            assert z[a] > 0
            if prev is not None:
                assert p[prev, a] > 0


def test_evaluate_degenerate_policies(pipe_pool, pipe_tasks):
    ctxs = _contexts(pipe_tasks, pipe_pool)
    params = PolicyParams.create(16, 3, rng=np.random.default_rng(0))
    stop = params.theta.copy()
    stop[-4:] = [0, 0, 0, 50.0]
    ev = evaluate(params.with_theta(stop), ctxs, BUDGET, SimulatedBackend(pipe_pool), TrainerConfig())
    assert ev.accuracy == 0.0 and ev.avg_cost == 0.0
    ev = evaluate(params, ctxs, BUDGET, SimulatedBackend(pipe_pool), TrainerConfig(), 3, greedy=False)
    assert ev.avg_cost <= BUDGET.total_tokens


def test_transition_matrix_examples():
    rows, probs = transition_matrix([_traj([0, 1, 3], 3), _traj([0, 1, 0, 3], 3)], 3)
    a = list(rows).index(0)
    assert abs(probs[a, 1] - 2 / 3) < 1e-12 and abs(probs[a, 3] - 1 / 3) < 1e-12
    rows, probs = transition_matrix([_traj([0, 3], 3)], 3)
    assert rows.tolist() == [0] and probs.tolist() == [[0, 0, 0, 1]]
    rng = np.random.default_rng(0)
    trajs = [_traj(list(rng.integers(0, 4, 6)) + [3], 3) for _ in range(50)]
    _, probs = transition_matrix(trajs, 3)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-9)


def test_top2_mass_examples():
    assert top2_mass(np.array([[0.3, 0.7], [0.9, 0.1]])) == 1.0
    assert abs(top2_mass(np.array([[0.5, 0.3, 0.2]])) - 0.8) < 1e-12
    assert abs(top2_mass(np.full((3, 5), 0.2)) - 0.4) < 1e-12
