"""Two-stage training: structural prior first, then the orchestration policy,
plus the ablation arms that switch parts of the GraphSpec off."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import AgentSpec, BudgetSpec, TaskInstance, load_agent_pool
from .env import SimulatedBackend, generate_tasks, reset, step
from .featurizer import HashingFeaturizer
from .grpo import (ARMS, EvalResult, TaskContext, TrainerConfig, TrainResult, evaluate, top2_mass,
                   train, transition_matrix)
from .prior import PriorArtifacts, PriorConfig, build_graphspec, context_hash, relevance, train_prior


def check_arm(arm: str) -> str:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
    return arm


def build_contexts(tasks: Sequence[TaskInstance], budget: BudgetSpec, pool: Sequence[AgentSpec],
                   prior: PriorArtifacts | None, prior_cfg: PriorConfig,
                   arm: str = "full") -> list[TaskContext]:
    """Attach context embeddings and (arm-dependent) GraphSpecs to tasks.

    full / no-policy: gated z and plausibility-modulated edges. no-z: every
    agent participates with weight 1. no-p: raw edge probability 1, so rows
    follow z alone. no-graphspec: no prior at all.
    """
    check_arm(arm)
    feat = HashingFeaturizer(prior_cfg.dim)
    agent_emb = feat.embed_pool(pool)
    if arm != "no-graphspec" and prior is None:
        raise ValueError(f"arm {arm!r} needs a trained prior")
    out = []
    for task in tasks:
        ctx = feat.embed_context(task, budget)
        gs = None
        if arm != "no-graphspec":
            if arm == "no-z":
                z = np.ones(len(pool))
            else:
                z = relevance(ctx, agent_emb, budget, prior_cfg)
            model = None if arm == "no-p" else prior.model
            gs = build_graphspec(z, model, ctx, agent_emb, prior_cfg.gamma, context_hash(task, budget))
        out.append(TaskContext(task, ctx, gs))
    return out


def fit_prior(pool: Sequence[AgentSpec], tasks: Sequence[TaskInstance], budget: BudgetSpec,
              cfg: PriorConfig, seed: int = 0) -> PriorArtifacts:
    feat = HashingFeaturizer(cfg.dim)
    agent_emb = feat.embed_pool(pool)
    contexts = [feat.embed_context(t, budget) for t in tasks]
    return train_prior(tasks, agent_emb, contexts, budget, SimulatedBackend(tuple(pool)), cfg,
                       np.random.default_rng(seed))


@dataclass
class ArmResult:
    arm: str
    train: TrainResult
    eval: EvalResult
    contexts: list


def run_arm(pool: Sequence[AgentSpec], train_tasks: Sequence[TaskInstance],
            eval_tasks: Sequence[TaskInstance], budget: BudgetSpec, prior: PriorArtifacts | None,
            prior_cfg: PriorConfig, cfg: TrainerConfig, arm: str = "full",
            eval_episodes: int = 1, eval_seed: int = 12345) -> ArmResult:
    backend = SimulatedBackend(tuple(pool))
    source = "prior" if arm == "no-policy" else "policy"
    train_ctx = build_contexts(train_tasks, budget, pool, prior, prior_cfg, arm)
    eval_ctx = build_contexts(eval_tasks, budget, pool, prior, prior_cfg, arm)
    result = train(train_ctx, budget, backend, cfg, action_source=source)
    ev = evaluate(result.params, eval_ctx, budget, backend, cfg, eval_episodes,
                  action_source=source, seed=eval_seed)
    return ArmResult(arm, result, ev, eval_ctx)


@dataclass(frozen=True, eq=False)
class Suite:
    """A seeded benchmark: pool, train/eval tasks, budget and both configs."""

    name: str
    pool: tuple[AgentSpec, ...]
    train_tasks: tuple[TaskInstance, ...]
    eval_tasks: tuple[TaskInstance, ...]
    budget: BudgetSpec
    prior_cfg: PriorConfig
    trainer_cfg: TrainerConfig


def pipeline_suite(seed: int = 0, max_updates: int = 1500) -> Suite:
    """Three always-succeeding stages on a three-agent pool, horizon 6."""
    pool = load_agent_pool("pipeline3")
    return Suite("pipeline", pool,
                 tuple(generate_tasks(40, pool, "pipeline", 100 + seed)),
                 tuple(generate_tasks(20, pool, "pipeline", 200 + seed, prefix="eval")),
                 BudgetSpec(3000, 3000),
                 PriorConfig(episodes=300, t_max=6),
                 TrainerConfig(max_updates=max_updates, t_max=6, seed=seed))


def hard_suite(seed: int = 0, max_updates: int = 1500, **trainer_overrides) -> Suite:
    """2-4 stochastic stages among six math roles with a tight budget ratio.

    The budget is a fifth of the reference budget, which puts the relevance
    temperature at 0.28 so participation strengths separate stage roles
    from distractors.
    """
    pool = load_agent_pool("math")
    trainer = replace(TrainerConfig(max_updates=max_updates, seed=seed), **trainer_overrides)
    return Suite("hard", pool,
                 tuple(generate_tasks(60, pool, "hard", 1000 + seed)),
                 tuple(generate_tasks(60, pool, "hard", 2000 + seed, prefix="eval")),
                 BudgetSpec(3000, 15000),
                 PriorConfig(episodes=1500),
                 trainer)


def suite_prior(suite: Suite) -> PriorArtifacts:
    return fit_prior(suite.pool, suite.train_tasks, suite.budget, suite.prior_cfg,
                     seed=suite.trainer_cfg.seed)


def run_suite_arm(suite: Suite, prior: PriorArtifacts | None, arm: str = "full",
                  trainer_cfg: TrainerConfig | None = None) -> ArmResult:
    return run_arm(suite.pool, suite.train_tasks, suite.eval_tasks, suite.budget, prior,
                   suite.prior_cfg, trainer_cfg or suite.trainer_cfg, arm)


def sampled_top2(result: ArmResult, suite: Suite, episodes_per_task: int = 4) -> float:
    """Top-2 transition mass of trajectories sampled from the trained policy
    (or from the prior for the no-policy arm) on the evaluation tasks."""
    source = "prior" if result.arm == "no-policy" else "policy"
    ev = evaluate(result.train.params, result.contexts, suite.budget,
                  SimulatedBackend(suite.pool), suite.trainer_cfg, episodes_per_task,
                  greedy=False, action_source=source, seed=777)
    _, probs = transition_matrix(ev.trajectories, len(suite.pool))
    return top2_mass(probs)


def oracle_return(task: TaskInstance, budget: BudgetSpec, backend, beta_cost: float,
                  t_max: int, seed: int = 0) -> tuple[float, tuple[int, ...]]:
    """Best achievable undiscounted return by exhaustive search over action
    sequences. Exact only when the backend is deterministic; every branch
    replays the same generator seed."""
    n = len(backend.pool)
    best = (-np.inf, ())

    def search(state, ret, actions):
        nonlocal best
        for a in range(n + 1):
            nxt, r, done = step(state, a, backend, beta_cost, np.random.default_rng(seed), t_max)
            if done:
                if ret + r > best[0]:
                    best = (ret + r, actions + (a,))
            else:
                search(nxt, ret + r, actions + (a,))

    search(reset(task, budget, n), 0.0, ())
    return float(best[0]), best[1]
