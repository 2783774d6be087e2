"""Group-relative policy optimization of the orchestration policy.

Rollouts are shaped with a KL penalty toward the even mixture of the frozen
reference policy and the GraphSpec-induced prior; updates use the clipped
surrogate with a KL penalty toward the reference.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import nn
from .core import BudgetSpec, GraphSpec, StepRecord, TaskInstance, TerminatedBy, Trajectory
from .env import DEFAULT_T_MAX, Backend, reset, step
from .policy import (PolicyParams, featurize_state, forward_logits, greedy_action, kl_divergence,
                     log_masked_distribution, masked_distribution, mix_reference,
                     prior_action_distribution, sample_action, structural_mask)

ARMS = ("full", "no-z", "no-p", "no-graphspec", "no-policy")
METRIC_FIELDS = ("update", "mean_return", "success_rate", "mean_tokens", "kl_mix", "kl_ref",
                 "loss", "grad_norm")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: PolicyParams | None = None, metrics=None):
        super().__init__(message)
        self.params = params
        self.metrics = metrics or []


@dataclass(frozen=True)
class TrainerConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coeff: float = 0.04
    reward_kl: float = 0.7
    cost_beta: float = 0.02
    adv_eps: float = 1e-8
    inner_epochs: int = 2
    learning_rate: float = 1e-3
    max_updates: int = 1000
    seed: int = 0
    hidden: int = 32
    kappa: float = 0.1
    edge_floor: float = 0.0
    t_max: int = DEFAULT_T_MAX
    kl_estimator: str = "sample"

    def __post_init__(self):
        if self.kl_estimator not in ("sample", "full"):
            raise ValueError("kl_estimator must be 'sample' or 'full'")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        for name in ("kl_coeff", "reward_kl", "cost_beta", "adv_eps", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_updates < 0 or self.inner_epochs < 1 or self.t_max < 1:
            raise ValueError("max_updates >= 0, inner_epochs >= 1 and t_max >= 1 required")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True, eq=False)
class TaskContext:
    """A task with its context embedding and the GraphSpec guiding it.

    ``graphspec=None`` means no structural prior: nothing is masked and the
    reward anchor collapses to the reference policy.
    """

    task: TaskInstance
    embedding: np.ndarray
    graphspec: GraphSpec | None


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    trajectories: tuple[Trajectory, ...]
    task_id: str
    graphspec_ref: str
    kl_mix: float = 0.0
    kl_ref: float = 0.0

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ValueError("a rollout group needs at least two trajectories")

    @property
    def returns(self) -> np.ndarray:
        return np.array([t.shaped_return for t in self.trajectories])


def shaped_reward(raw: float, policy_dist: np.ndarray, mix_dist: np.ndarray, lam: float) -> float:
    if lam == 0.0:
        return float(raw)
    return float(raw - lam * kl_divergence(policy_dist, mix_dist))


def rollout_rng(seed: int, task_id: str, update: int, index: int,
                stream: int = 0) -> np.random.Generator:
    """Independent stream per (run seed, task, update, rollout index)."""
    return np.random.default_rng([seed, stream, zlib.crc32(task_id.encode()), update, index])


def run_episode(params: PolicyParams | None, ref: PolicyParams | None, ctx: TaskContext,
                budget: BudgetSpec, backend: Backend, cfg: TrainerConfig,
                rng: np.random.Generator, greedy: bool = False,
                action_source: str = "policy") -> tuple[Trajectory, list[float], list[float]]:
    """One episode under the masked policy (or, with ``action_source='prior'``,
    under the GraphSpec prior alone). Returns the trajectory and the per-step
    KL to the mixture and to the reference."""
    n = len(backend.pool)
    gs = ctx.graphspec
    state = reset(ctx.task, budget, n)
    steps, kl_mix, kl_ref = [], [], []
    while not state.done:
        feats = featurize_state(state, ctx.embedding, cfg.t_max)
        mask = structural_mask(gs, state, cfg.edge_floor)
        if action_source == "prior":
            pi = prior_action_distribution(gs, state, cfg.kappa, mask)
            p_ref = pi_prior = pi
        else:
            both = forward_logits_pair(params, ref, feats)
            pi = masked_distribution(both[0], mask)
            p_ref = masked_distribution(both[1], mask)
            pi_prior = p_ref if gs is None else prior_action_distribution(gs, state, cfg.kappa, mask)
        p_mix = mix_reference(p_ref, pi_prior)
        action, logprob = greedy_action(pi) if greedy else sample_action(pi, rng)
        prev_tokens = state.tokens_used
        state, raw, _ = step(state, action, backend, cfg.cost_beta, rng, cfg.t_max)
        k_mix = kl_divergence(pi, p_mix)
        kl_mix.append(k_mix)
        kl_ref.append(kl_divergence(pi, p_ref))
        if cfg.kl_estimator == "sample":
            penalty = logprob - np.log(p_mix[action])
        else:
            penalty = k_mix
        steps.append(StepRecord(feats, action, logprob, state.tokens_used - prev_tokens,
                                raw - cfg.reward_kl * penalty, raw, mask))
    traj = Trajectory(tuple(steps), int(state.outcome), state.tokens_used,
                      state.terminated_by or TerminatedBy.STOP_ACTION)
    return traj, kl_mix, kl_ref


def forward_logits_pair(params: PolicyParams, ref: PolicyParams, feats: np.ndarray) -> np.ndarray:
    if ref is None or ref is params:
        out = forward_logits(params, feats)
        return np.stack([out, out])
    return np.stack([forward_logits(params, feats), forward_logits(ref, feats)])


def rollout_group(params: PolicyParams, ref: PolicyParams, ctx: TaskContext, budget: BudgetSpec,
                  backend: Backend, cfg: TrainerConfig, update: int = 0,
                  action_source: str = "policy") -> RolloutGroup:
    trajs, mixes, refs = [], [], []
    for k in range(cfg.group_size):
        rng = rollout_rng(cfg.seed, ctx.task.task_id, update, k)
        try:
            traj, km, kr = run_episode(params, ref, ctx, budget, backend, cfg, rng,
                                       action_source=action_source)
        except Exception as exc:
            raise RuntimeError(f"rollout {k} of task {ctx.task.task_id} failed: {exc}") from exc
        trajs.append(traj)
        mixes.extend(km)
        refs.extend(kr)
    gs_ref = ctx.graphspec.context_hash if ctx.graphspec is not None else "none"
    return RolloutGroup(tuple(trajs), ctx.task.task_id, gs_ref,
                        float(np.mean(mixes)), float(np.mean(refs)))


def group_advantages(returns, adv_eps: float = 1e-8) -> np.ndarray:
    returns = np.asarray(returns, float)
    if returns.size < 2:
        raise ValueError("group advantages need at least two returns")
    if np.all(returns == returns[0]):
        # the float mean of equal values can miss them by an ulp
        return np.zeros_like(returns)
    centered = returns - returns.mean()
    return centered / (returns.std() + adv_eps)


@dataclass(frozen=True, eq=False)
class StepBatch:
    features: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    logprob_old: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_group(cls, group: RolloutGroup, advantages) -> StepBatch:
        feats, masks, acts, lps, advs = [], [], [], [], []
        for traj, adv in zip(group.trajectories, advantages):
            for s in traj.steps:
                feats.append(s.state_features)
                masks.append(s.mask)
                acts.append(s.action)
                lps.append(s.logprob_old)
                advs.append(adv)
        return cls(np.stack(feats), np.stack(masks), np.array(acts), np.array(lps), np.array(advs))


def clipped_objective(params: PolicyParams, ref: PolicyParams, batch: StepBatch,
                      cfg: TrainerConfig, theta: np.ndarray | None = None):
    """Loss ``-mean_t[min(rho A, clip(rho) A) - kl_coeff * KL(pi || pi_ref)]`` and
    its gradient in ``theta``."""
    theta = params.theta if theta is None else theta
    shape = params.shape
    logits, hid = nn.forward(shape, theta, batch.features)
    ref_logits, _ = nn.forward(ref.shape, ref.theta, batch.features)
    logp = log_masked_distribution(logits, batch.masks)
    logr = log_masked_distribution(ref_logits, batch.masks)
    p = np.exp(logp)
    idx = np.arange(len(batch.actions))
    lp = logp[idx, batch.actions]
    ratio = np.exp(lp - batch.logprob_old)
    adv = batch.advantages
    eps = cfg.clip_eps
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    obj = np.minimum(surr1, surr2)
    diff = np.where(batch.masks, logp, 0.0) - np.where(batch.masks, logr, 0.0)
    kl = np.sum(p * diff, axis=1)
    n = len(idx)
    loss = -float(np.mean(obj - cfg.kl_coeff * kl))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"diverged: non-finite loss (max |logit|={np.abs(logits).max():.3g}, "
                               f"max ratio={ratio.max():.3g})")
    d_lp = np.where(surr1 <= surr2, ratio * adv, 0.0)
    onehot = np.zeros_like(p)
    onehot[idx, batch.actions] = 1.0
    d_logits = d_lp[:, None] * (onehot - p) - cfg.kl_coeff * p * (diff - kl[:, None])
    grad = nn.backward(shape, theta, batch.features, hid, -d_logits / n)
    return loss, grad


def clipped_objective_grad(params: PolicyParams, group: RolloutGroup, advantages,
                           ref: PolicyParams, cfg: TrainerConfig):
    return clipped_objective(params, ref, StepBatch.from_group(group, advantages), cfg)


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n))


def apply_update(params: PolicyParams, grad: np.ndarray, state: AdamState,
                 lr: float) -> tuple[PolicyParams, AdamState]:
    if grad.shape != params.theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {params.theta.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_theta(theta), replace(state, m=m, v=v, t=t)


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict] = field(default_factory=list)
    optimizer: AdamState | None = None


def train(contexts: Sequence[TaskContext], budget: BudgetSpec, backend: Backend,
          cfg: TrainerConfig, params: PolicyParams | None = None,
          action_source: str = "policy", on_update=None) -> TrainResult:
    """Stage-two loop: sample a task, roll out a group, shape rewards, compute
    group advantages and run ``inner_epochs`` clipped updates per group."""
    if not contexts:
        raise ValueError("training needs at least one task")
    n = len(backend.pool)
    d = len(contexts[0].embedding)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = PolicyParams.create(d, n, cfg.hidden, rng)
    ref = params
    adam = AdamState.zeros(params.shape.n_params)
    metrics: list[dict] = []
    if action_source == "prior":
        return TrainResult(params, metrics, adam)
    for update in range(cfg.max_updates):
        ctx = contexts[int(rng.integers(len(contexts)))]
        group = rollout_group(params, ref, ctx, budget, backend, cfg, update)
        adv = group_advantages(group.returns, cfg.adv_eps)
        batch = StepBatch.from_group(group, adv)
        loss = gnorm = 0.0
        for _ in range(cfg.inner_epochs):
            try:
                loss, grad = clipped_objective(params, ref, batch, cfg)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"update {update}: {exc}", params, metrics) from exc
            gnorm = float(np.sqrt(grad @ grad))
            params, adam = apply_update(params, grad, adam, cfg.learning_rate)
        row = {
            "update": update,
            "mean_return": float(group.returns.mean()),
            "success_rate": float(np.mean([t.outcome for t in group.trajectories])),
            "mean_tokens": float(np.mean([t.total_tokens for t in group.trajectories])),
            "kl_mix": group.kl_mix,
            "kl_ref": group.kl_ref,
            "loss": loss,
            "grad_norm": gnorm,
        }
        metrics.append(row)
        if on_update is not None:
            on_update(row, group)
    return TrainResult(params, metrics, adam)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    avg_cost: float
    mean_raw_return: float
    trajectories: tuple[Trajectory, ...]


def evaluate(params: PolicyParams | None, contexts: Sequence[TaskContext], budget: BudgetSpec,
             backend: Backend, cfg: TrainerConfig, episodes_per_task: int = 1,
             greedy: bool = True, action_source: str = "policy", seed: int = 12345) -> EvalResult:
    trajs = []
    for ctx in contexts:
        for e in range(episodes_per_task):
            rng = rollout_rng(seed, ctx.task.task_id, 0, e, stream=1)
            traj, _, _ = run_episode(params, params, ctx, budget, backend, cfg, rng,
                                     greedy=greedy and action_source == "policy",
                                     action_source=action_source)
            trajs.append(traj)
    return EvalResult(float(np.mean([t.outcome for t in trajs])),
                      float(np.mean([t.total_tokens for t in trajs])),
                      float(np.mean([t.raw_return for t in trajs])), tuple(trajs))


def transition_matrix(trajectories: Sequence[Trajectory], n_agents: int):
    """Empirical P(next action | current agent) as ``(row_agents, probs)``.

    Rows are agents, columns are the n_agents + 1 actions (STOP last); agents
    never followed by another action are omitted.
    """
    counts = np.zeros((n_agents, n_agents + 1))
    for traj in trajectories:
        acts = traj.actions
        for a, b in zip(acts, acts[1:]):
            if a < n_agents:
                counts[a, b] += 1
    rows = np.flatnonzero(counts.sum(1) > 0)
    probs = counts[rows] / counts[rows].sum(1, keepdims=True)
    return rows, probs


def top2_mass(matrix: np.ndarray) -> float:
    m = np.atleast_2d(np.asarray(matrix, float))
    if m.shape[0] == 0:
        raise ValueError("top-2 mass needs at least one row")
    top = np.sort(m, axis=1)[:, -2:] if m.shape[1] >= 2 else m
    return float(top.sum(axis=1).mean())
