"""Structural prior: gated agent relevance, edge-logit structure sampling, and
the plausibility network distilled from successful runs into GraphSpecs."""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .core import BudgetSpec, GraphSpec, StepRecord, TaskInstance, Trajectory, TerminatedBy
from .env import DEFAULT_T_MAX, Backend, reset, step
from .featurizer import cosine_sim

EdgeSet = frozenset  # of (i, j) pairs


class DivergedError(RuntimeError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, float)))


def budget_temperature(budget: BudgetSpec, beta_min: float = 0.1, beta_max: float = 1.0) -> float:
    ratio = min(budget.total_tokens / budget.reference_tokens, 1.0)
    return beta_min + (beta_max - beta_min) * ratio


def score_relevance(context: np.ndarray, agents: Sequence[np.ndarray], beta: float) -> np.ndarray:
    if not beta > 0:
        raise ValueError(f"temperature must be positive, got {beta}")
    sims = np.array([cosine_sim(context, e) for e in agents])
    return sigmoid(sims / beta)


def gate_relevance(q: np.ndarray, gamma: float) -> np.ndarray:
    """Zero out agents with ``q < gamma``; keeps the argmax if all would go."""
    q = np.asarray(q, float)
    if q.size == 0:
        raise ValueError("cannot gate an empty relevance vector")
    z = np.where(q >= gamma, q, 0.0)
    if not np.any(z > 0):
        best = int(np.argmax(q))
        z[best] = q[best]
    return z


def context_hash(task: TaskInstance, budget: BudgetSpec) -> str:
    key = f"{task.task_id}\x00{task.text}\x00{budget.total_tokens}\x00{budget.reference_tokens}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


# -- edge logits --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EdgeLogits:
    logits: np.ndarray
    lambda_reg: float = 0.1
    learning_rate: float = 0.1

    def __post_init__(self):
        l = np.array(self.logits, float)
        np.fill_diagonal(l, -np.inf)
        l.setflags(write=False)
        object.__setattr__(self, "logits", l)

    @classmethod
    def zeros(cls, n: int, **kw) -> EdgeLogits:
        return cls(np.zeros((n, n)), **kw)

    @property
    def n_agents(self) -> int:
        return self.logits.shape[0]

    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


def candidate_pairs(z: np.ndarray) -> np.ndarray:
    active = np.asarray(z) > 0
    cand = np.outer(active, active)
    np.fill_diagonal(cand, False)
    return cand


def edges_to_matrix(edges, n: int) -> np.ndarray:
    m = np.zeros((n, n), bool)
    for i, j in edges:
        m[i, j] = True
    return m


def sample_structure(logits: EdgeLogits, z: np.ndarray, rng: np.random.Generator) -> frozenset:
    """Independent Bernoulli(sigmoid(l_ij)) edges between active agents."""
    n = logits.n_agents
    draws = rng.random((n, n))
    keep = candidate_pairs(z) & (draws < logits.probs())
    return frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(keep)))


def _default_candidates(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def edge_logit_loss(l: np.ndarray, sampled: np.ndarray, utility: float, lam: float,
                    candidates: np.ndarray) -> float:
    """-U * sum_{sampled} log sigmoid(l) + lam * mean_{candidates} sigmoid(l)."""
    nll = np.logaddexp(0.0, -l[sampled]).sum()
    reg = sigmoid(l[candidates]).mean() if candidates.any() else 0.0
    return float(utility * nll + lam * reg)


def edge_logit_grad(l: np.ndarray, sampled: np.ndarray, utility: float, lam: float,
                    candidates: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(l)
    m = candidates.sum()
    if m:
        s = sigmoid(l[candidates])
        grad[candidates] = (lam / m) * s * (1.0 - s)
    grad[sampled] -= utility * (1.0 - sigmoid(l[sampled]))
    return grad


def edge_logit_step(logits: EdgeLogits, sampled_edges, utility: int,
                    candidates: np.ndarray | None = None) -> EdgeLogits:
    n = logits.n_agents
    cand = _default_candidates(n) if candidates is None else np.asarray(candidates, bool)
    sampled = edges_to_matrix(sampled_edges, n)
    if np.any(sampled & ~cand):
        raise ValueError("sampled edges must be candidate pairs")
    l = logits.logits.copy()
    off = _default_candidates(n)
    l_fin = np.where(off, l, 0.0)
    grad = edge_logit_grad(l_fin, sampled, float(utility), logits.lambda_reg, cand)
    l[off] -= logits.learning_rate * grad[off]
    return replace(logits, logits=l)


# -- trajectory buffer and pseudo labels -----------------------------------------

@dataclass(frozen=True, eq=False)
class BufferEntry:
    context: np.ndarray
    edges: frozenset
    utility: int = 1


@dataclass(eq=False)
class TrajectoryBuffer:
    capacity: int = 2000
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        self.entries = deque(self.entries, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.entries)


def traversed_edges(actions: Sequence[int], n_agents: int) -> frozenset:
    agents = [a for a in actions if a < n_agents]
    return frozenset((a, b) for a, b in zip(agents, agents[1:]) if a != b)


def buffer_insert_if_correct(buffer: TrajectoryBuffer, context: np.ndarray, traj: Trajectory,
                             n_agents: int) -> TrajectoryBuffer:
    if traj.outcome == 1:
        buffer.entries.append(BufferEntry(np.asarray(context, float),
                                          traversed_edges(traj.actions, n_agents)))
    return buffer


def make_pseudo_labels(buffer: TrajectoryBuffer, agent_embeddings: np.ndarray,
                       neg_ratio: float = 1.0, rng: np.random.Generator | None = None):
    """Positives are traversed edges; negatives are untraversed off-diagonal
    pairs, ``ceil(neg_ratio * positives)`` per entry, drawn without replacement."""
    if len(buffer) == 0:
        raise ValueError("pseudo labels need a non-empty buffer")
    rng = rng if rng is not None else np.random.default_rng(0)
    emb = np.asarray(agent_embeddings, float)
    n = emb.shape[0]
    all_pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    rows, labels = [], []
    for entry in buffer.entries:
        pos = sorted(entry.edges)
        pool = [pr for pr in all_pairs if pr not in entry.edges]
        n_neg = min(len(pool), math.ceil(neg_ratio * len(pos)))
        neg = [pool[k] for k in rng.choice(len(pool), n_neg, replace=False)] if n_neg else []
        for pairs, y in ((pos, 1.0), (neg, 0.0)):
            for i, j in pairs:
                rows.append(np.concatenate([emb[i], emb[j], entry.context]))
                labels.append(y)
    if not rows:
        return np.zeros((0, 3 * emb.shape[1])), np.zeros(0)
    return np.stack(rows), np.array(labels)


# -- plausibility network ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PlausibilityModel:
    shape: nn.MLPShape
    psi: np.ndarray

    @classmethod
    def create(cls, d: int, hidden: int = 32, rng: np.random.Generator | None = None):
        shape = nn.MLPShape(3 * d, hidden, 1)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(shape, shape.init(rng))

    @property
    def dim(self) -> int:
        return self.shape.in_dim // 3

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = nn.forward(self.shape, self.psi, np.atleast_2d(x))
        return out[:, 0]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(x))

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, psi: np.ndarray | None = None):
        """Mean binary cross-entropy and its gradient in ``psi``."""
        psi = self.psi if psi is None else psi
        out, hid = nn.forward(self.shape, psi, x)
        logit = out[:, 0]
        loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
        dout = ((sigmoid(logit) - y) / len(y))[:, None]
        return loss, nn.backward(self.shape, psi, x, hid, dout)


def train_plausibility(model: PlausibilityModel, x: np.ndarray, y: np.ndarray,
                       epochs: int = 300, lr: float = 0.5) -> tuple[PlausibilityModel, float]:
    if len(y) == 0:
        raise ValueError("plausibility training needs a non-empty labeled set")
    psi = model.psi.copy()
    loss = float("nan")
    for epoch in range(epochs):
        loss, grad = model.loss_and_grad(x, y, psi)
        if not np.isfinite(loss):
            raise DivergedError(f"diverged at epoch {epoch}")
        psi -= lr * grad
    loss, _ = model.loss_and_grad(x, y, psi)
    if not np.isfinite(loss):
        raise DivergedError(f"diverged at epoch {epochs}")
    return replace(model, psi=psi), loss


def predict_edge_prob(model: PlausibilityModel, e_i, e_j, e_x) -> float:
    x = np.concatenate([np.ravel(e_i), np.ravel(e_j), np.ravel(e_x)])
    if x.size != model.shape.in_dim:
        raise ValueError(f"input dimension {x.size} does not match 3d = {model.shape.in_dim}")
    return float(model.predict_proba(x)[0])


def edge_prob_matrix(model: PlausibilityModel, context: np.ndarray,
                     agent_embeddings: np.ndarray) -> np.ndarray:
    emb = np.asarray(agent_embeddings, float)
    n, d = emb.shape
    x = np.concatenate([np.repeat(emb, n, axis=0), np.tile(emb, (n, 1)),
                        np.broadcast_to(context, (n * n, d))], axis=1)
    return model.predict_proba(x).reshape(n, n)


def build_graphspec(z: np.ndarray, model: PlausibilityModel | None, context: np.ndarray,
                    agent_embeddings: np.ndarray, gamma: float, ctx_hash: str = "") -> GraphSpec:
    """``p~[i, j] = P(i -> j | x) * z[j]`` with a zero diagonal.

    ``model=None`` uses raw edge probability 1 everywhere (no plausibility term).
    """
    z = np.asarray(z, float)
    n = len(z)
    raw = np.ones((n, n)) if model is None else edge_prob_matrix(model, context, agent_embeddings)
    p = raw * z[None, :]
    np.fill_diagonal(p, 0.0)
    return GraphSpec(z, p, float(gamma), ctx_hash)


# -- stage-one training loop ----------------------------------------------------

@dataclass(frozen=True)
class PriorConfig:
    dim: int = 64
    gamma: float = 0.4
    beta_min: float = 0.1
    beta_max: float = 1.0
    episodes: int = 1500
    structures_per_episode: int = 4
    edge_lr: float = 0.1
    edge_reg: float = 0.1
    walk_stop: float = 0.15
    buffer_capacity: int = 4000
    hidden: int = 32
    epochs: int = 3000
    lr: float = 2.0
    neg_ratio: float = 1.0
    t_max: int = DEFAULT_T_MAX
    cost_beta: float = 0.02


@dataclass(frozen=True, eq=False)
class PriorArtifacts:
    edge_logits: EdgeLogits
    model: PlausibilityModel
    buffer: TrajectoryBuffer
    final_loss: float
    success_rate: float


def relevance(context: np.ndarray, agent_embeddings: np.ndarray, budget: BudgetSpec,
              cfg: PriorConfig) -> np.ndarray:
    beta = budget_temperature(budget, cfg.beta_min, cfg.beta_max)
    return gate_relevance(score_relevance(context, agent_embeddings, beta), cfg.gamma)


def execute_structure(task: TaskInstance, budget: BudgetSpec, edges: frozenset, z: np.ndarray,
                      backend: Backend, rng: np.random.Generator, t_max: int = DEFAULT_T_MAX,
                      stop_prob: float = 0.15, cost_beta: float = 0.02) -> Trajectory:
    """Run one episode as a single pass over a sampled structure.

    Starts at an agent drawn in proportion to ``z``, then hands off along a
    sampled edge to an agent not yet invoked, chosen in proportion to its
    ``z``. Stops with ``stop_prob`` per hand-off or when no unvisited
    successor remains, so every agent speaks at most once.
    """
    n = len(z)
    adj = edges_to_matrix(edges, n)
    state = reset(task, budget, n)
    w = np.asarray(z, float)
    action = int(rng.choice(n, p=w / w.sum()))
    records = []
    empty = np.zeros(0)
    visited = np.zeros(n, bool)
    while True:
        prev = state
        state, reward, done = step(state, action, backend, cost_beta, rng, t_max)
        records.append(StepRecord(empty, action, 0.0, state.tokens_used - prev.tokens_used,
                                  reward, reward))
        if done:
            break
        visited[action] = True
        succ = np.flatnonzero(adj[action] & ~visited)
        if succ.size == 0 or rng.random() < stop_prob:
            action = n
        else:
            action = int(rng.choice(succ, p=w[succ] / w[succ].sum()))
    return Trajectory(tuple(records), int(state.outcome), state.tokens_used,
                      state.terminated_by or TerminatedBy.STOP_ACTION)


def train_prior(tasks: Sequence[TaskInstance], agent_embeddings: np.ndarray,
                contexts: Sequence[np.ndarray], budget: BudgetSpec, backend: Backend,
                cfg: PriorConfig, rng: np.random.Generator) -> PriorArtifacts:
    """Sample structures from the edge logits, reinforce them with the run
    outcome, keep successful runs, then fit the plausibility network."""
    n = agent_embeddings.shape[0]
    logits = EdgeLogits.zeros(n, lambda_reg=cfg.edge_reg, learning_rate=cfg.edge_lr)
    buffer = TrajectoryBuffer(cfg.buffer_capacity)
    zs = [relevance(c, agent_embeddings, budget, cfg) for c in contexts]
    wins = runs = 0
    for _ in range(cfg.episodes):
        idx = int(rng.integers(len(tasks)))
        z = zs[idx]
        cand = candidate_pairs(z)
        for _ in range(cfg.structures_per_episode):
            edges = sample_structure(logits, z, rng)
            traj = execute_structure(tasks[idx], budget, edges, z, backend, rng,
                                     cfg.t_max, cfg.walk_stop, cfg.cost_beta)
            logits = edge_logit_step(logits, edges, traj.outcome, cand)
            buffer_insert_if_correct(buffer, contexts[idx], traj, n)
            wins += traj.outcome
            runs += 1
    model = PlausibilityModel.create(agent_embeddings.shape[1], cfg.hidden, rng)
    x, y = (make_pseudo_labels(buffer, agent_embeddings, cfg.neg_ratio, rng)
            if len(buffer) else (np.zeros((0, 3 * agent_embeddings.shape[1])), np.zeros(0)))
    loss = float("nan")
    if len(y):
        model, loss = train_plausibility(model, x, y, cfg.epochs, cfg.lr)
    return PriorArtifacts(logits, model, buffer, loss, wins / max(runs, 1))
