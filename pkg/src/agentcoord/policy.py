"""Orchestration policy over agents + STOP: features, masking, reference
distributions and KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .core import GraphSpec
from .env import DEFAULT_T_MAX, EnvState

KL_FLOOR = 1e-12


class SupportError(ValueError):
    """KL(p || q) requested where p has mass on a structural zero of q."""


def feature_dim(d: int, n_agents: int) -> int:
    return d + (n_agents + 1) + n_agents + 1


def featurize_state(state: EnvState, task_embedding: np.ndarray,
                    t_max: int = DEFAULT_T_MAX) -> np.ndarray:
    n = state.n_agents
    last = np.zeros(n + 1)
    if state.last_action is not None:
        last[state.last_action] = 1.0
    counts = np.asarray(state.invocation_counts, float) / t_max
    return np.concatenate([task_embedding, last, counts, [state.remaining_fraction]])


@dataclass(frozen=True, eq=False)
class PolicyParams:
    shape: nn.MLPShape
    theta: np.ndarray

    @classmethod
    def create(cls, d: int, n_agents: int, hidden: int = 32,
               rng: np.random.Generator | None = None) -> PolicyParams:
        shape = nn.MLPShape(feature_dim(d, n_agents), hidden, n_agents + 1)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(shape, shape.init(rng))

    @property
    def n_actions(self) -> int:
        return self.shape.out_dim

    def with_theta(self, theta: np.ndarray) -> PolicyParams:
        return PolicyParams(self.shape, np.array(theta, float))


def forward_logits(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    out, _ = nn.forward(params.shape, params.theta, np.atleast_2d(features))
    return out[0] if np.ndim(features) == 1 else out


def structural_mask(gs: GraphSpec | None, state: EnvState, edge_floor: float = 0.0) -> np.ndarray:
    """Agent j is allowed iff z_j > 0 and, after the first step, p~[last, j] > edge_floor.

    ``gs=None`` allows every action. STOP is always allowed.
    """
    n = state.n_agents
    if gs is None:
        return np.ones(n + 1, bool)
    allowed = np.asarray(gs.z) > 0
    if state.last_action is not None and state.last_action < n:
        allowed = allowed & (np.asarray(gs.p)[state.last_action] > edge_floor)
    return np.append(allowed, True)


def log_masked_distribution(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, logits, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    shifted = masked - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def masked_distribution(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits, mask = np.asarray(logits, float), np.asarray(mask, bool)
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} differ in shape")
    if not mask.any(axis=-1).all():
        raise ValueError("mask must allow at least one action")
    return np.exp(log_masked_distribution(logits, mask))


def prior_action_distribution(gs: GraphSpec, state: EnvState, kappa: float = 0.1,
                              mask: np.ndarray | None = None) -> np.ndarray:
    """Agent weights come from z on the first step and from the p~ row of the
    last agent afterwards; STOP receives a fixed ``kappa``."""
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"stop mass must lie in (0, 1), got {kappa}")
    n = state.n_agents
    if state.last_action is None or state.last_action >= n:
        w = np.array(gs.z, float)
    else:
        w = np.array(gs.p[state.last_action], float)
    allowed = (structural_mask(gs, state) if mask is None else np.asarray(mask, bool))[:n]
    w = np.where(allowed, w, 0.0)
    total = w.sum()
    if total <= 0.0:
        w = allowed.astype(float)
        total = w.sum()
    if total <= 0.0:
        return np.append(np.zeros(n), 1.0)
    return np.append((1.0 - kappa) * w / total, kappa)


def mix_reference(p_ref: np.ndarray, p_prior: np.ndarray) -> np.ndarray:
    p_ref, p_prior = np.asarray(p_ref, float), np.asarray(p_prior, float)
    if p_ref.shape != p_prior.shape:
        raise ValueError("reference and prior distributions differ in length")
    return 0.5 * (p_ref + p_prior)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    support = p > 0
    if np.any(support & (q <= 0)):
        bad = np.flatnonzero(support & (q <= 0)).tolist()
        raise SupportError(f"p has mass on actions {bad} where q is zero")
    ps, qs = p[support], np.maximum(q[support], KL_FLOOR)
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(qs)))))


def sample_action(dist: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    dist = np.asarray(dist, float)
    u = rng.random()
    a = int(np.searchsorted(np.cumsum(dist), u, side="right"))
    if a >= dist.size:  # u beyond a cumsum that rounded below 1
        a = int(np.flatnonzero(dist > 0)[-1])
    return a, float(np.log(dist[a]))


def greedy_action(dist: np.ndarray) -> tuple[int, float]:
    a = int(np.argmax(dist))
    return a, float(np.log(dist[a]))
