"""Deterministic hashed bag-of-words embeddings for tasks, budgets and agents.

Stands in for a pretrained sentence encoder. Anything exposing
``embed_text``/``embed_context``/``embed_agent`` with the same signatures can
replace :class:`HashingFeaturizer`.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .core import AgentSpec, BudgetSpec, TaskInstance

DEFAULT_DIM = 64
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def _bucket_and_sign(token: str, d: int) -> tuple[int, float]:
    raw = token.encode("utf-8")
    bucket = int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little") % d
    sign_bit = hashlib.blake2b(raw, digest_size=1, person=b"sign").digest()[0] & 1
    return bucket, (1.0 if sign_bit else -1.0)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.dot(v, v))
    if norm == 0.0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm


def embed_text(text: str, d: int = DEFAULT_DIM) -> np.ndarray:
    """Signed hashed bag of words, unit normalized.

    Text with no tokens (or whose contributions cancel exactly) maps to the
    basis vector e0.
    """
    if d < 8:
        raise ValueError(f"embedding dimension must be >= 8, got {d}")
    v = np.zeros(d)
    for token in tokenize(text):
        bucket, sign = _bucket_and_sign(token, d)
        v[bucket] += sign
    return _unit(v)


def budget_feature(budget: BudgetSpec) -> float:
    return min(budget.total_tokens / budget.reference_tokens, 2.0) / 2.0


def embed_context(task: TaskInstance, budget: BudgetSpec, d: int = DEFAULT_DIM) -> np.ndarray:
    if d < 9:
        raise ValueError(f"context dimension must be >= 9, got {d}")
    v = np.append(embed_text(task.text, d - 1), budget_feature(budget))
    return v / np.sqrt(np.dot(v, v))


def embed_agent(agent: AgentSpec, d: int = DEFAULT_DIM) -> np.ndarray:
    # Shares the d-1 text buckets of embed_context; the budget slot stays 0.
    if d < 9:
        raise ValueError(f"agent dimension must be >= 9, got {d}")
    return np.append(embed_text(agent.role_text, d - 1), 0.0)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, float), np.asarray(v, float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    norm = np.linalg.norm(u) * np.linalg.norm(v)
    if norm == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, np.dot(u, v) / norm)))


@dataclass(frozen=True)
class HashingFeaturizer:
    dim: int = DEFAULT_DIM

    def embed_text(self, text: str) -> np.ndarray:
        return embed_text(text, self.dim)

    def embed_context(self, task: TaskInstance, budget: BudgetSpec) -> np.ndarray:
        return embed_context(task, budget, self.dim)

    def embed_agent(self, agent: AgentSpec) -> np.ndarray:
        return embed_agent(agent, self.dim)

    def embed_pool(self, pool) -> np.ndarray:
        return np.stack([self.embed_agent(a) for a in pool])
