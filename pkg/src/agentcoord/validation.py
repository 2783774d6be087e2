"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from numbers import Integral
from typing import Iterable, Sequence

import numpy as np

from .core import AgentSpec, BudgetSpec, PoolError, TaskInstance, load_agent_pool


def check_pool(pool) -> tuple[AgentSpec, ...]:
    """Accept a bundled pool name, a YAML path or a sequence of AgentSpec."""
    if isinstance(pool, str):
        return tuple(load_agent_pool(pool))
    pool = tuple(pool)
    if len(pool) < 2:
        raise PoolError(f"pool too small ({len(pool)} agents, need >= 2)")
    for i, a in enumerate(pool):
        if not isinstance(a, AgentSpec):
            raise TypeError(f"pool[{i}] is {type(a).__name__}, expected AgentSpec")
        if a.agent_id != i:
            raise PoolError(f"pool[{i}] has agent_id {a.agent_id}; ids must be 0..N-1 in order")
    return pool


def check_tasks(tasks: Iterable, allow_empty: bool = False) -> list[TaskInstance]:
    tasks = list(tasks)
    if not tasks and not allow_empty:
        raise ValueError("expected at least one task")
    for i, t in enumerate(tasks):
        if not isinstance(t, TaskInstance):
            raise TypeError(f"tasks[{i}] is {type(t).__name__}, expected TaskInstance")
    return tasks


def check_tasks_match_pool(tasks: Sequence[TaskInstance], pool: Sequence[AgentSpec]) -> None:
    n = len(pool)
    for t in tasks:
        spec = t.hidden_spec
        if spec is not None and (max(spec.stages) >= n or len(spec.token_means) != n):
            raise ValueError(f"task {t.task_id} was generated for a different pool "
                             f"(needs {len(spec.token_means)} agents, pool has {n})")


def check_budget(total_tokens, reference_tokens=None) -> BudgetSpec:
    if isinstance(total_tokens, BudgetSpec):
        return total_tokens
    for name, v in (("total_tokens", total_tokens), ("reference_tokens", reference_tokens)):
        if v is not None and (isinstance(v, bool) or not isinstance(v, Integral)):
            raise TypeError(f"{name} must be an integer, got {v!r}")
    ref = total_tokens if reference_tokens is None else reference_tokens
    return BudgetSpec(int(total_tokens), int(ref))


def check_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_distribution(p, atol: float = 1e-9) -> np.ndarray:
    p = check_vector(p, name="distribution")
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"not a probability distribution (sum {p.sum():.12g}, min {p.min():.3g})")
    return p


def check_unit_interval(value: float, name: str, open_ends: bool = False) -> float:
    v = float(value)
    ok = 0.0 < v < 1.0 if open_ends else 0.0 <= v <= 1.0
    if not ok:
        bounds = "(0, 1)" if open_ends else "[0, 1]"
        raise ValueError(f"{name} must lie in {bounds}, got {v}")
    return v
