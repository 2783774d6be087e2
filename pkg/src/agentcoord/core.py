"""Shared domain types: agents, tasks, budgets, GraphSpecs and trajectories."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

FAMILIES = ("qa", "math", "code", "synthetic")
BUNDLED_POOLS = ("qa", "math", "code", "auxiliary", "pipeline3")


class PoolError(ValueError):
    """Raised when an agent-pool document fails validation."""


class TerminatedBy(str, enum.Enum):
    STOP_ACTION = "stop_action"
    BUDGET_EXHAUSTED = "budget_exhausted"
    HORIZON_CAP = "horizon_cap"


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    name: str
    role_text: str
    success: Mapping[str, float]
    token_mean: float

    def success_for(self, family: str) -> float:
        return float(self.success.get(family, self.success.get("synthetic", 1.0)))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Hidden ground truth of a generated task.

    ``stage_success[k]`` is the probability that one invocation of
    ``stages[k]`` completes stage ``k`` once all earlier stages are done.
    ``token_means`` is indexed by agent id.
    """

    stages: tuple[int, ...]
    stage_success: tuple[float, ...]
    distractor_roles: tuple[int, ...]
    token_means: tuple[int, ...]
    token_sd_frac: float = 0.1

    def __post_init__(self):
        if not self.stages:
            raise ValueError("synthetic task needs at least one stage")
        if len(self.stage_success) != len(self.stages):
            raise ValueError("stage_success must have one entry per stage")
        if any(not 0.0 <= p <= 1.0 for p in self.stage_success):
            raise ValueError("stage_success entries must lie in [0, 1]")
        if set(self.stages) & set(self.distractor_roles):
            raise ValueError("a role cannot be both a stage and a distractor")
        n = len(self.token_means)
        if any(r < 0 or r >= n for r in (*self.stages, *self.distractor_roles)):
            raise ValueError("stage or distractor role outside the agent pool")
        if any(m < 1 for m in self.token_means):
            raise ValueError("token means must be >= 1")


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    family: str
    text: str
    label: str
    hidden_spec: SyntheticTaskSpec | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if not str(self.label):
            raise ValueError(f"task {self.task_id}: label must be non-empty")
        if (self.family == "synthetic") != (self.hidden_spec is not None):
            raise ValueError(f"task {self.task_id}: hidden_spec present iff family is synthetic")


@dataclass(frozen=True)
class BudgetSpec:
    total_tokens: int
    reference_tokens: int

    def __post_init__(self):
        if int(self.total_tokens) < 1 or int(self.reference_tokens) < 1:
            raise ValueError("budget token counts must be >= 1")


@dataclass(frozen=True, eq=False)
class GraphSpec:
    """Structural prior for one (task, budget) context.

    ``z`` holds participation weights, ``p`` the modulated directed edge
    probabilities ``p[i, j]`` for a hand-off from agent ``i`` to ``j``.
    """

    z: np.ndarray
    p: np.ndarray
    gamma_used: float
    context_hash: str

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        p = np.array(self.p, dtype=float)
        z.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "p", p)

    @property
    def n_agents(self) -> int:
        return len(self.z)

    def to_dict(self) -> dict[str, Any]:
        return {
            "z": [float(v) for v in self.z],
            "p": [[float(v) for v in row] for row in self.p],
            "gamma": float(self.gamma_used),
            "context_hash": self.context_hash,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GraphSpec:
        return cls(np.asarray(data["z"], float), np.asarray(data["p"], float),
                   float(data["gamma"]), str(data["context_hash"]))


def validate_graphspec(gs: GraphSpec) -> list[str]:
    """Every violated GraphSpec invariant; an empty list means valid."""
    z, p = np.asarray(gs.z, float), np.asarray(gs.p, float)
    n = len(z)
    if z.ndim != 1 or p.shape != (n, n):
        return [f"shape mismatch: z has shape {z.shape}, p has shape {p.shape}"]
    violations = []
    for i in np.flatnonzero(~((z >= 0) & (z <= 1))):
        violations.append(f"z[{i}]={z[i]!r} outside [0, 1]")
    bad = ~((p >= 0) & (p <= 1))
    for i, j in zip(*np.nonzero(bad)):
        violations.append(f"p[{i}][{j}]={p[i, j]!r} outside [0, 1]")
    for j in np.flatnonzero(z == 0):
        for i in np.flatnonzero(p[:, j] != 0):
            violations.append(f"p[{i}][{j}]={p[i, j]!r} in column {j} while z[{j}]=0")
    for i in np.flatnonzero(np.diag(p) != 0):
        violations.append(f"self-loop: p[{i}][{i}]={p[i, i]!r}")
    return violations


@dataclass(frozen=True)
class StepRecord:
    state_features: np.ndarray
    action: int
    logprob_old: float
    tokens: int
    shaped_reward: float
    raw_reward: float
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[StepRecord, ...]
    outcome: int
    total_tokens: int
    terminated_by: TerminatedBy

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    @property
    def shaped_return(self) -> float:
        return float(sum(s.shaped_reward for s in self.steps))

    @property
    def raw_return(self) -> float:
        return float(sum(s.raw_reward for s in self.steps))


# Actions are plain ints: 0..n-1 invoke an agent, n is STOP.

def stop_action(n_agents: int) -> int:
    return n_agents


def encode_action(action: int, n_agents: int) -> str | int:
    if not 0 <= action <= n_agents:
        raise ValueError(f"action {action} outside [0, {n_agents}]")
    return "STOP" if action == n_agents else int(action)


def decode_action(value: str | int, n_agents: int) -> int:
    action = n_agents if value == "STOP" else int(value)
    if not 0 <= action <= n_agents:
        raise ValueError(f"action {value!r} outside [0, {n_agents}]")
    return action


def canonical_answer(value: object) -> str:
    return re.sub(r"\s+", " ", str(value).strip().lower())


# -- agent pools --------------------------------------------------------------

def _parse_pool(doc: Any, where: str) -> list[AgentSpec]:
    if doc is None:
        raise PoolError(f"{where}: pool too small (0 agents, need >= 2)")
    agents = doc.get("agents") if isinstance(doc, Mapping) else doc
    if not isinstance(agents, list):
        raise PoolError(f"{where}: expected an 'agents' list")
    if len(agents) < 2:
        raise PoolError(f"{where}: pool too small ({len(agents)} agents, need >= 2)")
    pool, seen = [], set()
    for idx, entry in enumerate(agents):
        path = f"agents[{idx}]"
        if not isinstance(entry, Mapping) or "name" not in entry:
            raise PoolError(f"{where}: {path} needs a 'name'")
        name = str(entry["name"])
        if name in seen:
            raise PoolError(f"{where}: duplicate agent name {name!r}")
        seen.add(name)
        success = entry.get("success", {}) or {}
        if not isinstance(success, Mapping):
            raise PoolError(f"{where}: {path}.success must be a family table")
        checked = {}
        for fam, prob in success.items():
            try:
                prob = float(prob)
            except (TypeError, ValueError):
                raise PoolError(f"{where}: {path}.success.{fam} is not a number") from None
            if not 0.0 <= prob <= 1.0:
                raise PoolError(f"{where}: {path}.success.{fam}={prob} outside [0, 1]")
            checked[str(fam)] = prob
        token_mean = float(entry.get("token_mean", 100))
        if not token_mean >= 1:
            raise PoolError(f"{where}: {path}.token_mean={token_mean} must be >= 1")
        pool.append(AgentSpec(idx, name, str(entry.get("role_text", name)), checked, token_mean))
    return pool


def load_agent_pool(source: str | Path) -> list[AgentSpec]:
    """Load a pool from a YAML document, a file path or a bundled pool name."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and (source in BUNDLED_POOLS or Path(source).is_file())):
        if str(source) in BUNDLED_POOLS:
            text = resources.files("agentcoord.pools").joinpath(f"{source}.yaml").read_text()
            where = f"bundled pool {source!r}"
        else:
            text = Path(source).read_text(encoding="utf-8")
            where = str(source)
    else:
        text, where = str(source), "<document>"
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PoolError(f"{where}: does not parse: {exc}") from None
    return _parse_pool(doc, where)


def pool_to_yaml(pool: Sequence[AgentSpec]) -> str:
    doc = {"version": 1, "agents": [
        {"name": a.name, "role_text": a.role_text, "token_mean": a.token_mean,
         "success": dict(a.success)} for a in pool]}
    return yaml.safe_dump(doc, sort_keys=False)


def subset_pool(pool: Sequence[AgentSpec], names: Sequence[str]) -> list[AgentSpec]:
    by_name = {a.name: a for a in pool}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise PoolError(f"unknown agents {missing}")
    return [AgentSpec(i, by_name[n].name, by_name[n].role_text, by_name[n].success,
                      by_name[n].token_mean) for i, n in enumerate(names)]

