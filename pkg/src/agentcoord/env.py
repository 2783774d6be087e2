"""Orchestration MDP with a simulated agent backend and synthetic task suites."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .core import (AgentSpec, BudgetSpec, SyntheticTaskSpec, TaskInstance, TerminatedBy,
                   canonical_answer)

DIFFICULTIES = ("easy", "pipeline", "hard")
DEFAULT_T_MAX = 12
HISTORY_KEEP = 3

_STOPWORDS = frozenset(
    "a an and the to of into in or with before by for one that from on is be are as at it its "
    "their them this".split())
_FILLER = ("problem", "item", "request", "case", "input", "question", "record", "value",
           "report", "sample", "detail", "context")


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class InvocationResult:
    output_text: str
    tokens: int
    stage_advanced: bool = False

    def __post_init__(self):
        if self.tokens < 1:
            raise ValueError("an invocation consumes at least one token")


@dataclass(frozen=True)
class EnvState:
    task: TaskInstance
    budget: BudgetSpec
    invocation_counts: tuple[int, ...]
    stage_progress: int = 0
    last_action: int | None = None
    tokens_used: int = 0
    n_steps: int = 0
    done: bool = False
    terminated_by: TerminatedBy | None = None
    outcome: int | None = None
    history: tuple[str, ...] = ()

    @property
    def n_agents(self) -> int:
        return len(self.invocation_counts)

    @property
    def stages_done(self) -> int:
        return bin(self.stage_progress).count("1")

    @property
    def remaining_fraction(self) -> float:
        return max(0.0, 1.0 - self.tokens_used / self.budget.total_tokens)


class Backend(Protocol):
    pool: Sequence[AgentSpec]

    def invoke(self, agent_id: int, state: EnvState, rng: np.random.Generator) -> InvocationResult:
        ...


def simulated_invoke(agent: AgentSpec, state: EnvState, rng: np.random.Generator) -> InvocationResult:
    spec = state.task.hidden_spec
    if spec is None:
        mean, sd_frac = agent.token_mean, 0.1
    else:
        mean, sd_frac = spec.token_means[agent.agent_id], spec.token_sd_frac
    tokens = max(1, int(round(rng.normal(mean, sd_frac * mean))))
    advanced = False
    if spec is not None:
        k = state.stages_done
        if k < len(spec.stages) and spec.stages[k] == agent.agent_id:
            advanced = bool(rng.random() < spec.stage_success[k])
    status = "advanced" if advanced else "no progress"
    return InvocationResult(f"{agent.name}: {status}", tokens, advanced)


@dataclass(frozen=True)
class SimulatedBackend:
    pool: Sequence[AgentSpec]

    def invoke(self, agent_id: int, state: EnvState, rng: np.random.Generator) -> InvocationResult:
        return simulated_invoke(self.pool[agent_id], state, rng)


def reset(task: TaskInstance, budget: BudgetSpec, n_agents: int) -> EnvState:
    return EnvState(task=task, budget=budget, invocation_counts=(0,) * n_agents)


def judge(state: EnvState) -> int:
    spec = state.task.hidden_spec
    if spec is not None:
        return int(state.stages_done == len(spec.stages))
    if not state.history:
        return 0
    return int(canonical_answer(state.history[-1]) == canonical_answer(state.task.label))


def step(state: EnvState, action: int, backend: Backend, beta_cost: float,
         rng: np.random.Generator, t_max: int = DEFAULT_T_MAX) -> tuple[EnvState, float, bool]:
    """Apply one orchestration action; returns ``(next_state, r_t, done)``.

    ``r_t = R_acc - beta_cost * tokens / budget`` where ``R_acc`` is only
    granted on the terminating step.
    """
    if state.done:
        raise EpisodeFinished("episode finished")
    n = state.n_agents
    if not 0 <= action <= n:
        raise ValueError(f"action {action} outside [0, {n}]")
    if action == n:
        final = replace(state, done=True, terminated_by=TerminatedBy.STOP_ACTION)
        r_acc = judge(final)
        return replace(final, outcome=r_acc), float(r_acc), True

    result = backend.invoke(action, state, rng)
    budget = state.budget.total_tokens
    tokens, advanced = result.tokens, result.stage_advanced
    terminated = None
    if state.tokens_used + tokens > budget:
        # cut off mid-invocation: the partial output does not count
        tokens, advanced = budget - state.tokens_used, False
        terminated = TerminatedBy.BUDGET_EXHAUSTED
    elif state.tokens_used + tokens == budget:
        terminated = TerminatedBy.BUDGET_EXHAUSTED
    counts = list(state.invocation_counts)
    counts[action] += 1
    progress = state.stage_progress
    if advanced:
        progress |= 1 << state.stages_done
    nxt = replace(state, invocation_counts=tuple(counts), stage_progress=progress,
                  last_action=action, tokens_used=state.tokens_used + tokens,
                  n_steps=state.n_steps + 1,
                  history=(state.history + (result.output_text,))[-HISTORY_KEEP:])
    if terminated is None and nxt.n_steps >= t_max:
        terminated = TerminatedBy.HORIZON_CAP
    reward = -beta_cost * tokens / budget
    if terminated is not None:
        r_acc = judge(nxt)
        nxt = replace(nxt, done=True, terminated_by=terminated, outcome=r_acc)
        reward += r_acc
    return nxt, float(reward), nxt.done


# -- task generation ----------------------------------------------------------

def _content_words(text: str) -> list[str]:
    from .featurizer import tokenize
    return [w for w in dict.fromkeys(tokenize(text)) if w not in _STOPWORDS]


def _task_text(roles: Iterable[int], pool: Sequence[AgentSpec], rng: np.random.Generator) -> str:
    words = []
    for r in roles:
        vocab = _content_words(pool[r].role_text)
        take = min(3, len(vocab))
        words.extend(vocab[i] for i in sorted(rng.choice(len(vocab), take, replace=False)))
    words.extend(_FILLER[i] for i in rng.choice(len(_FILLER), 3, replace=False))
    order = rng.permutation(len(words))
    return " ".join(words[i] for i in order)


def generate_tasks(count: int, pool: Sequence[AgentSpec], difficulty: str,
                   rng: np.random.Generator | int, prefix: str | None = None) -> list[TaskInstance]:
    """Generate synthetic tasks whose stage order follows the pool order.

    easy: one stage. pipeline: roles 0 -> 1 -> 2, always succeed, noiseless
    token costs. hard: 2-4 stages, per-stage success in [0.6, 0.95], all
    other roles are distractors.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}; choose from {DIFFICULTIES}")
    n = len(pool)
    if n < 3:
        raise ValueError(f"pool too small for task generation ({n} agents, need >= 3)")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    prefix = prefix or difficulty
    base_means = [max(1, int(round(a.token_mean))) for a in pool]
    tasks = []
    for i in range(count):
        if difficulty == "pipeline":
            stages = (0, 1, 2)
            success = (1.0, 1.0, 1.0)
            means, sd_frac = tuple(base_means), 0.0
        elif difficulty == "easy":
            stages = (int(rng.integers(n)),)
            success = (pool[stages[0]].success_for("synthetic"),)
            means, sd_frac = tuple(base_means), 0.1
        else:
            k = int(rng.integers(2, min(4, n - 1) + 1))
            stages = tuple(int(r) for r in sorted(rng.choice(n, k, replace=False)))
            success = tuple(float(p) for p in rng.uniform(0.6, 0.95, size=k))
            means = tuple(max(1, int(round(m * f))) for m, f in
                          zip(base_means, rng.uniform(0.8, 1.2, size=n)))
            sd_frac = 0.1
        distractors = tuple(r for r in range(n) if r not in stages)
        spec = SyntheticTaskSpec(stages, success, distractors, means, sd_frac)
        text = _task_text(stages, pool, rng)
        label = "stages:" + "-".join(str(s) for s in stages)
        tasks.append(TaskInstance(f"{prefix}-{i:05d}", "synthetic", text, label, spec))
    return tasks


def task_to_dict(task: TaskInstance) -> dict:
    out = {"task_id": task.task_id, "family": task.family, "text": task.text, "label": task.label}
    if task.hidden_spec is not None:
        s = task.hidden_spec
        out["hidden_spec"] = {"stages": list(s.stages), "stage_success": list(s.stage_success),
                              "distractor_roles": list(s.distractor_roles),
                              "token_means": list(s.token_means), "token_sd_frac": s.token_sd_frac}
    return out


def task_from_dict(data: dict) -> TaskInstance:
    spec = data.get("hidden_spec")
    if spec is not None:
        spec = SyntheticTaskSpec(tuple(spec["stages"]), tuple(spec["stage_success"]),
                                 tuple(spec["distractor_roles"]), tuple(spec["token_means"]),
                                 float(spec.get("token_sd_frac", 0.1)))
    return TaskInstance(str(data["task_id"]), str(data["family"]), str(data["text"]),
                        str(data["label"]), spec)


def write_tasks(path: str | Path, tasks: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(task_to_dict(t), sort_keys=True) + "\n")


def read_tasks(path: str | Path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        return [task_from_dict(json.loads(line)) for line in fh if line.strip()]
