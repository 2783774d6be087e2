"""scikit-learn style front end.

``StructuralPrior`` learns GraphSpecs from tasks (``fit``/``transform``);
``Orchestrator`` trains the orchestration policy on top of it
(``fit``/``predict``/``score``). Both expose ``get_params``/``set_params``
through ``BaseEstimator`` and can be cloned.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .core import GraphSpec
from .env import SimulatedBackend
from .featurizer import HashingFeaturizer
from .grpo import ARMS, EvalResult, TrainerConfig, evaluate, train
from .pipeline import build_contexts, fit_prior
from .prior import PriorConfig, build_graphspec, context_hash, relevance
from .validation import check_budget, check_pool, check_tasks, check_tasks_match_pool


class StructuralPrior(TransformerMixin, BaseEstimator):
    """Stage one: relevance gating plus a plausibility network trained on
    successful sampled structures.

    ``transform`` maps each task to its GraphSpec.
    """

    def __init__(self, pool="math", budget_tokens=3000, reference_tokens=3000, dim=64,
                 gamma=0.4, episodes=1500, structures_per_episode=4, plausibility_epochs=3000,
                 plausibility_lr=2.0, t_max=12, random_state=0):
        self.pool = pool
        self.budget_tokens = budget_tokens
        self.reference_tokens = reference_tokens
        self.dim = dim
        self.gamma = gamma
        self.episodes = episodes
        self.structures_per_episode = structures_per_episode
        self.plausibility_epochs = plausibility_epochs
        self.plausibility_lr = plausibility_lr
        self.t_max = t_max
        self.random_state = random_state

    def _config(self) -> PriorConfig:
        return PriorConfig(dim=self.dim, gamma=self.gamma, episodes=self.episodes,
                           structures_per_episode=self.structures_per_episode,
                           epochs=self.plausibility_epochs, lr=self.plausibility_lr,
                           t_max=self.t_max)

    def fit(self, X, y=None):
        pool = check_pool(self.pool)
        tasks = check_tasks(X)
        check_tasks_match_pool(tasks, pool)
        budget = check_budget(self.budget_tokens, self.reference_tokens)
        cfg = self._config()
        self.pool_ = pool
        self.budget_ = budget
        self.config_ = cfg
        self.artifacts_ = fit_prior(pool, tasks, budget, cfg, seed=self.random_state)
        self.agent_embeddings_ = HashingFeaturizer(cfg.dim).embed_pool(pool)
        self.n_agents_ = len(pool)
        return self

    def transform(self, X) -> list[GraphSpec]:
        check_is_fitted(self, "artifacts_")
        tasks = check_tasks(X, allow_empty=True)
        feat = HashingFeaturizer(self.config_.dim)
        out = []
        for t in tasks:
            ctx = feat.embed_context(t, self.budget_)
            z = relevance(ctx, self.agent_embeddings_, self.budget_, self.config_)
            out.append(build_graphspec(z, self.artifacts_.model, ctx, self.agent_embeddings_,
                                       self.config_.gamma, context_hash(t, self.budget_)))
        return out


class Orchestrator(BaseEstimator):
    """Stage two: group-relative policy optimization of the agent-selection
    policy under a GraphSpec prior.

    If ``prior`` is None or unfitted, ``fit`` first fits a clone of it (or a
    default ``StructuralPrior`` sharing this estimator's pool and budget) on
    the same tasks. The ``no-graphspec`` arm needs no prior.
    """

    def __init__(self, pool="math", prior=None, arm="full", budget_tokens=3000,
                 reference_tokens=3000, max_updates=1000, group_size=8, learning_rate=1e-3,
                 reward_kl=0.7, kl_coeff=0.04, cost_beta=0.02, clip_eps=0.2, inner_epochs=2,
                 t_max=12, random_state=0):
        self.pool = pool
        self.prior = prior
        self.arm = arm
        self.budget_tokens = budget_tokens
        self.reference_tokens = reference_tokens
        self.max_updates = max_updates
        self.group_size = group_size
        self.learning_rate = learning_rate
        self.reward_kl = reward_kl
        self.kl_coeff = kl_coeff
        self.cost_beta = cost_beta
        self.clip_eps = clip_eps
        self.inner_epochs = inner_epochs
        self.t_max = t_max
        self.random_state = random_state

    def _trainer_config(self) -> TrainerConfig:
        return TrainerConfig(group_size=self.group_size, clip_eps=self.clip_eps,
                             kl_coeff=self.kl_coeff, reward_kl=self.reward_kl,
                             cost_beta=self.cost_beta, inner_epochs=self.inner_epochs,
                             learning_rate=self.learning_rate, max_updates=self.max_updates,
                             seed=self.random_state, t_max=self.t_max)

    def _resolve_prior(self, tasks) -> StructuralPrior | None:
        if self.arm == "no-graphspec":
            return None
        prior = self.prior
        if prior is None:
            prior = StructuralPrior(pool=self.pool, budget_tokens=self.budget_tokens,
                                    reference_tokens=self.reference_tokens, t_max=self.t_max,
                                    random_state=self.random_state)
        try:
            check_is_fitted(prior, "artifacts_")
        except NotFittedError:
            prior = clone(prior).fit(tasks)
        if prior.budget_ != self.budget_:
            raise ValueError(f"prior was fitted for budget {prior.budget_}, "
                             f"orchestrator uses {self.budget_}")
        if len(prior.pool_) != len(self.pool_):
            raise ValueError("prior and orchestrator pools differ in size")
        return prior

    def fit(self, X, y=None):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        pool = check_pool(self.pool)
        tasks = check_tasks(X)
        check_tasks_match_pool(tasks, pool)
        self.pool_ = pool
        self.budget_ = check_budget(self.budget_tokens, self.reference_tokens)
        cfg = self._trainer_config()
        prior = self._resolve_prior(tasks)
        prior_cfg = prior.config_ if prior is not None else PriorConfig()
        contexts = build_contexts(tasks, self.budget_, pool,
                                  prior.artifacts_ if prior is not None else None,
                                  prior_cfg, self.arm)
        source = "prior" if self.arm == "no-policy" else "policy"
        result = train(contexts, self.budget_, SimulatedBackend(pool), cfg, action_source=source)
        self.prior_ = prior
        self.prior_config_ = prior_cfg
        self.trainer_config_ = cfg
        self.params_ = result.params
        self.optimizer_ = result.optimizer
        self.metrics_ = result.metrics
        return self

    def _contexts(self, X):
        check_is_fitted(self, "params_")
        tasks = check_tasks(X)
        check_tasks_match_pool(tasks, self.pool_)
        return build_contexts(tasks, self.budget_, self.pool_,
                              self.prior_.artifacts_ if self.prior_ is not None else None,
                              self.prior_config_, self.arm)

    def evaluate(self, X, episodes_per_task: int = 1, greedy: bool = True,
                 seed: int = 12345) -> EvalResult:
        source = "prior" if self.arm == "no-policy" else "policy"
        return evaluate(self.params_, self._contexts(X), self.budget_, SimulatedBackend(self.pool_),
                        self.trainer_config_, episodes_per_task, greedy, source, seed)

    def predict(self, X) -> list[tuple[int, ...]]:
        """Greedy action sequence per task; the STOP action is ``len(pool)``."""
        return [t.actions for t in self.evaluate(X).trajectories]

    def score(self, X, y=None) -> float:
        """Evaluation accuracy (fraction of tasks judged correct)."""
        return self.evaluate(X).accuracy

    def with_cost_beta(self, beta: float) -> Orchestrator:
        """Unfitted copy with a different token-cost coefficient."""
        return clone(self).set_params(cost_beta=beta)
