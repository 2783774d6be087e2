"""Command line: gen-tasks, train-prior, train-policy, eval, inspect, ablate.

Exit codes: 0 success, 2 usage or configuration problems, 3 corrupt or
tampered artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import PoolError, load_agent_pool, pool_to_yaml, validate_graphspec
from .env import DIFFICULTIES, SimulatedBackend, generate_tasks, read_tasks, write_tasks
from .grpo import ARMS, TrainingDiverged, evaluate, top2_mass, train, transition_matrix
from .io import (CheckpointError, ConfigError, ManifestError, RunConfig, RunManifest,
                 graphspec_to_json, load_checkpoint, load_config, policy_checkpoint,
                 policy_from_checkpoint, prior_checkpoint, prior_from_checkpoint, save_checkpoint,
                 read_manifest, sha256_bytes, sha256_file, utc_now,
                 write_manifest, write_metrics)
from .pipeline import build_contexts, check_arm, fit_prior
from .prior import DivergedError

log = logging.getLogger("agentcoord")

ARM_LABELS = {"full": "full", "no-z": "w/o participation (z)", "no-p": "w/o plausibility (p)",
              "no-graphspec": "w/o GraphSpec", "no-policy": "w/o policy"}


class UsageError(Exception):
    """Bad arguments or missing prerequisites (exit 2)."""


class CorruptArtifact(Exception):
    """Unreadable or tampered artifact (exit 3)."""


# -- shared helpers ----------------------------------------------------------------

def _config(args) -> RunConfig:
    sets = list(args.set or [])
    for flag, key in (("seed", "seed"), ("budget", "budget_tokens"),
                      ("reference_budget", "reference_tokens")):
        value = getattr(args, flag, None)
        if value is not None:
            sets.append(f"{key}={value}")
    return load_config(args.config, sets)


def _pool(args):
    try:
        return tuple(load_agent_pool(args.pool))
    except (PoolError, OSError) as exc:
        raise UsageError(f"cannot load pool {args.pool!r}: {exc}") from exc


def _tasks(path):
    try:
        return read_tasks(path)
    except OSError as exc:
        raise UsageError(f"cannot read task file {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptArtifact(f"task file {path} is malformed: {exc}") from exc


def _writable(path: str | Path) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise UsageError(f"cannot write {path}: directory {path.parent} does not exist")
    return path


def _verify_sidecar(path) -> None:
    """If a checkpoint has a manifest next to it, its recorded hash must match."""
    side = _manifest_path(Path(path))
    if not side.exists():
        return
    manifest = read_manifest(side)
    digest = manifest.outputs.get(str(path))
    if digest is None:
        digest = next((d for n, d in manifest.outputs.items() if Path(n).name == Path(path).name), None)
    if digest is not None and digest != sha256_file(path):
        raise ManifestError(f"{path} does not match the hash recorded in {side}")


def _load_prior(path):
    if path is None or not Path(path).exists():
        raise UsageError("no prior checkpoint found: run train-prior first")
    _verify_sidecar(path)
    try:
        return prior_from_checkpoint(load_checkpoint(path))
    except CheckpointError as exc:
        raise CorruptArtifact(f"prior checkpoint {path}: {exc}") from exc


def _load_policy(path):
    if path is None or not Path(path).exists():
        raise UsageError("no policy checkpoint found: run train-policy first")
    _verify_sidecar(path)
    try:
        return policy_from_checkpoint(load_checkpoint(path))
    except CheckpointError as exc:
        raise CorruptArtifact(f"policy checkpoint {path}: {exc}") from exc


def _manifest(args, cfg: RunConfig, pool, command: str, started: str) -> RunManifest:
    inputs = {}
    for attr in ("tasks", "eval_tasks", "prior", "policy"):
        p = getattr(args, attr, None)
        if p and Path(p).exists():
            inputs[str(p)] = sha256_file(p)
    task_path = getattr(args, "tasks", None)
    return RunManifest(command=command, config=cfg.to_dict(), seed=cfg.seed,
                       pool_sha256=sha256_bytes(pool_to_yaml(pool).encode()),
                       task_sha256=inputs.get(str(task_path), "") if task_path else "",
                       started_at=started, inputs=inputs)


def _finish(manifest: RunManifest, outputs, manifest_path: Path) -> None:
    manifest.outputs = {str(p): sha256_file(p) for p in outputs}
    manifest.finished_at = utc_now()
    write_manifest(manifest_path, manifest)


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _check_pool_size(pool, n: int, what: str) -> None:
    if len(pool) != n:
        raise UsageError(f"{what} was trained for {n} agents but pool has {len(pool)}")


def _table(rows, header) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


# -- commands -------------------------------------------------------------------------

def cmd_gen_tasks(args) -> int:
    pool = _pool(args)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = _writable(args.out)
    started = utc_now()
    try:
        tasks = generate_tasks(args.count, pool, args.difficulty, args.seed, args.prefix)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not tasks:
        log.warning("count is 0: writing an empty task file")
    try:
        write_tasks(out, tasks)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from exc
    cfg = RunConfig(seed=args.seed)
    manifest = _manifest(args, cfg, pool, "gen-tasks", started)
    manifest.config["gen_tasks"] = {"difficulty": args.difficulty, "count": args.count}
    _finish(manifest, [out], _manifest_path(out))
    stages = [len(t.hidden_spec.stages) for t in tasks if t.hidden_spec]
    hist = {k: stages.count(k) for k in sorted(set(stages))}
    print(f"wrote {len(tasks)} {args.difficulty} tasks to {out}; stage counts {hist}")
    return 0


def cmd_train_prior(args) -> int:
    cfg = _config(args)
    pool = _pool(args)
    tasks = _tasks(args.tasks)
    if not tasks:
        raise UsageError("task file is empty")
    out = _writable(args.out)
    started = utc_now()
    try:
        prior = fit_prior(pool, tasks, cfg.budget, cfg.prior, seed=cfg.seed)
    except DivergedError as exc:
        raise UsageError(f"plausibility training {exc}; lower prior.lr") from exc
    save_checkpoint(out, prior_checkpoint(prior, cfg.prior))
    manifest = _manifest(args, cfg, pool, "train-prior", started)
    _finish(manifest, [out], _manifest_path(out))
    print(f"prior: {len(prior.buffer)} successful structures "
          f"(success rate {prior.success_rate:.3f}), plausibility loss {prior.final_loss:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_train_policy(args) -> int:
    cfg = _config(args)
    pool = _pool(args)
    arm = check_arm(args.arm)
    tasks = _tasks(args.tasks)
    if not tasks:
        raise UsageError("task file is empty")
    out, metrics_path = _writable(args.out), _writable(args.metrics)
    prior, prior_cfg = (None, cfg.prior)
    if arm != "no-graphspec":
        prior, prior_cfg = _load_prior(args.prior)
        _check_pool_size(pool, prior.edge_logits.n_agents, "prior")
    started = utc_now()
    contexts = build_contexts(tasks, cfg.budget, pool, prior, prior_cfg, arm)
    source = "prior" if arm == "no-policy" else "policy"
    try:
        result = train(contexts, cfg.budget, SimulatedBackend(pool), cfg.trainer,
                       action_source=source)
    except TrainingDiverged as exc:
        write_metrics(metrics_path, exc.metrics)
        if exc.params is not None:
            save_checkpoint(out, policy_checkpoint(exc.params, None, cfg.trainer, arm))
        print(f"training diverged: {exc}; last parameters kept in {out}", file=sys.stderr)
        return 1
    write_metrics(metrics_path, result.metrics)
    save_checkpoint(out, policy_checkpoint(result.params, result.optimizer, cfg.trainer, arm))
    manifest = _manifest(args, cfg, pool, "train-policy", started)
    _finish(manifest, [out, metrics_path], _manifest_path(out))
    tail = result.metrics[-min(50, len(result.metrics)):]
    if tail:
        print(f"last {len(tail)} updates: success {np.mean([r['success_rate'] for r in tail]):.3f}, "
              f"tokens {np.mean([r['mean_tokens'] for r in tail]):.1f}")
    print(f"wrote {out} and {metrics_path}")
    return 0


def _eval_contexts(args, cfg, pool, arm, tasks):
    prior, prior_cfg = (None, cfg.prior)
    if arm != "no-graphspec":
        prior, prior_cfg = _load_prior(args.prior)
        _check_pool_size(pool, prior.edge_logits.n_agents, "prior")
    return build_contexts(tasks, cfg.budget, pool, prior, prior_cfg, arm)


def cmd_eval(args) -> int:
    cfg = _config(args)
    pool = _pool(args)
    params, _, tcfg, arm = _load_policy(args.policy)
    _check_pool_size(pool, params.n_actions - 1, "policy")
    tasks = _tasks(args.tasks)
    if not tasks:
        raise UsageError("task file is empty")
    contexts = _eval_contexts(args, cfg, pool, arm, tasks)
    tcfg = replace(tcfg, cost_beta=cfg.trainer.cost_beta)
    source = "prior" if arm == "no-policy" else "policy"
    ev = evaluate(params, contexts, cfg.budget, SimulatedBackend(pool), tcfg, args.episodes,
                  greedy=not args.sample, action_source=source, seed=args.eval_seed)
    print(_table([[arm, len(tasks), f"{ev.accuracy:.4f}", f"{ev.avg_cost:.1f}",
                   f"{ev.mean_raw_return:.4f}"]],
                 ["arm", "tasks", "accuracy", "avg_cost", "mean_return"]))
    if args.out:
        out = _writable(args.out)
        out.write_text(json.dumps({"arm": arm, "accuracy": ev.accuracy, "avg_cost": ev.avg_cost,
                                   "mean_return": ev.mean_raw_return, "tasks": len(tasks)},
                                  sort_keys=True, indent=2) + "\n")
        manifest = _manifest(args, cfg, pool, "eval", utc_now())
        _finish(manifest, [out], _manifest_path(out))
    return 0


def cmd_inspect(args) -> int:
    cfg = _config(args)
    pool = _pool(args)
    tasks = _tasks(args.tasks)
    if args.task_id is None:
        if not tasks:
            raise UsageError("task file is empty")
        task = tasks[0]
    else:
        match = [t for t in tasks if t.task_id == args.task_id]
        if not match:
            raise UsageError(f"task {args.task_id!r} not found in {args.tasks}")
        task = match[0]
    prior, prior_cfg = _load_prior(args.prior)
    _check_pool_size(pool, prior.edge_logits.n_agents, "prior")
    (ctx,) = build_contexts([task], cfg.budget, pool, prior, prior_cfg, "full")
    gs = ctx.graphspec
    problems = validate_graphspec(gs)
    names = [a.name for a in pool]
    print(f"task {task.task_id}: {task.text}")
    print("participation z:")
    for name, z in zip(names, gs.z):
        print(f"  {name:<20} {z:.4f}")
    print("modulated edge probabilities (row = from, column = to):")
    print(_table([[n] + [f"{v:.3f}" for v in row] for n, row in zip(names, gs.p)],
                 ["from\\to"] + [str(i) for i in range(len(names))]))
    if problems:
        print("GraphSpec problems: " + "; ".join(problems))
    source, params, tcfg = "prior", None, cfg.trainer
    if args.policy:
        params, _, tcfg, _ = _load_policy(args.policy)
        _check_pool_size(pool, params.n_actions - 1, "policy")
        source = "policy"
    ev = evaluate(params, [ctx], cfg.budget, SimulatedBackend(pool), tcfg, args.episodes,
                  greedy=False, action_source=source, seed=args.eval_seed)
    rows, probs = transition_matrix(ev.trajectories, len(pool))
    print(f"transition matrix from {args.episodes} sampled {source} episodes "
          f"(row = current agent, column = next action, STOP last):")
    if len(rows):
        print(_table([[names[r]] + [f"{v:.3f}" for v in row] for r, row in zip(rows, probs)],
                     ["from\\to"] + [str(i) for i in range(len(names))] + ["STOP"]))
        print(f"top-2 transition mass: {top2_mass(probs):.4f}")
    else:
        print("  (no agent-to-action transitions observed)")
    if args.graphspec_out:
        out = _writable(args.graphspec_out)
        out.write_text(graphspec_to_json(gs) + "\n")
        print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    pool = _pool(args)
    train_tasks, eval_tasks = _tasks(args.tasks), _tasks(args.eval_tasks)
    if not train_tasks or not eval_tasks:
        raise UsageError("ablation needs non-empty train and eval task files")
    arms = args.arms.split(",") if args.arms else list(ARMS)
    for a in arms:
        if a not in ARMS:
            raise UsageError(f"unknown arm {a!r}; choose from {ARMS}")
    out_dir = Path(args.out_dir)
    if not out_dir.is_dir():
        raise UsageError(f"output directory {out_dir} does not exist")
    prior, prior_cfg = _load_prior(args.prior)
    _check_pool_size(pool, prior.edge_logits.n_agents, "prior")
    started = utc_now()
    backend = SimulatedBackend(pool)
    summary, outputs = [], []
    for arm in arms:
        train_ctx = build_contexts(train_tasks, cfg.budget, pool, prior, prior_cfg, arm)
        eval_ctx = build_contexts(eval_tasks, cfg.budget, pool, prior, prior_cfg, arm)
        source = "prior" if arm == "no-policy" else "policy"
        result = train(train_ctx, cfg.budget, backend, cfg.trainer, action_source=source)
        ev = evaluate(result.params, eval_ctx, cfg.budget, backend, cfg.trainer,
                      action_source=source)
        sampled = evaluate(result.params, eval_ctx, cfg.budget, backend, cfg.trainer, 4,
                           greedy=False, action_source=source, seed=777)
        _, probs = transition_matrix(sampled.trajectories, len(pool))
        metrics_path = out_dir / f"metrics_{arm}.csv"
        write_metrics(metrics_path, result.metrics)
        outputs.append(metrics_path)
        summary.append({"arm": arm, "accuracy": ev.accuracy, "avg_cost": ev.avg_cost,
                        "top2_mass": top2_mass(probs) if len(probs) else float("nan")})
        log.info("arm %s: accuracy %.4f cost %.1f", arm, ev.accuracy, ev.avg_cost)
    base = next((r for r in summary if r["arm"] == "full"), None)
    rows = []
    for r in summary:
        d_acc = r["accuracy"] - base["accuracy"] if base else float("nan")
        d_cost = (r["avg_cost"] / base["avg_cost"] - 1.0) * 100 if base and base["avg_cost"] else float("nan")
        r.update(delta_accuracy=d_acc, cost_change_pct=d_cost)
        rows.append([ARM_LABELS[r["arm"]], f"{r['accuracy']:.4f}", f"{d_acc:+.4f}",
                     f"{r['avg_cost']:.1f}", f"{d_cost:+.1f}%", f"{r['top2_mass']:.3f}"])
    summary_path = out_dir / "ablation_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        fields = ["arm", "accuracy", "delta_accuracy", "avg_cost", "cost_change_pct", "top2_mass"]
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({k: (repr(float(r[k])) if k != "arm" else r[k]) for k in fields})
    outputs.append(summary_path)
    print(_table(rows, ["variant", "accuracy", "d_acc", "avg_cost", "d_cost", "top2"]))
    manifest = _manifest(args, cfg, pool, "ablate", started)
    _finish(manifest, outputs, out_dir / "ablation.manifest.json")
    return 0


# -- parser ------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, tasks: bool = True) -> None:
    p.add_argument("--pool", default="math",
                   help="bundled pool name (qa, math, code, auxiliary, pipeline3) or YAML path")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. trainer.learning_rate=0.003")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int, help="token budget per episode")
    p.add_argument("--reference-budget", type=int, dest="reference_budget",
                   help="reference budget for the relevance temperature")
    if tasks:
        p.add_argument("--tasks", required=True, help="task file (JSON lines)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentcoord",
                                     description="Structural prior + orchestration policy for agent pools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="generate a synthetic task file")
    p.add_argument("--pool", default="math")
    p.add_argument("--difficulty", choices=DIFFICULTIES, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train-prior", help="learn participation gating and edge plausibility")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-policy", help="train the orchestration policy")
    _common(p)
    p.add_argument("--prior", help="prior checkpoint from train-prior")
    p.add_argument("--arm", default="full", choices=ARMS)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("eval", help="evaluate a trained policy")
    _common(p)
    p.add_argument("--prior")
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--sample", action="store_true", help="sample actions instead of argmax")
    p.add_argument("--eval-seed", type=int, default=12345, dest="eval_seed")
    p.add_argument("--out", help="write the result as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="show the GraphSpec and transitions for one task")
    _common(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--policy")
    p.add_argument("--task-id", dest="task_id")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--eval-seed", type=int, default=12345, dest="eval_seed")
    p.add_argument("--graphspec-out", dest="graphspec_out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="compare the full system against its ablations")
    _common(p)
    p.add_argument("--eval-tasks", required=True, dest="eval_tasks")
    p.add_argument("--prior", help="prior checkpoint from train-prior")
    p.add_argument("--arms", "--arm", dest="arms", help=f"comma-separated subset of {','.join(ARMS)}")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorruptArtifact, CheckpointError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
