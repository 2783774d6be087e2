"""Persistence: binary checkpoints, run manifests, metrics CSV, GraphSpec
export and layered YAML run configuration."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import yaml

from . import nn
from .core import BudgetSpec, GraphSpec
from .grpo import METRIC_FIELDS, AdamState, TrainerConfig
from .policy import PolicyParams
from .prior import EdgeLogits, PlausibilityModel, PriorArtifacts, PriorConfig, TrajectoryBuffer

ARTIFACT_VERSION = "0.1.0"
CHECKPOINT_MAGIC = b"AGENTCOORD-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, tampered or incompatible checkpoint."""


class ManifestError(ValueError):
    """A manifest whose recorded hashes no longer match the files."""


class ConfigError(ValueError):
    """Invalid run configuration."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


# -- checkpoints -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Named float64 arrays plus a JSON-serializable metadata mapping."""

    arrays: Mapping[str, np.ndarray]
    meta: Mapping[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    """Magic line, one sorted-key JSON header line, then raw little-endian float64 data."""
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": ckpt.version, "dtype": "<f8", "arrays": entries,
              "meta": ckpt.meta, "payload_sha256": sha256_bytes(payload)}
    try:
        line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise CheckpointError(f"metadata is not serializable: {exc}") from exc
    return CHECKPOINT_MAGIC + line.encode() + b"\n" + payload


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint (bad magic line)")
    rest = data[len(CHECKPOINT_MAGIC):]
    cut = rest.find(b"\n")
    if cut < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(rest[:cut])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {header.get('version')!r} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    payload = rest[cut + 1:]
    if sha256_bytes(payload) != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload hash mismatch (file corrupted or truncated)")
    arrays = {}
    try:
        for e in header["arrays"]:
            raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(float)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt array table: {exc}") from exc
    return Checkpoint(arrays, header.get("meta", {}), header["version"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    data = checkpoint_to_bytes(ckpt)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data)


def _shape_list(shape: nn.MLPShape) -> list[int]:
    return [shape.in_dim, shape.hidden, shape.out_dim]


def _require(ckpt: Checkpoint, kind: str, names: Iterable[str]) -> None:
    if ckpt.meta.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, got {ckpt.meta.get('kind')!r}")
    missing = [n for n in names if n not in ckpt.arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks arrays {missing}")


def prior_checkpoint(prior: PriorArtifacts, cfg: PriorConfig, manifest_sha: str = "") -> Checkpoint:
    return Checkpoint(
        {"edge_logits": prior.edge_logits.logits, "psi": prior.model.psi},
        {"kind": "prior", "plausibility_shape": _shape_list(prior.model.shape),
         "edge_lambda_reg": prior.edge_logits.lambda_reg,
         "edge_learning_rate": prior.edge_logits.learning_rate,
         "prior_config": asdict(cfg), "final_loss": _finite_or_none(prior.final_loss),
         "success_rate": prior.success_rate, "manifest_sha256": manifest_sha})


def prior_from_checkpoint(ckpt: Checkpoint) -> tuple[PriorArtifacts, PriorConfig]:
    """The trajectory buffer is not persisted; the loaded artifacts carry an empty one."""
    _require(ckpt, "prior", ("edge_logits", "psi"))
    meta = ckpt.meta
    try:
        shape = nn.MLPShape(*meta["plausibility_shape"])
        model = PlausibilityModel(shape, ckpt.arrays["psi"].copy())
        shape.unpack(model.psi)
        logits = EdgeLogits(ckpt.arrays["edge_logits"].copy(), meta["edge_lambda_reg"],
                            meta["edge_learning_rate"])
        cfg = PriorConfig(**meta["prior_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent prior checkpoint: {exc}") from exc
    loss = meta.get("final_loss")
    art = PriorArtifacts(logits, model, TrajectoryBuffer(cfg.buffer_capacity),
                         float("nan") if loss is None else float(loss), float(meta["success_rate"]))
    return art, cfg


def policy_checkpoint(params: PolicyParams, optimizer: AdamState | None, cfg: TrainerConfig,
                      arm: str = "full", manifest_sha: str = "") -> Checkpoint:
    arrays = {"theta": params.theta}
    meta = {"kind": "policy", "shape": _shape_list(params.shape), "trainer_config": asdict(cfg),
            "arm": arm, "manifest_sha256": manifest_sha, "adam_t": 0}
    if optimizer is not None:
        arrays.update(adam_m=optimizer.m, adam_v=optimizer.v)
        meta["adam_t"] = optimizer.t
    return Checkpoint(arrays, meta)


def policy_from_checkpoint(ckpt: Checkpoint) -> tuple[PolicyParams, AdamState | None, TrainerConfig, str]:
    _require(ckpt, "policy", ("theta",))
    meta = ckpt.meta
    try:
        shape = nn.MLPShape(*meta["shape"])
        params = PolicyParams(shape, ckpt.arrays["theta"].copy())
        shape.unpack(params.theta)
        cfg = TrainerConfig(**meta["trainer_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent policy checkpoint: {exc}") from exc
    opt = None
    if "adam_m" in ckpt.arrays:
        opt = AdamState(ckpt.arrays["adam_m"].copy(), ckpt.arrays["adam_v"].copy(),
                        int(meta.get("adam_t", 0)))
    return params, opt, cfg, str(meta.get("arm", "full"))


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


# -- run manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    pool_sha256: str
    task_sha256: str = ""
    artifact_version: str = ARTIFACT_VERSION
    started_at: str = ""
    finished_at: str = ""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> RunManifest:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ManifestError(f"unknown manifest fields {sorted(unknown)}")
        return cls(**data)


def utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(path: str | Path, manifest: RunManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")


def read_manifest(path: str | Path) -> RunManifest:
    try:
        return RunManifest.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc


def verify_manifest(manifest: RunManifest, base: str | Path = ".") -> None:
    """Recompute the hash of every recorded input and output file."""
    base = Path(base)
    for kind in ("inputs", "outputs"):
        for name, digest in getattr(manifest, kind).items():
            p = Path(name) if Path(name).is_absolute() else base / name
            if not p.exists():
                raise ManifestError(f"{kind[:-1]} {name} is missing")
            if sha256_file(p) != digest:
                raise ManifestError(f"{kind[:-1]} {name} was modified after the run")


# -- metrics and GraphSpec export -------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_metrics(path: str | Path, rows: Iterable[Mapping], header: tuple[str, ...] = METRIC_FIELDS) -> None:
    """Fixed header, one line per row, floats written with ``repr`` so files
    from identical runs compare byte for byte."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [{k: (int(v) if k == "update" else float(v)) for k, v in r.items()} for r in reader]


def graphspec_to_json(gs: GraphSpec) -> str:
    return json.dumps(gs.to_dict(), sort_keys=True, indent=2)


def graphspec_from_json(text: str) -> GraphSpec:
    return GraphSpec.from_dict(json.loads(text))


# -- run configuration --------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    budget_tokens: int = 3000
    reference_tokens: int = 3000
    prior: PriorConfig = field(default_factory=PriorConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    @property
    def budget(self) -> BudgetSpec:
        return BudgetSpec(self.budget_tokens, self.reference_tokens)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"prior": PriorConfig, "trainer": TrainerConfig}
_TOP = ("seed", "budget_tokens", "reference_tokens")


def parse_overrides(pairs: Iterable[str]) -> dict:
    """``["trainer.learning_rate=0.01", "seed=3"]`` -> nested dict with YAML-typed values."""
    out: dict = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {pair!r}: {exc}") from exc
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {pair!r} conflicts with an earlier scalar")
        node[parts[-1]] = value
    return out


def _merge(base: dict, top: Mapping) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(file_data: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Layering is defaults < config file < command-line overrides."""
    merged = _merge(file_data or {}, overrides or {})
    unknown = set(merged) - set(_TOP) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig()
    kwargs = {}
    for k in _TOP:
        if k in merged:
            if isinstance(merged[k], bool) or not isinstance(merged[k], int):
                raise ConfigError(f"{k} must be an integer, got {merged[k]!r}")
            kwargs[k] = merged[k]
    for name, klass in _SECTIONS.items():
        section = merged.get(name) or {}
        if not isinstance(section, Mapping):
            raise ConfigError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in fields(klass)}
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown {name} keys {sorted(bad)}")
        try:
            kwargs[name] = replace(getattr(cfg, name), **section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from exc
    try:
        out = replace(cfg, **kwargs)
        out.budget  # validates the budget pair
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return out


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"config {path} must be a mapping at top level")
    return build_config(data, parse_overrides(overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
