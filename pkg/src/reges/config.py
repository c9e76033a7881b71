"""Run configuration: strict YAML/JSON loading with defaults."""

from __future__ import annotations

import copy
import difflib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from reges.corpus import FORMATS, SPLITS
from reges.embed import EmbedderConfig
from reges.llm_client import DEFAULT_TEMPERATURE, TOKEN_BUDGET, EndpointConfig
from reges.query_expert import QueryMode

ENDPOINT_ROLES = ("pseudo", "qr", "generator")

# common misnamings mapped to the real key, for error suggestions
ALIASES = {
    "retriever": "embedder",
    "encoder": "embedder",
    "embedding": "embedder",
    "top_k": "k",
    "topk": "k",
    "num_candidates": "k",
    "negative": "negatives",
    "negative_mode": "negatives",
    "budget": "token_budget",
    "max_input_tokens": "token_budget",
    "output_dir": "out_dir",
    "output": "out_dir",
    "dataset": "datasets",
    "mode": "query_mode",
    "llm": "endpoints",
    "models": "endpoints",
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    path: str
    format: str = "canonical"
    split: str = "train"


@dataclass
class RunConfig:
    datasets: list[DatasetSpec] = field(default_factory=list)
    catalog: str = ""
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    index: str | None = None
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    k: int = 50
    k_train: int = 49
    seed: int = 0
    query_mode: QueryMode = QueryMode.TRAINED_QR
    negatives: str = "hard"
    cot: bool = False
    token_budget: int = TOKEN_BUDGET
    temperature: float = DEFAULT_TEMPERATURE
    workers: int = 1
    recall_ks: list[int] = field(default_factory=lambda: [1, 5, 10, 20, 50])
    annotations: str | None = None
    out_dir: str = "reges-run"
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def snapshot(self, include_out_dir: bool = True) -> dict:
        """Plain-data view of the config, as written into artifact headers."""
        snap = {
            "datasets": [{"path": d.path, "format": d.format, "split": d.split} for d in self.datasets],
            "catalog": self.catalog,
            "embedder": self.embedder.to_dict(),
            "index": self.index,
            "endpoints": {k: v.to_dict() for k, v in sorted(self.endpoints.items())},
            "k": self.k,
            "k_train": self.k_train,
            "seed": self.seed,
            "query_mode": self.query_mode.value,
            "negatives": self.negatives,
            "cot": self.cot,
            "token_budget": self.token_budget,
            "temperature": self.temperature,
            "workers": self.workers,
            "recall_ks": list(self.recall_ks),
            "annotations": self.annotations,
        }
        if include_out_dir:
            snap["out_dir"] = self.out_dir
        return snap


_TOP_KEYS = set(RunConfig.__dataclass_fields__) - {"base_dir"}


def _reject_unknown(keys, allowed, where: str) -> None:
    for key in keys:
        if key in allowed:
            continue
        pool = sorted(set(allowed) | {a for a, t in ALIASES.items() if t in allowed})
        close = difflib.get_close_matches(key, pool, n=1, cutoff=0.6)
        hint = ""
        if close:
            hint = f"; did you mean {ALIASES.get(close[0], close[0])!r}?"
        raise ConfigError(f"unknown key {key!r} in {where}{hint}")


def _int(raw: dict, name: str, default: int, minimum: int | None = None) -> int:
    value = raw.get(name, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be ≥ {minimum}")
    return value


def parse_config(raw: dict | None, base_dir: Path | str = ".", check_paths: bool = True) -> RunConfig:
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _reject_unknown(raw, _TOP_KEYS, "config")
    cfg = RunConfig(base_dir=Path(base_dir))

    datasets = raw.get("datasets", [])
    if isinstance(datasets, dict):
        datasets = [datasets]
    for i, d in enumerate(datasets):
        _reject_unknown(d, {"path", "format", "split"}, f"datasets[{i}]")
        spec = DatasetSpec(**d)
        if spec.format not in FORMATS:
            raise ConfigError(f"datasets[{i}].format must be one of {FORMATS}")
        if spec.split not in SPLITS:
            raise ConfigError(f"datasets[{i}].split must be one of {SPLITS}")
        cfg.datasets.append(spec)
    cfg.catalog = raw.get("catalog", "")

    emb = raw.get("embedder", {}) or {}
    _reject_unknown(emb, {"backend", "dim", "model_name", "endpoint", "batch_size", "max_in_flight", "timeout"},
                    "embedder")
    try:
        cfg.embedder = EmbedderConfig(**emb)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"embedder: {exc}") from exc

    cfg.index = raw.get("index")
    endpoints = raw.get("endpoints", {}) or {}
    _reject_unknown(endpoints, set(ENDPOINT_ROLES), "endpoints")
    for role, ep in endpoints.items():
        try:
            cfg.endpoints[role] = EndpointConfig.from_dict(ep)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"endpoints.{role}: {exc}") from exc

    cfg.k = _int(raw, "k", 50, 1)
    cfg.k_train = _int(raw, "k_train", 49, 1)
    cfg.seed = _int(raw, "seed", 0)
    if not -(2**63) <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in 64 bits")
    cfg.token_budget = _int(raw, "token_budget", TOKEN_BUDGET, 1)
    cfg.workers = _int(raw, "workers", 1, 1)
    try:
        cfg.query_mode = QueryMode.parse(raw.get("query_mode", "trained_qr"))
    except ValueError as exc:
        raise ConfigError(f"query_mode: {exc}") from exc
    cfg.negatives = raw.get("negatives", "hard")
    if cfg.negatives not in ("hard", "random"):
        raise ConfigError("negatives must be 'hard' or 'random'")
    cot = raw.get("cot", False)
    if cot in ("on", "off"):
        cot = cot == "on"
    if not isinstance(cot, bool):
        raise ConfigError("cot must be a boolean")
    cfg.cot = cot
    temp = raw.get("temperature", DEFAULT_TEMPERATURE)
    if isinstance(temp, bool) or not isinstance(temp, (int, float)) or temp < 0:
        raise ConfigError("temperature must be a number ≥ 0")
    cfg.temperature = float(temp)
    ks = raw.get("recall_ks", cfg.recall_ks)
    if not isinstance(ks, list) or not all(isinstance(x, int) and x >= 1 for x in ks):
        raise ConfigError("recall_ks must be a list of integers ≥ 1")
    cfg.recall_ks = ks
    cfg.annotations = raw.get("annotations")
    cfg.out_dir = raw.get("out_dir", cfg.out_dir)

    if check_paths:
        for i, d in enumerate(cfg.datasets):
            if not cfg.resolve(d.path).exists():
                raise ConfigError(f"datasets[{i}].path does not exist: {d.path}")
        if cfg.catalog and not cfg.resolve(cfg.catalog).exists():
            raise ConfigError(f"catalog does not exist: {cfg.catalog}")
        if cfg.annotations and not cfg.resolve(cfg.annotations).exists():
            raise ConfigError(f"annotations do not exist: {cfg.annotations}")
    return cfg


def validate_config(path: str | Path, check_paths: bool = True, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a YAML (or JSON) config file, apply defaults, check invariants."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = raw or {}
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(raw, base_dir=path.parent, check_paths=check_paths)
