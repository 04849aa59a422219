"""Run configuration: strict parsing, component builders, task loading.

The config file is JSON with a fixed key schema; any unknown key anywhere in
the tree aborts before any side effect. Secrets never live in the file:
backend entries name an environment variable holding the API key.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .embedding import HashingEmbedder, HttpEmbedder
from .errors import ConfigError
from .gateway import Backends, Gateway, HttpBackend, RuleBackend, ScriptedBackend
from .memory import ClearPolicy, MemoryStore, MetaPlanStore, RetrievalConfig
from .prompts import PromptLibrary
from .records import read_jsonl
from .rl import GrpoConfig
from .runtime import DEFAULT_CATEGORIES, EpisodeOptions, Limits, PROMPT_MODES
from .tools import CorpusIndex, ImageCache, ToolEnv
from .trajectory import Task
from .ttl import TtlBatchConfig

CONFIG_SCHEMA_TAG = "runconfig/1"

_BACKEND_KEYS = {
    "kind",
    "endpoint",
    "api_key_env",
    "model",
    "logprobs",
    "path",
    "strict",
    "retries",
    "backoff",
    "temperature",
    "max_tokens",
}

_ALLOWED: dict = {
    "schema": None,
    "seed": None,
    "prompt_mode": None,
    "supervision": None,
    "backends": {"planner": _BACKEND_KEYS, "executor": _BACKEND_KEYS, "manager": _BACKEND_KEYS},
    "embedding": {"kind", "dim", "ngram", "endpoint", "api_key_env", "model"},
    "retrieval": {
        "alpha_q",
        "alpha_c",
        "lambda_sim",
        "lambda_val",
        "lambda_freq",
        "k_pos",
        "k_neg",
        "eps_norm",
        "replace_threshold",
    },
    "grpo": {"clip_eps", "kl_beta", "group_size", "adv_eps", "sigma_mode"},
    "ttl": {
        "group_size",
        "epochs",
        "mode",
        "router_examples",
        "plan_temperature",
        "length_metric",
        "clear_after_batch",
        "trainer_command",
    },
    "search": {"endpoint", "api_key_env"},
    "limits": {"assistant_turns", "user_turns", "tool_top_k", "tool_response_budget", "max_tokens"},
    "clear_policy": {"label", "max_value", "min_usage"},
    "paths": {
        "memory_store",
        "meta_store",
        "corpus",
        "image_cache",
        "taskset",
        "out_dir",
        "templates",
    },
    "eval": {"update_memory"},
    "categories": None,
    "export_metadata": {"learning_rate", "batch_size"},
}


def _check_keys(tree: dict, allowed: dict, path: str = "") -> None:
    for key, value in tree.items():
        if key not in allowed:
            raise ConfigError(f"unknown configuration key: {path}{key}")
        sub = allowed[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {path}{key} must be an object")
            _check_keys(value, sub, path=f"{path}{key}.")
        elif isinstance(sub, set):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {path}{key} must be an object")
            for k in value:
                if k not in sub:
                    raise ConfigError(f"unknown configuration key: {path}{key}.{k}")


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    seed: int = 0
    prompt_mode: str = "guideline"
    supervision: str = "supervised"
    paths: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        _check_keys(raw, _ALLOWED)
        if raw.get("schema", CONFIG_SCHEMA_TAG) != CONFIG_SCHEMA_TAG:
            raise ConfigError(f"unsupported config schema: {raw.get('schema')}")
        cfg = cls(
            raw=raw,
            base_dir=path.parent,
            seed=int(raw.get("seed", 0)),
            prompt_mode=raw.get("prompt_mode", "guideline"),
            supervision=raw.get("supervision", "supervised"),
            paths=raw.get("paths", {}),
        )
        if cfg.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"invalid prompt_mode: {cfg.prompt_mode}")
        if cfg.supervision not in ("supervised", "unsupervised"):
            raise ConfigError(f"invalid supervision: {cfg.supervision}")
        cfg._check_paths()
        return cfg

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def path(self, name: str) -> Optional[Path]:
        value = self.paths.get(name)
        return self._resolve(value) if value else None

    def _check_paths(self) -> None:
        for name in ("corpus", "image_cache", "taskset", "templates"):
            p = self.path(name)
            if p is not None and not p.exists():
                raise ConfigError(f"configured path does not exist: {name}={p}")
        for role, entry in self.raw.get("backends", {}).items():
            if entry.get("kind") in ("script", "rules"):
                p = self._resolve(entry.get("path", ""))
                if not p.is_file():
                    raise ConfigError(f"backend script not found: {role}={p}")

    def build_embedder(self):
        section = self.raw.get("embedding", {})
        kind = section.get("kind", "hashing")
        if kind == "hashing":
            return HashingEmbedder(dim=section.get("dim", 64), ngram=section.get("ngram", 3))
        if kind == "http":
            return HttpEmbedder(
                base_url=section["endpoint"],
                dim=section["dim"],
                api_key=os.environ.get(section.get("api_key_env", ""), ""),
                model=section.get("model", "default"),
            )
        raise ConfigError(f"unknown embedding kind: {kind}")

    def _build_backend(self, entry: dict) -> Gateway:
        kind = entry.get("kind", "script")
        limits = self.raw.get("limits", {})
        if kind == "http":
            handle = HttpBackend(
                base_url=entry["endpoint"],
                api_key=os.environ.get(entry.get("api_key_env", ""), ""),
                model=entry.get("model"),
                want_logprobs=entry.get("logprobs", False),
            )
        elif kind == "script":
            handle = ScriptedBackend.load(
                self._resolve(entry["path"]), strict=entry.get("strict", True)
            )
        elif kind == "rules":
            handle = RuleBackend.load(self._resolve(entry["path"]))
        else:
            raise ConfigError(f"unknown backend kind: {kind}")
        return Gateway(
            handle,
            retries=entry.get("retries", 3),
            backoff=entry.get("backoff", 0.5),
            model=entry.get("model", "default"),
            temperature=entry.get("temperature", 0.0),
            max_tokens=entry.get("max_tokens", limits.get("max_tokens", 1024)),
        )

    def build_backends(self) -> Backends:
        section = self.raw.get("backends")
        if not section:
            raise ConfigError("config must declare backends")
        gateways = {}
        for role in ("planner", "executor", "manager"):
            if role not in section:
                raise ConfigError(f"config must declare a {role} backend")
            gateways[role] = self._build_backend(section[role])
        return Backends(**gateways)

    def build_tools(self, embedder) -> ToolEnv:
        limits = self.raw.get("limits", {})
        corpus_path = self.path("corpus")
        index = CorpusIndex.load(corpus_path, embedder) if corpus_path else None
        cache_path = self.path("image_cache")
        cache = ImageCache.load(cache_path) if cache_path else ImageCache()
        live_search = None
        search = self.raw.get("search")
        if search and search.get("endpoint"):
            from .tools import HttpSearchClient

            live_search = HttpSearchClient(
                endpoint=search["endpoint"],
                api_key=os.environ.get(search.get("api_key_env", ""), ""),
            )
        return ToolEnv(
            index=index,
            image_cache=cache,
            embedder=embedder,
            top_k=limits.get("tool_top_k", 3),
            response_budget=limits.get("tool_response_budget", 4096),
            live_search=live_search,
        )

    def build_prompts(self) -> PromptLibrary:
        templates = self.path("templates")
        return PromptLibrary.from_dir(templates) if templates else PromptLibrary.default()

    def retrieval_config(self) -> RetrievalConfig:
        section = dict(self.raw.get("retrieval", {}))
        section.pop("replace_threshold", None)
        return RetrievalConfig(**section)

    def replace_threshold(self) -> float:
        return self.raw.get("retrieval", {}).get("replace_threshold", 0.90)

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(**self.raw.get("grpo", {}))

    def limits(self) -> Limits:
        section = self.raw.get("limits", {})
        return Limits(
            assistant_turns=section.get("assistant_turns", 10),
            user_turns=section.get("user_turns", 10),
        )

    def clear_policy(self) -> ClearPolicy:
        return ClearPolicy(**self.raw.get("clear_policy", {}))

    def categories(self) -> tuple:
        return tuple(self.raw.get("categories", DEFAULT_CATEGORIES))

    def episode_options(self, supervision: Optional[str] = None) -> EpisodeOptions:
        return EpisodeOptions(
            prompt_mode=self.prompt_mode,
            supervision=supervision or self.supervision,
            limits=self.limits(),
            retrieval=self.retrieval_config(),
            categories=self.categories(),
        )

    def ttl_config(self) -> TtlBatchConfig:
        section = self.raw.get("ttl", {})
        return TtlBatchConfig(
            group_size=section.get("group_size", 4),
            epochs=section.get("epochs", 1),
            mode=section.get("mode", self.supervision),
            router_examples=section.get("router_examples", 2),
            plan_temperature=section.get("plan_temperature", 0.7),
            length_metric=section.get("length_metric", "steps"),
            replace_threshold=self.replace_threshold(),
            clear_after_batch=section.get("clear_after_batch", False),
            limits=self.limits(),
            retrieval=self.retrieval_config(),
            export_metadata=self.export_metadata(),
            trainer_command=section.get("trainer_command"),
        )

    def export_metadata(self) -> dict:
        meta = {"learning_rate": 1e-6, "batch_size": 128}
        meta.update(self.raw.get("export_metadata", {}))
        return meta

    def load_store(self, embedder) -> MemoryStore:
        path = self.path("memory_store")
        if path is not None and path.is_file():
            return MemoryStore.load(path, embedder)
        return MemoryStore(embedder)

    def load_meta(self, embedder) -> MetaPlanStore:
        path = self.path("meta_store")
        if path is not None and path.is_file():
            return MetaPlanStore.load(path, embedder)
        return MetaPlanStore(embedder)

    def out_dir(self) -> Path:
        out = self.path("out_dir") or (self.base_dir / "out")
        out.mkdir(parents=True, exist_ok=True)
        return out


def load_taskset(path: str | Path) -> list[Task]:
    """Load tasks from a line-delimited record file; ids must be unique."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"taskset file not found: {path}")
    tasks = []
    seen: set[str] = set()
    for rec in read_jsonl(path):
        task_id = rec.get("id")
        if not task_id:
            raise ConfigError("taskset record missing id")
        if task_id in seen:
            raise ConfigError(f"duplicate task id: {task_id}")
        seen.add(task_id)
        image = None
        if rec.get("image"):
            from .gateway import ImageRef

            image_path = Path(rec["image"])
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            image = ImageRef(path=str(image_path))
        tasks.append(
            Task(
                task_id=task_id,
                question=rec["question"],
                image=image,
                gold=rec.get("gold"),
                category=rec.get("category"),
            )
        )
    return tasks
