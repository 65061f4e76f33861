"""Application configuration: a TOML file with [search], [run], [paths] and
one [backends.<role>] table per model role.

String values may interpolate environment variables as ${VAR}. Unknown keys
anywhere are rejected. Secrets never live in the file: live backends name the
environment variable holding their API key via api_key_env.
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backends import (
    BackendSet,
    NliJudgeBackend,
    OpenAIChatBackend,
    OpenAICompletionsBackend,
    ScriptedBackend,
    _HttpTransport,
)
from .errors import ConfigError
from .mcts import SearchConfig
from .protocol import DATASET_TAGS

_ENV_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

BACKEND_ROLES = ("policy", "reflector", "scorer_policy", "scorer_reference", "judge")

_SEARCH_KEYS = {
    "uct_weight", "max_children", "max_depth", "max_iterations", "max_reflections",
    "retrieval_k", "disable_reflection", "disable_rg", "disable_ra", "disable_search",
    "rg_clip",
}
_RUN_KEYS = {"dataset_tag", "workers", "seed", "log_level"}
_PATH_KEYS = {"corpus", "index", "dataset", "templates", "report_dir"}
_BACKEND_KEYS = {
    "kind", "rules", "alias", "base_url", "model", "api_key_env", "route",
    "timeout_s", "max_concurrency", "true_token", "false_token", "premise_budget",
}


@dataclass
class BackendSpec:
    role: str
    kind: str = "scripted"
    rules: Optional[str] = None
    alias: Optional[str] = None
    base_url: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = None
    route: str = "chat"
    timeout_s: float = 120.0
    max_concurrency: int = 4
    true_token: str = "1"
    false_token: str = "0"
    premise_budget: Optional[int] = None


@dataclass
class AppConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    backends: dict[str, BackendSpec] = field(default_factory=dict)
    dataset_tag: str = "asqa"
    workers: int = 1
    seed: Optional[int] = None
    log_level: str = "INFO"
    corpus_path: Optional[str] = None
    index_path: Optional[str] = None
    dataset_path: Optional[str] = None
    templates_dir: Optional[str] = None
    report_dir: str = "reports"
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, value: Optional[str]) -> Optional[Path]:
        if not value:
            return None
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def premise_budget(self) -> Optional[int]:
        judge = self.backends.get("judge")
        return judge.premise_budget if judge else None


def _interpolate(value):
    if isinstance(value, str):
        def repl(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} referenced in config but not set")
            return os.environ[name]

        return _ENV_VAR.sub(repl, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    raw = _interpolate(raw)
    _check_keys(raw, {"search", "run", "paths", "backends"}, "top level")

    search_table = raw.get("search", {})
    _check_keys(search_table, _SEARCH_KEYS, "search")
    try:
        search = SearchConfig(**search_table)
    except TypeError as exc:
        raise ConfigError(f"[search]: {exc}") from exc

    run_table = raw.get("run", {})
    _check_keys(run_table, _RUN_KEYS, "run")
    dataset_tag = run_table.get("dataset_tag", "asqa")
    if dataset_tag not in DATASET_TAGS:
        raise ConfigError(f"dataset_tag must be one of {DATASET_TAGS}, got {dataset_tag!r}")

    paths_table = raw.get("paths", {})
    _check_keys(paths_table, _PATH_KEYS, "paths")

    backend_tables = raw.get("backends", {})
    _check_keys(backend_tables, set(BACKEND_ROLES), "backends")
    backends: dict[str, BackendSpec] = {}
    for role, table in backend_tables.items():
        _check_keys(table, _BACKEND_KEYS, f"backends.{role}")
        try:
            backends[role] = BackendSpec(role=role, **table)
        except TypeError as exc:
            raise ConfigError(f"[backends.{role}]: {exc}") from exc

    try:
        workers = int(run_table.get("workers", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[run] workers must be an integer: {exc}") from exc

    return AppConfig(
        search=search,
        backends=backends,
        dataset_tag=dataset_tag,
        workers=workers,
        seed=run_table.get("seed"),
        log_level=str(run_table.get("log_level", "INFO")),
        corpus_path=paths_table.get("corpus"),
        index_path=paths_table.get("index"),
        dataset_path=paths_table.get("dataset"),
        templates_dir=paths_table.get("templates"),
        report_dir=paths_table.get("report_dir", "reports"),
        base_dir=path.parent.resolve(),
    )


def _build_one(spec: BackendSpec, config: AppConfig):
    if spec.kind == "scripted":
        if not spec.rules:
            raise ConfigError(f"backends.{spec.role}: scripted backend needs a rules file")
        return ScriptedBackend.from_json(config.resolve(spec.rules))
    if spec.kind != "openai":
        raise ConfigError(f"backends.{spec.role}: unknown kind {spec.kind!r}")
    if not spec.base_url or not spec.model:
        raise ConfigError(f"backends.{spec.role}: openai backend needs base_url and model")
    api_key = None
    if spec.api_key_env:
        api_key = os.environ.get(spec.api_key_env)
        if api_key is None:
            raise ConfigError(
                f"backends.{spec.role}: api_key_env {spec.api_key_env!r} is not set"
            )
    transport = _HttpTransport(
        base_url=spec.base_url,
        model=spec.model,
        api_key=api_key,
        timeout_s=spec.timeout_s,
        max_concurrency=spec.max_concurrency,
    )
    if spec.route == "chat":
        return OpenAIChatBackend(transport)
    if spec.route == "completions":
        return OpenAICompletionsBackend(transport)
    if spec.route == "judge":
        return NliJudgeBackend(
            OpenAIChatBackend(transport),
            true_token=spec.true_token,
            false_token=spec.false_token,
        )
    raise ConfigError(f"backends.{spec.role}: unknown route {spec.route!r}")


def build_backends(config: AppConfig) -> BackendSet:
    """Instantiate the five roles, resolving aliases after concrete backends."""
    required = set(BACKEND_ROLES)
    missing = required - set(config.backends) - {"reflector"}
    if missing:
        raise ConfigError(f"missing backend config for role(s): {', '.join(sorted(missing))}")
    built: dict[str, object] = {}
    aliases: dict[str, str] = {}
    for role, spec in config.backends.items():
        if spec.alias:
            aliases[role] = spec.alias
        else:
            built[role] = _build_one(spec, config)
    if "reflector" not in config.backends:
        aliases["reflector"] = "policy"
    for role, target in aliases.items():
        if target not in built:
            raise ConfigError(f"backends.{role}: alias target {target!r} is not a concrete backend")
        built[role] = built[target]
    return BackendSet(
        policy=built["policy"],
        reflector=built["reflector"],
        scorer_policy=built["scorer_policy"],
        scorer_reference=built["scorer_reference"],
        judge=built["judge"],
    )
