"""Run configuration: one file (YAML or JSON), overridden by CLI flags."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from tapret.backend import Backend, create_backend
from tapret.errors import ConfigError
from tapret.prompts import PROMPT_LADDER, PromptFlags

DEFAULT_ABLATION = {
    "tap": ["mlp@L", "attn@L", "mlp@L-1", "mlp@L-2"],
    "prompt": ["a", "b", "c", "d"],
    "framing": ["right_wrong", "yes_no", "true_false", "mcq"],
    "M": [1, 2, 4, 8],
}


@dataclass
class RunConfig:
    backend: str = "toy"
    backend_params: dict = field(default_factory=dict)
    tap: str = "attn@L"
    flags: str = "all"
    task_hint: str | None = None
    framing: str = "mcq"
    reranker: str = "model"  # model | oracle | embedding
    K: int = 10
    M: int = 5
    seed: int = 1729
    jobs: int = 1
    fusion_weight: float = 0.0
    max_new_tokens: int = 32
    grid: list[str] = field(default_factory=list)
    ablation: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_ABLATION.items()})
    paths: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.K < 1 or not 1 <= self.M <= self.K:
            raise ConfigError(f"need 1 <= M <= K, got M={self.M}, K={self.K}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.reranker not in ("model", "oracle", "embedding"):
            raise ConfigError(f"unknown reranker {self.reranker!r}")
        try:
            self.prompt_flags()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.grid) - set(DEFAULT_ABLATION)
        if unknown:
            raise ConfigError(f"unknown ablation axes {sorted(unknown)}")
        for axis in self.grid:
            if not self.ablation.get(axis):
                raise ConfigError(f"ablation axis {axis!r} has no values")
        return self

    def prompt_flags(self) -> PromptFlags:
        if self.flags in PROMPT_LADDER:
            return PROMPT_LADDER[self.flags]
        return PromptFlags.parse(self.flags)

    def resolved_backend_params(self) -> dict:
        params = dict(self.backend_params)
        if self.backend == "toy":
            params.setdefault("seed", self.seed)
        return params

    def make_backend(self) -> Backend:
        try:
            return create_backend(self.backend, **self.resolved_backend_params())
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot build backend {self.backend!r}: {exc}") from exc

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["backend_params"] = self.resolved_backend_params()
        return d


def _coerce(value: str) -> Any:
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def parse_kv(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = _coerce(value.strip())
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        data = json.loads(text) if p.suffix == ".json" else (yaml.safe_load(text) or {})
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "backend_params":
            cfg.backend_params = {**cfg.backend_params, **value}
        elif key == "paths":
            cfg.paths = {**cfg.paths, **value}
        else:
            setattr(cfg, key, value)
    if "ablation" in data:
        cfg.ablation = {**{k: list(v) for k, v in DEFAULT_ABLATION.items()}, **data["ablation"]}
    return cfg.validate()
