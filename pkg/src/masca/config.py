"""Run configuration: one JSON file plus command-line overrides (flags win)."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from masca.orchestrator import TOPOLOGIES

DEFAULTS: dict[str, Any] = {
    "dataset": {"path": None, "format": "jsonl"},
    "schema": None,
    "catalog": None,
    "bucket_table": None,
    "topology": "hierarchical3",
    "model_map": {"*": "gpt-4o", "decision_orchestrator": "o3-mini"},
    "backend": {"kind": "scripted", "script": None},
    "thresholds": {"tau": 1.0, "p_star": 0.5, "prior": 0.3, "belief_weights": {}, "rr_weights": {}},
    "concurrency": {"workers": 4, "layer_workers": 4},
    "temperature": 0.0,
    "max_tokens": 2048,
    "cache": True,
    "scenario": None,
    "output_dir": "runs",
    "seed": "0",
}

PATH_KEYS = (("dataset", "path"), ("schema",), ("catalog",), ("bucket_table",), ("backend", "script"), ("scenario",))


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


def _merge(base: dict[str, Any], over: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "model_map":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _get(d: dict[str, Any], path: tuple[str, ...]) -> Any:
    for k in path:
        if not isinstance(d, dict):
            return None
        d = d.get(k)
    return d


def _set(d: dict[str, Any], path: tuple[str, ...], value: Any) -> None:
    for k in path[:-1]:
        d = d.setdefault(k, {})
    d[path[-1]] = value


@dataclass
class RunConfig:
    data: dict[str, Any]
    source: Path | None = None
    overrides: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[tuple[str, ...], Any] | None = None) -> RunConfig:
        data = copy.deepcopy(DEFAULTS)
        source = None
        if path is not None:
            source = Path(path)
            try:
                raw = json.loads(source.read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError([f"cannot read config file {source}: {exc}"]) from exc
            except json.JSONDecodeError as exc:
                raise ConfigError([f"config file {source} is not valid JSON: {exc}"]) from exc
            data = _merge(data, raw)
            for key in PATH_KEYS:
                v = _get(data, key)
                if isinstance(v, str) and not Path(v).is_absolute():
                    _set(data, key, str(source.parent / v))
        applied = []
        for key, value in (overrides or {}).items():
            if value is not None:
                _set(data, key, value)
                applied.append(".".join(key))
        return cls(data, source, applied)

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def validate(self) -> None:
        """Raise ConfigError listing every problem found."""
        d, problems = self.data, []
        ds = d.get("dataset") or {}
        if not ds.get("path"):
            problems.append("dataset.path is required")
        elif not Path(ds["path"]).is_file():
            problems.append(f"dataset.path does not exist: {ds['path']}")
        if ds.get("format") not in ("jsonl", "statlog"):
            problems.append(f"dataset.format must be jsonl or statlog, got {ds.get('format')!r}")
        for key in ("schema", "catalog", "bucket_table", "scenario"):
            if d.get(key) and not Path(d[key]).is_file():
                problems.append(f"{key} file does not exist: {d[key]}")
        if d.get("topology") not in TOPOLOGIES:
            problems.append(f"topology must be one of {', '.join(TOPOLOGIES)}, got {d.get('topology')!r}")
        if not isinstance(d.get("model_map"), dict) or not all(isinstance(v, str) and v for v in d["model_map"].values()):
            problems.append("model_map must map roles to non-empty model ids")
        be = d.get("backend") or {}
        if be.get("kind") == "scripted":
            if not be.get("script"):
                problems.append("backend.script is required for the scripted backend")
            elif not Path(be["script"]).is_file():
                problems.append(f"backend.script does not exist: {be['script']}")
        elif be.get("kind") == "live":
            if not str(be.get("endpoint", "")).startswith(("http://", "https://")):
                problems.append("backend.endpoint must be an http(s) URL for the live backend")
            if be.get("timeout", 120) <= 0:
                problems.append("backend.timeout must be positive")
        else:
            problems.append(f"backend.kind must be scripted or live, got {be.get('kind')!r}")
        th = d.get("thresholds") or {}
        if not (isinstance(th.get("tau"), (int, float)) and th["tau"] > 0):
            problems.append("thresholds.tau must be a positive number")
        if not (isinstance(th.get("p_star"), (int, float)) and 0 < th["p_star"] < 1):
            problems.append("thresholds.p_star must lie in (0, 1)")
        if not (isinstance(th.get("prior"), (int, float)) and 0 < th["prior"] < 1):
            problems.append("thresholds.prior must lie in (0, 1)")
        for wkey in ("belief_weights", "rr_weights"):
            for k, v in (th.get(wkey) or {}).items():
                if not (isinstance(v, (int, float)) and v >= 0):
                    problems.append(f"thresholds.{wkey}.{k} must be a non-negative number")
        cc = d.get("concurrency") or {}
        for k in ("workers", "layer_workers"):
            if not (isinstance(cc.get(k), int) and cc[k] >= 1):
                problems.append(f"concurrency.{k} must be a positive integer")
        if not (isinstance(d.get("temperature"), (int, float)) and 0 <= d["temperature"] <= 2):
            problems.append("temperature must lie in [0, 2]")
        if not (isinstance(d.get("max_tokens"), int) and d["max_tokens"] > 0):
            problems.append("max_tokens must be a positive integer")
        if problems:
            raise ConfigError(problems)

    def echo(self) -> dict[str, Any]:
        return copy.deepcopy(self.data)
