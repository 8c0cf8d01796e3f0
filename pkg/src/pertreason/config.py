"""Run configuration: an INI key/value file with typed defaults.

Settings that change results feed ``config_hash``; purely operational
settings (worker counts, in-flight caps, timeouts, credentials) do not, so a
run may be resumed or repeated with different parallelism.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "seed_policy": "per-run", "workers": 1},
    "gateway": {
        "backend": "oracle",
        "model": "default",
        "base_url": "http://localhost:8000/v1",
        "api_key_env": "OPENAI_API_KEY",
        "temperature": 0.7,
        "max_tokens": 1024,
        "timeout": 60.0,
        "max_in_flight": 8,
        "script": "",
    },
    "oracle": {
        "base_accuracy_easy": 0.9,
        "base_accuracy_hard": 0.55,
        "context_boost": 0.2,
        "hard_fraction": 0.5,
        "related_min_score": 0.4,
        "judge_problem_rate": 0.0,
        "malformed_rate": 0.0,
    },
    "knowledge": {
        "snapshot": "",
        "moa_targets": "",
        "live": False,
        "live_url": "https://string-db.org/api",
        "species": 9606,
        "timeout": 10.0,
        "aggregate": "max",
        "strict": False,
    },
    "scheduler": {"trials": 5},
    "ensemble": {"k_samples": 5, "max_retries": 3, "expert_attempts": 2, "fourth_judge": True},
    "engine": {"history_cap": 5, "summary_cap": 600, "verified_only": True},
    "benchmark": {"threshold": 0.7, "per_direction": 10, "min_consistent": 40, "test_fraction": 0.25},
    "evaluate": {"mode": "pooled", "accepted_only": False},
}

OPERATIONAL = {
    ("run", "workers"),
    ("gateway", "max_in_flight"),
    ("gateway", "timeout"),
    ("gateway", "api_key_env"),
    ("knowledge", "timeout"),
}

PATH_KEYS = {("gateway", "script"), ("knowledge", "snapshot"), ("knowledge", "moa_targets")}


class ConfigError(ValueError):
    pass


def _coerce(default: Any, raw: str, where: str) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw.strip()


class Config:
    def __init__(self, values: dict[str, dict[str, Any]] | None = None, base_dir: Path | None = None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        self.base_dir = base_dir or Path.cwd()
        for section, kv in (values or {}).items():
            for key, val in kv.items():
                self.set(section, key, val)

    @classmethod
    def load(cls, path: Path | None) -> "Config":
        if path is None:
            return cls()
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls(base_dir=Path(path).resolve().parent)
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting {section}.{key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(default, value, f"{section}.{key}")
        self.values[section][key] = value

    def override(self, dotted: str) -> None:
        """Apply ``section.key=value``."""
        name, sep, value = dotted.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {dotted!r}")
        self.set(section, key, value)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def path(self, section: str, key: str) -> Path | None:
        raw = self.get(section, key)
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else (self.base_dir / p)

    def semantic(self) -> dict[str, dict[str, Any]]:
        out: dict[str, dict[str, Any]] = {}
        for section, kv in self.values.items():
            for key, val in kv.items():
                if (section, key) in OPERATIONAL or (section, key) in PATH_KEYS:
                    continue
                out.setdefault(section, {})[key] = val
        return out

    def hash(self) -> str:
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> dict[str, dict[str, Any]]:
        return {s: dict(kv) for s, kv in self.values.items()}
