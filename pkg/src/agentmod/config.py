"""Run configuration: flat TOML keys merged under command-line flags."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# keys that change how fast a run goes, never what it produces
_RUNTIME_ONLY = frozenset({"parallelism"})


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    teacher_backend: str | None = None
    student_backend: str | None = None
    tool_backend: str | None = None
    ocr_backend: str | None = None
    captioner_backend: str | None = None
    detector_backend: str | None = None
    model: str = "default"
    cache_dir: str | None = None
    blob_dir: str | None = None
    seed: int = 0
    temperature: float = 0.1
    top_p: float = 0.3
    max_new_tokens: int = 512
    teacher_temperature: float = 1.0
    teacher_top_p: float = 1.0
    teacher_max_new_tokens: int = 1024
    k: int = 10
    simple_threshold: float = 0.8
    min_confidence: float = 0.3
    tool_policy: str = "strict"
    reward_weights: list[float] = field(default_factory=lambda: [4.0, 1.0])
    parallelism: int = 1
    max_tool_turns: int = 3
    retries: int = 3
    timeout: float = 120.0

    def digest(self) -> str:
        data = {k: v for k, v in asdict(self).items() if k not in _RUNTIME_ONLY}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def provenance(self) -> dict[str, Any]:
        return {"config_digest": self.digest(), "seed": self.seed}

    def check_paths(self) -> None:
        for name in ("teacher_backend", "student_backend", "tool_backend", "ocr_backend", "captioner_backend", "detector_backend"):
            value = getattr(self, name)
            if value and value.startswith("fixture:") and not Path(value[len("fixture:"):]).is_file():
                raise ConfigError(f"{name}: fixture file {value[len('fixture:'):]!r} not found")
        if self.blob_dir and not Path(self.blob_dir).is_dir():
            raise ConfigError(f"blob_dir {self.blob_dir!r} is not a directory")
        if len(self.reward_weights) != 2 or any(w < 0 for w in self.reward_weights):
            raise ConfigError("reward_weights must be two non-negative numbers")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a TOML file (if given) and apply non-None ``overrides`` on top."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with Path(path).open("rb") as f:
                values.update(tomllib.load(f))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None and key in known:
            values[key] = value
    config = RunConfig(**values)
    config.check_paths()
    return config
