"""Run configuration: one strict JSON file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .augment import JitterPolicy
from .fitting import FitConfig


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int | None = None  # None: FACEJITTER_WORKERS or the CPU count
    log_level: str = "WARNING"
    fit: FitConfig = field(default_factory=FitConfig)
    jitter: JitterPolicy = field(default_factory=JitterPolicy)

    def __post_init__(self):
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"unknown log level {self.log_level!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
        kw = dict(data)
        if "fit" in kw:
            kw["fit"] = _build(FitConfig, kw["fit"], "config.fit")
        if "jitter" in kw:
            kw["jitter"] = _build(JitterPolicy, kw["jitter"], "config.jitter")
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def override(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> dict:
        return {"seed": self.seed, "workers": self.workers, "log_level": self.log_level,
                "fit": dataclasses.asdict(self.fit), "jitter": self.jitter.to_dict()}

    def digest(self) -> str:
        """Hash of everything that affects outputs (the worker count does not)."""
        d = self.to_dict()
        d.pop("workers")
        d.pop("log_level")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
