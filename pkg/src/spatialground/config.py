"""Run configuration: defaults, then a JSON file, then command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .embed import DEFAULT_CANONICALS, DEFAULT_SYNONYMS, Vocabulary
from .ground import GroundConfig
from .relations import RelationConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration value; ``path`` is the dotted location of the offending field."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


def bench_train_config(**kw) -> TrainConfig:
    """Training settings used by the benchmark (finer grids and denser samples than the library defaults)."""
    base = dict(K=192, resolutions=(24, 48, 96), steps=2000)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class EvalConfig:
    tau_bin: float = 0.5
    min_eval_pixels: int = 20     # views where the target covers fewer pixels are not scored
    record_timing: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau_bin < 1.0:
            raise ValueError("tau_bin must lie in (0, 1)")
        if self.min_eval_pixels < 1:
            raise ValueError("min_eval_pixels must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    noise: float = 0.1
    opaque_min: float = 0.9
    vocab_seed: int = 0
    synonyms: dict = field(default_factory=lambda: dict(DEFAULT_SYNONYMS))
    canonicals: tuple = DEFAULT_CANONICALS
    train: TrainConfig = field(default_factory=bench_train_config)
    ground: GroundConfig = field(default_factory=GroundConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0.0 <= self.opaque_min <= 1.0:
            raise ValueError("opaque_min must lie in [0, 1]")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.canonicals = tuple(self.canonicals)
        if not self.canonicals:
            raise ValueError("at least one canonical phrase is required")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_seed, self.train.lang_dim, dict(self.synonyms))

    @property
    def train_config(self) -> TrainConfig:
        """Training settings with the run seed applied; the single seed drives every random draw."""
        return dataclasses.replace(self.train, seed=self.seed)

    def n_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        env = os.environ.get("SPATIAL_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError("SPATIAL_THREADS", f"not an integer: {env!r}") from None
            if n < 1:
                raise ConfigError("SPATIAL_THREADS", "must be >= 1")
            return n
        return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)

    def to_json(self) -> dict:
        return _dump(self)


def _dump(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_dump(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _dump(v) for k, v in sorted(obj.items())}
    return obj


_NESTED = {"train": TrainConfig, "ground": GroundConfig, "eval": EvalConfig, "relation": RelationConfig}


def _check_type(path: str, value, default):
    if default is None or isinstance(default, dict):
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(sub, "unknown field")
        if key in _NESTED and dataclasses.is_dataclass(getattr(proto, key)):
            kwargs[key] = value if dataclasses.is_dataclass(value) else _build(_NESTED[key], value, sub)
        else:
            kwargs[key] = _check_type(sub, value, getattr(proto, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(path or "<root>", str(e)) from None


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional JSON file and flag overrides (later wins); validate once at the end."""
    merged = RunConfig().to_json()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(str(path), f"cannot read config file ({e.strerror})") from None
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config file must hold a JSON object")
        merged = _deep_merge(merged, data)
    merged = _deep_merge(merged, overrides or {})
    cfg = _build(RunConfig, merged, "")
    if cfg.train.lang_dim <= 0:
        raise ConfigError("train.lang_dim", "must be positive")
    return cfg
