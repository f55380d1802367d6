"""Run configuration: flat ``key = value`` files merged over documented defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .episodes import SceneConfig, TaskConfig
from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "SEQCOUNT_SEED"


class ConfigError(ValueError):
    pass


def _parse_range(text: str) -> tuple:
    lo, sep, hi = text.partition("..")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise ConfigError(f"expected a range like 2..5, got {text!r}") from None


def _format_range(r) -> str:
    return f"{r[0]}..{r[1]}"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_widths(text: str) -> tuple:
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# key -> (section, field, parser, formatter)
_TASK_KEYS = {"ways": "ways", "shots": "shots", "counts": "counts"}
_SCENE_KEYS = {"image_size": "size", "r_min": "r_min", "r_max": "r_max",
               "max_objects": "max_objects", "noise_level": "noise_level"}


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs, with every key defaulted."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    @staticmethod
    def keys() -> list:
        out = [f.name for f in fields(TrainConfig)]
        out += [f.name for f in fields(ModelConfig) if f.name != "image_size"]
        out += list(_TASK_KEYS) + list(_SCENE_KEYS)
        return out

    def get(self, key: str):
        if key in _TASK_KEYS:
            return getattr(self.task, _TASK_KEYS[key])
        if key in _SCENE_KEYS:
            return getattr(self.task.scene, _SCENE_KEYS[key])
        if key in {f.name for f in fields(TrainConfig)}:
            return getattr(self.train, key)
        return getattr(self.model, key)

    def with_values(self, values: dict) -> "RunConfig":
        """Apply parsed string values; unknown keys raise ConfigError naming them."""
        train_kw, model_kw, task_kw, scene_kw = {}, {}, {}, {}
        train_names = {f.name for f in fields(TrainConfig)}
        model_names = {f.name for f in fields(ModelConfig)} - {"image_size"}
        for key, raw in values.items():
            if key in _TASK_KEYS:
                task_kw[_TASK_KEYS[key]] = _parse_range(raw)
            elif key in _SCENE_KEYS:
                target = _SCENE_KEYS[key]
                scene_kw[target] = float(raw) if target == "noise_level" else int(raw)
            elif key in train_names:
                default = getattr(self.train, key)
                train_kw[key] = _convert(key, raw, default)
            elif key in model_names:
                default = getattr(self.model, key)
                model_kw[key] = _parse_widths(raw) if key == "widths" else _convert(key, raw, default)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        scene = replace(self.task.scene, **scene_kw)
        try:
            task = replace(self.task, scene=scene, **task_kw)
            model = replace(self.model, image_size=scene.size, **model_kw)
            train = replace(self.train, **train_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return RunConfig(train, model, task)

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            value = self.get(key)
            if key in _TASK_KEYS:
                value = _format_range(value)
            elif key == "widths":
                value = ",".join(str(w) for w in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _convert(key, raw, default):
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def load_run_config(path=None, overrides: dict | None = None, environ=os.environ) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``, then SEQCOUNT_SEED."""
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = cfg.with_values(parse_config_text(fh.read(), str(path)))
    if overrides:
        cfg = cfg.with_values({k: str(v) for k, v in overrides.items()})
    if environ.get(SEED_ENV):
        cfg = cfg.with_values({"seed": environ[SEED_ENV]})
    return cfg


def task_config(ways=None, shots=None, base: TaskConfig = TaskConfig()) -> TaskConfig:
    kw = {}
    if ways is not None:
        kw["ways"] = _parse_range(ways) if isinstance(ways, str) else tuple(ways)
    if shots is not None:
        kw["shots"] = _parse_range(shots) if isinstance(shots, str) else tuple(shots)
    return replace(base, **kw)


__all__ = ["ConfigError", "RunConfig", "SEED_ENV", "SceneConfig", "load_run_config",
           "parse_config_text", "task_config"]
