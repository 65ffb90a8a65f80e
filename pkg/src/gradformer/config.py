"""Line-oriented ``key = value`` configuration files.

One file may carry both model and training keys; ``seed`` feeds both.
Blank lines and ``#`` comments are ignored, lists are comma-separated, and
an optional leading ``preset = tiny|default`` selects the base values.
"""

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .model import PRESETS, ModelConfig
from .training import TrainConfig

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
# desk-scale runs are short, so the tiny preset trains with a larger step
TRAIN_PRESETS = {"default": TrainConfig, "tiny": lambda: TrainConfig(lr0=1e-3)}
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_value(name, default, raw):
    if isinstance(default, bool):
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {raw!r}") from None
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(s) for s in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text, base="default"):
    """Parse config text into ``(ModelConfig, TrainConfig)``."""
    model_cfg, train_base = PRESETS[base](), TRAIN_PRESETS[base]()
    model_changes, train_changes = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}")
            model_cfg, train_base = PRESETS[raw](), TRAIN_PRESETS[raw]()
            continue
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _MODEL_KEYS:
                model_changes[key] = _parse_value(key, getattr(model_cfg, key), raw)
            if key in _TRAIN_KEYS:
                train_changes[key] = _parse_value(key, getattr(train_base, key), raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    model_cfg = model_cfg.replace(**model_changes)
    train_cfg = train_base.replace(**train_changes)
    problems = model_cfg.violations() + train_cfg.violations()
    if problems:
        raise ConfigError("; ".join(problems))
    return model_cfg, train_cfg


def load_config(source):
    """``source`` is a preset name (``default``/``tiny``) or a config file path."""
    if source in PRESETS:
        return PRESETS[source](), TRAIN_PRESETS[source]()
    return parse_config(Path(source).read_text(encoding="utf-8"))


def format_config(model_cfg, train_cfg=None):
    """Serialize back to the same syntax; ``parse_config`` inverts it."""
    lines = []
    for cfg in (model_cfg, train_cfg):
        if cfg is None:
            continue
        for f in fields(cfg):
            if cfg is train_cfg and f.name == "seed":
                continue
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
