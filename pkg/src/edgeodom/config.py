"""Run configuration: flat key=value files with command-line overrides.

Every constant the algorithms leave open (thresholds, k, lambda, window size,
keyframe weights) lives here with its default; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .selection import SelectionConfig
from .tracking import TrackingConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    window_size: int = 7
    window_iterations: int = 6
    dataset: str = ""
    output: str = "trajectory.txt"
    keyframe_output: str = ""      # defaults to <output stem>_keyframes.txt
    diagnostics_output: str = ""   # defaults to <output stem>_diagnostics.csv
    seed: int = 0
    single_thread: bool = True
    use_selection: bool = True
    use_mapping: bool = True

    def resolved_keyframe_output(self) -> str:
        if self.keyframe_output:
            return self.keyframe_output
        p = Path(self.output)
        return str(p.with_name(p.stem + "_keyframes.txt"))

    def resolved_diagnostics_output(self) -> str:
        if self.diagnostics_output:
            return self.diagnostics_output
        p = Path(self.output)
        return str(p.with_name(p.stem + "_diagnostics.csv"))


# key -> (section attribute or None for top level, field name, type)
_SCHEMA = {}


def _register():
    for f in fields(TrackingConfig):
        _SCHEMA[f.name] = ("tracking", f.name)
    for f in fields(SelectionConfig):
        # seed and canny_high are derived from the top-level/tracking values
        # in load_config; registering them here would shadow those keys
        if f.name in _SCHEMA:
            continue
        name = "edges_k" if f.name == "k" else ("lambda" if f.name == "lam" else f.name)
        _SCHEMA[name] = ("selection", f.name)
    for f in fields(RunConfig):
        if f.name in ("tracking", "selection"):
            continue
        _SCHEMA[f.name] = (None, f.name)


_register()


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def set_key(config: RunConfig, key: str, value: str):
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key: {key!r}")
    section, name = _SCHEMA[key]
    target = config if section is None else getattr(config, section)
    current = getattr(target, name)
    setattr(target, name, _coerce(value, current))


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional file plus key=value overrides."""
    config = RunConfig()
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            set_key(config, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value: {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        set_key(config, key, value)
    # Seed is shared with selection unless set explicitly there.
    config.selection.seed = config.seed
    # The Canny high threshold doubles as the re-observation sigmoid midpoint.
    config.selection.canny_high = config.tracking.canny_high
    return config
