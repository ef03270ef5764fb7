"""Flat key-value config files: `dotted.key = value` lines, # comments.

Values parse as int, then float, then bool, then bare string. Keys prefixed
`loss.` map onto LossWeights fields; `schedule.` onto WindowSchedule fields;
anything else is returned for the caller to interpret.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .losses import LossWeights
from .optim import WindowSchedule


class ConfigError(ValueError):
    """Malformed config line or unknown key."""


def _parse_value(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        try:
            return [float(t) for t in text.split(",")]
        except ValueError:
            pass
    return text


def parse_config(path) -> dict:
    out: dict = {}
    path = Path(path)
    for lineno, raw in enumerate(open(path), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = _parse_value(val)
    return out


def apply_config(cfg: dict, weights: LossWeights | None = None,
                 schedule: WindowSchedule | None = None) -> dict:
    """Apply loss.* / schedule.* keys; return the unconsumed remainder."""
    rest = {}
    for key, val in cfg.items():
        if key.startswith("loss.") and weights is not None:
            name = key[5:]
            if not hasattr(weights, name):
                raise ConfigError(f"unknown loss key {name!r}")
            if name == "gravity":
                val = np.asarray(val, dtype=float)
            setattr(weights, name, val)
        elif key.startswith("schedule.") and schedule is not None:
            name = key[9:]
            if not hasattr(schedule, name):
                raise ConfigError(f"unknown schedule key {name!r}")
            setattr(schedule, name, int(val))
        else:
            rest[key] = val
    return rest
