"""Run configuration: a validated JSON document with task and train sections.

Every key can be overridden by a command-line flag; the effective merged
config is echoed verbatim into the run's output directory.
"""

from __future__ import annotations

import dataclasses
import json

from .errors import ConfigError
from .tasks import TaskSpec
from .training import TrainConfig

SECTIONS = ("task", "train")


def _coerce_section(cls, section, name):
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = set(cls.__dataclass_fields__)
    extra = set(section) - known
    if extra:
        raise ConfigError(f"config section {name!r}: unknown keys {sorted(extra)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config section {name!r}: {e}") from e


def load_run_config(path, overrides=None):
    """Load {task, train} config from JSON, applying flag overrides.

    `overrides` maps "section.key" to a value (already typed).
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: not found") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    extra = set(doc) - set(SECTIONS)
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    merged = {s: dict(doc.get(s, {})) for s in SECTIONS}
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"override {dotted!r}: unknown section")
        merged[section][key] = value
    task = _coerce_section(TaskSpec, merged["task"], "task")
    train = _coerce_section(TrainConfig, merged["train"], "train").validate()
    return task, train


def echo_config(path, task, train):
    """Write the effective post-override config next to the run outputs."""
    with open(path, "w") as fh:
        json.dump({"task": dataclasses.asdict(task), "train": dataclasses.asdict(train)},
                  fh, indent=1, sort_keys=True)
