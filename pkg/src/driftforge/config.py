"""TOML configuration files mapped onto the dataclass configs.

Sections: ``[data]`` (``path``, ``period_days``), ``[synth]``, ``[experiment]``,
``[gan]`` and ``[gan.arch]``. Keys mirror the dataclass field names; unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import DAY, SynthConfig
from .errors import DriftforgeError
from .gan import GanArch, GanTrainConfig
from .harness import ExperimentConfig


class ConfigError(DriftforgeError, ValueError):
    """Malformed or inconsistent configuration (a usage error)."""


@dataclass
class RunConfig:
    data_path: Path | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


def _build(cls, values: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def gan_from_dict(d: dict[str, Any]) -> GanTrainConfig:
    d = dict(d)
    arch = _build(GanArch, {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("arch", {}).items()},
                  "gan.arch")
    return _build(GanTrainConfig, {**d, "arch": arch}, "gan")


def run_config_from_dict(doc: dict[str, Any], base_dir: Path = Path(".")) -> RunConfig:
    unknown = sorted(set(doc) - {"data", "synth", "experiment", "gan"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    data = dict(doc.get("data", {}))
    period_days = data.pop("period_days", None)
    path = data.pop("path", None)
    if data:
        raise ConfigError(f"[data] unknown keys: {', '.join(sorted(data))}")
    synth = _build(SynthConfig, doc.get("synth", {}), "synth")
    exp = dict(doc.get("experiment", {}))
    if period_days is not None:
        if "period_length" in exp:
            raise ConfigError("give either data.period_days or experiment.period_length, not both")
        exp["period_length"] = int(round(float(period_days) * DAY))
    exp["gan"] = gan_from_dict(doc.get("gan", {}))
    experiment = _build(ExperimentConfig, exp, "experiment")
    data_path = None if path is None else (base_dir / path)
    return RunConfig(data_path, synth, experiment)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return run_config_from_dict(doc, path.parent)
