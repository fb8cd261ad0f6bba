"""
Per-command settings: built-in defaults, then an INI file, then flags.

Each command reads its own section (``[analyze]``, ``[gen]``, ``[train]``,
``[eval]``, ``[repro]``).  List settings are comma-separated and numeric
ranges may be written ``start:stop:step`` (stop included), so
``sigma = 0.1:2.0:0.1`` is twenty values.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import os
import pathlib
import typing
from typing import Any, ClassVar, Optional, Union

import apischema

from .analysis import InputDistribution, WeightsMode
from .attention import Variant
from .tasks import Task
from .training import OptimizerKind
from .util import atomic_write_text

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved.ini"
ANALYZE_KINDS = ("lemma1", "lemma2", "snr", "gamma", "mha")
FIGURES = ("fig1", "fig2")
PROFILES = ("fast", "full")
DEFAULT_WEIGHTS_MODES = {
    "lemma1": tuple(WeightsMode),
    "lemma2": tuple(WeightsMode),
    "snr": (WeightsMode.UNIFORM, ),
    "gamma": (WeightsMode.PEAKED, ),
    "mha": (WeightsMode.UNIFORM, ),
}


class UsageError(ValueError):
    ...


def _positive(settings, *names: str) -> None:
    for name in names:
        value = getattr(settings, name)
        values = value if isinstance(value, list) else [value]
        for item in values:
            if item < 1:
                raise ValueError(f"{name} must be at least 1, got {item}")


def _choice(settings, name: str, choices) -> None:
    value = getattr(settings, name)
    if value not in choices:
        raise ValueError(f"{name}={value!r}; choose one of: {', '.join(choices)}")


@dataclasses.dataclass
class AnalyzeSettings:
    section: ClassVar[str] = "analyze"
    kind: str = "lemma2"
    d: list[int] = dataclasses.field(default_factory=lambda: [64])
    n: list[int] = dataclasses.field(default_factory=lambda: [16])
    sigma: list[float] = dataclasses.field(default_factory=lambda: [1.0])
    trials: int = 100_000
    seed: int = 0
    # Empty means the kind's default; see DEFAULT_WEIGHTS_MODES.
    weights_mode: list[WeightsMode] = dataclasses.field(default_factory=list)
    heads: list[int] = dataclasses.field(default_factory=lambda: [1])
    mean_shift_sq: list[float] = dataclasses.field(default_factory=lambda: [0.0])
    signal_mean_sq: float = 64.0
    input_distribution: InputDistribution = InputDistribution.GAUSSIAN

    def __post_init__(self):
        _choice(self, "kind", ANALYZE_KINDS)
        _positive(self, "d", "n", "trials", "heads")
        if not self.weights_mode:
            self.weights_mode = list(DEFAULT_WEIGHTS_MODES[self.kind])
        if self.kind in ("snr", "gamma") and len(self.weights_mode) != 1:
            raise ValueError(f"analyze {self.kind} takes exactly one weights_mode")
        if any(sigma < 0 for sigma in self.sigma):
            raise ValueError(f"sigma values must be nonnegative, got {self.sigma}")
        if any(shift < 0 for shift in self.mean_shift_sq):
            raise ValueError(f"mean_shift_sq values must be nonnegative, got {self.mean_shift_sq}")


@dataclasses.dataclass
class GenSettings:
    section: ClassVar[str] = "gen"
    task: Task = Task.SORTING
    n_train: int = 1000
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        _positive(self, "n_train", "n_test")


@dataclasses.dataclass
class TrainSettings:
    section: ClassVar[str] = "train"
    variant: Variant = Variant.INDIRECT
    task: Task = Task.SORTING
    data: str = ""
    profile: str = "fast"
    n_layers: Optional[int] = None
    n_heads: Optional[int] = None
    d_model: Optional[int] = None
    optimizer: OptimizerKind = OptimizerKind.ADAM
    lr: float = 3e-4
    epochs: Optional[int] = None
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _choice(self, "profile", PROFILES)
        if self.variant is Variant.STANDARD:
            raise ValueError("variant must be one of: indirect, naive_misaligned, cross")
        if self.epochs is not None:
            _positive(self, "epochs")
        _positive(self, "batch_size")
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")


@dataclasses.dataclass
class EvalSettings:
    section: ClassVar[str] = "eval"
    checkpoint: str = ""
    data: str = ""
    bias_maps: bool = False


@dataclasses.dataclass
class ReproSettings:
    section: ClassVar[str] = "repro"
    figure: str = "fig1"
    seed: int = 0
    trials: int = 100_000
    profile: str = "fast"
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2])
    epochs: Optional[int] = None

    def __post_init__(self):
        _choice(self, "figure", FIGURES)
        _choice(self, "profile", PROFILES)
        _positive(self, "trials")
        if not self.seeds:
            raise ValueError("seeds must name at least one seed")
        if self.epochs is not None:
            _positive(self, "epochs")


Settings = Union[AnalyzeSettings, GenSettings, TrainSettings, EvalSettings, ReproSettings]


def parse_range(text: str) -> list[float]:
    """``"0.1:0.3:0.1"`` -> ``[0.1, 0.2, 0.3]``; integers stay integers."""
    try:
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError:
        raise UsageError(f"Range {text!r} is not start:stop:step") from None
    if step <= 0 or stop < start:
        raise UsageError(f"Range {text!r} needs a positive step and stop >= start")
    count = int(round((stop - start) / step)) + 1
    values = [round(start + index * step, 12) for index in range(count)]
    if all(value.is_integer() for value in (start, stop, step)):
        return [int(value) for value in values]
    return values


def split_list(text: str) -> list[Any]:
    items: list[Any] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        items.extend(parse_range(item) if ":" in item else [item])
    return items


def _field_kinds(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _normalize(cls, raw: dict[str, Any]) -> dict[str, Any]:
    """Turn INI/flag strings into the shapes apischema expects."""
    hints = _field_kinds(cls)
    data: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in hints or key == "section":
            raise UsageError(f"Unknown setting {key!r} for [{cls.section}]")
        hint = hints[key]
        if isinstance(value, str):
            if typing.get_origin(hint) is list:
                value = split_list(value)
            elif hint is bool:
                try:
                    value = configparser.ConfigParser.BOOLEAN_STATES[value.lower()]
                except KeyError:
                    raise UsageError(f"{key}={value!r} is not a boolean") from None
            elif value == "" and type(None) in typing.get_args(hint):
                value = None
        data[key] = value
    return data


def read_section(path: Union[str, os.PathLike], section: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    path = pathlib.Path(path)
    if not parser.read(path, encoding="utf-8"):
        raise UsageError(f"Config file {path} could not be read")
    if not parser.has_section(section):
        logger.warning("Config file %s has no [%s] section", path, section)
        return {}
    return dict(parser.items(section))


def resolve(
    cls: type,
    config_path: Optional[Union[str, os.PathLike]] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> Settings:
    """
    Merge defaults, the config file section and flag overrides (in that order).

    Raises
    ------
    UsageError
        For unknown keys, unparsable values or settings out of range.
    """
    raw: dict[str, Any] = {}
    if config_path is not None:
        raw.update(read_section(config_path, cls.section))
    raw.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        return apischema.deserialize(cls, _normalize(cls, raw), coerce=True)
    except apischema.ValidationError as ex:
        raise UsageError(f"Invalid [{cls.section}] settings: {ex}") from None
    except ValueError as ex:
        if isinstance(ex, UsageError):
            raise
        raise UsageError(f"Invalid [{cls.section}] settings: {ex}") from None


def _ini_value(value: Any) -> str:
    if isinstance(value, list):
        return ",".join(_ini_value(item) for item in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def dumps(settings: Settings) -> str:
    serialized = apischema.serialize(type(settings), settings)
    parser = configparser.ConfigParser(interpolation=None)
    parser[settings.section] = {
        key: _ini_value(value) for key, value in serialized.items()
    }
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def write_resolved(settings: Settings, output_dir: pathlib.Path) -> pathlib.Path:
    """Record the settings a run used; ``--config`` on this file reproduces it."""
    return atomic_write_text(output_dir / RESOLVED_CONFIG, dumps(settings))
