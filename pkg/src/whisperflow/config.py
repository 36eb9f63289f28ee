"""YAML experiment configuration with strict key checking.

The document mirrors :class:`ExperimentConfig`: every section maps onto a
frozen dataclass and every key onto one of its fields. Unknown keys and
values of the wrong type are rejected with the dotted path of the offender.
Omitted keys keep their defaults, so an empty document is a valid config.
"""
from __future__ import annotations

import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codec import CodecConfig
from .experiments import ConversionCriteria, FlowSettings, MisalignmentConfig
from .studies import DeltaTargetConfig, TransportConfig
from .whisperize import WhisperizeConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSettings:
    count: int = 50
    train: int = 40
    sample_rate: int = 16000

    def __post_init__(self):
        if not 0 < self.train < self.count:
            raise ValueError("need 0 < train < count")


@dataclass(frozen=True)
class SamplerSettings:
    steps: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be at least 1")


@dataclass(frozen=True)
class LayerSelectSettings:
    frame_level_cca: bool = False
    allow_degenerate: bool = False


@dataclass(frozen=True)
class OracleSettings:
    delta: DeltaTargetConfig = DeltaTargetConfig()
    transport: TransportConfig = TransportConfig()


@dataclass(frozen=True)
class PathSettings:
    """Default locations; command-line arguments take precedence."""
    out: str | None = None
    corpus: str | None = None
    model: str | None = None
    features: str | None = None
    alignments: str | None = None
    references: str | None = None
    converted: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    jobs: int = 1
    paths: PathSettings = PathSettings()
    corpus: CorpusSettings = CorpusSettings()
    whisperize: WhisperizeConfig = WhisperizeConfig()
    codec: CodecConfig = CodecConfig()
    flow: FlowSettings = FlowSettings()
    sampler: SamplerSettings = SamplerSettings()
    misalignment: MisalignmentConfig = MisalignmentConfig()
    conversion: ConversionCriteria = ConversionCriteria()
    layer_select: LayerSelectSettings = LayerSelectSettings()
    oracle: OracleSettings = OracleSettings()

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")


def _type_name(hint) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(hint, value, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        errors = []
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(option, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: unexpected null")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{k}]") for k, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{k}]") for k, (a, v) in enumerate(zip(args, value)))
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            choices = ", ".join(str(m.value) for m in hint)
            raise ConfigError(f"{where}: {value!r} is not one of {choices}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {_type_name(hint)}")


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown key(s): {', '.join(prefix + str(k) for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse a YAML file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)
                if f.init}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _plain(config)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)
