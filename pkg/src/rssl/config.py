"""Experiment configuration: one YAML file describing datasets, model shape,
augmentation recipes, and the three training stages. Unknown keys are
rejected with the offending field path; dumping a loaded config writes every
default back out, so the persisted file is the fully resolved experiment."""

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import EvalRecipe, SslRecipe
from .errors import ConfigurationError
from .models import EncoderSpec, PredictorSpec
from .pretrain import PretrainConfig
from .transfer import FinetuneConfig, LinearEvalConfig


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    output_dir: str = "runs"
    datasets: dict = field(default_factory=dict)  # name -> manifest path
    alias_file: str | None = None  # None -> bundled alias table
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    ssl_recipe: SslRecipe = field(default_factory=SslRecipe)
    eval_recipe: EvalRecipe = field(default_factory=EvalRecipe)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    linear_eval: LinearEvalConfig = field(default_factory=LinearEvalConfig)
    split_ratios: tuple = (0.6, 0.2, 0.2)
    seeds: int = 5

    def __post_init__(self):
        if not self.experiment_id:
            raise ConfigurationError("experiment_id must be non-empty")
        if self.seeds < 1:
            raise ConfigurationError("seeds must be >= 1")
        if self.encoder.proj_out_dim != self.predictor.in_dim:
            raise ConfigurationError(
                f"predictor.in_dim ({self.predictor.in_dim}) must equal "
                f"encoder.proj_out_dim ({self.encoder.proj_out_dim})"
            )
        if len(self.split_ratios) != 3:
            raise ConfigurationError("split_ratios must have three entries")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _from_dict(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[name] = _from_dict(hint, value, f"{path}.{name}")
        else:
            kwargs[name] = _tuplify(value)
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{path}: {e}") from e


def config_from_dict(raw: dict, source: str = "config") -> ExperimentConfig:
    return _from_dict(ExperimentConfig, raw, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    return config_from_dict(raw, source=str(path))


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _plain(config)


def dump_config(config: ExperimentConfig, path):
    """Write the config with every default made explicit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=False)
