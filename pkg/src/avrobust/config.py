"""Experiment configuration: strict YAML parsing, dotted-path overrides, and
round-trippable serialization.

Unknown keys are rejected with their full path so misspelled settings fail
loudly instead of silently using defaults. The uptrain and finetune sections
inherit the top-level corruption/mask/weights sections unless they specify
their own, and the model's input dimensions are derived from the synthesizer
settings.
"""

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .corruption import CorruptionConfig, EVAL_SNRS_DB
from .data import SynthSpec
from .errors import ConfigError
from .losses import TaskWeights
from .masking import MaskConfig
from .model import ModelConfig
from .training import FinetuneConfig, UptrainConfig


@dataclass
class CorpusSettings:
    n_train: int = 120
    n_valid: int = 24
    n_test: int = 24
    bank_clips: int = 6
    bank_clip_length: int = 200
    babble_k: int = 3
    n_heldout: int = 24


@dataclass
class EvalSettings:
    visual_kinds: tuple[str, ...] = ("occlude",)
    audio_categories: tuple[str, ...] = ("babble", "speech", "music", "natural")
    snrs: tuple[float, ...] = EVAL_SNRS_DB
    mode: str = "av"


@dataclass
class ExperimentConfig:
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: TaskWeights = field(default_factory=TaskWeights)
    uptrain: UptrainConfig = field(default_factory=UptrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)


def _coerce(hint, value, path: str):
    if dataclasses.is_dataclass(hint):
        return build_dataclass(hint, value, path)
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path) if len(args) == 1 else value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(value)
    if hint is float and isinstance(value, int):
        return float(value)
    if hint in (int, float, str, bool) and not isinstance(value, hint):
        raise ConfigError(
            f"{path}: expected {hint.__name__}, got {type(value).__name__} ({value!r})"
        )
    return value


def build_dataclass(cls, data, path: str = ""):
    """Build a dataclass from a mapping, rejecting unknown keys by path."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key: {path + '.' if path else ''}{key}")
    kwargs = {
        key: _coerce(hints[key], value, f"{path + '.' if path else ''}{key}")
        for key, value in data.items()
    }
    return cls(**kwargs)


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _tuples_to_lists(dataclasses.asdict(cfg))


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    # training sections inherit the top-level pipeline sections and seed
    for section in ("uptrain", "finetune"):
        sub = dict(raw.get(section) or {})
        sub.setdefault("corruption", raw.get("corruption") or {})
        if section == "uptrain":
            sub.setdefault("mask", raw.get("mask") or {})
            sub.setdefault("weights", raw.get("weights") or {})
        sub.setdefault("seed", raw.get("seed", 0))
        raw[section] = sub
    cfg = build_dataclass(ExperimentConfig, raw)
    cfg.model = dataclasses.replace(
        cfg.model,
        d_audio_in=cfg.synth.d_a,
        video_size=cfg.synth.video_size,
        vocab_size=cfg.synth.vocab_size,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    cfg.synth.validate()
    cfg.corruption.validate()
    cfg.mask.validate()
    cfg.model.validate()
    cfg.weights.validate()
    cfg.uptrain.validate()
    cfg.finetune.validate()
    if cfg.eval.mode not in ("av", "audio", "video"):
        raise ConfigError(f"eval.mode must be av|audio|video, got {cfg.eval.mode!r}")


def load_config(path: str | None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        raw = apply_override(raw, item)
    return config_from_dict(raw)


def apply_override(raw: dict, item: str) -> dict:
    """Apply one 'dotted.path=value' override to a raw config mapping."""
    if "=" not in item:
        raise ConfigError(f"override must look like key.path=value, got {item!r}")
    dotted, _, value_text = item.partition("=")
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"empty override path in {item!r}")
    try:
        value = yaml.safe_load(value_text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {value_text!r}: {exc}") from None
    node = raw
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(f"override path {dotted!r} crosses a non-mapping value")
        node = nxt
    node[keys[-1]] = value
    return raw


def dump_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)
