"""Experiment configuration: one YAML/JSON tree, validated with key paths in every error."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import AugmentationConfig
from .models import ConfigError, ModelConfig
from .train import TrainConfig


class ConfigValidationError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DataSection:
    # explicit dataset files win over synthetic generation
    train_path: str | None = None
    eval_path: str | None = None
    n_ids: int = 20
    seqs_per_id: int = 12
    frames_min: int = 60
    frames_max: int = 110
    # pretraining walkers turn while walking, like unconstrained footage
    heading_sweep_deg: float = 150.0
    train_seed: int = 1234
    eval_n_ids: int = 40
    eval_seqs_per_id: int = 12
    eval_seed: int = 98765


@dataclass(frozen=True)
class EvalSection:
    per_id_gallery: int = 2
    batch_size: int = 64


@dataclass(frozen=True)
class SweepSection:
    fractions: tuple[float, ...] = (0.25, 0.5, 1.0)
    widths: tuple[int, ...] = (1, 2)
    # which aggregate feeds the fits: "controlled" or "wild"
    metric: str = "controlled"
    form: str = "saturating"


@dataclass(frozen=True)
class MupCheckSection:
    widths: tuple[int, ...] = (1, 2, 4)
    steps: int = 10
    lr: float = 0.01
    batch_size: int = 8
    n_ids: int = 8
    seqs_per_id: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    data: DataSection = field(default_factory=DataSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    mup_check: MupCheckSection = field(default_factory=MupCheckSection)
    parametrization: str = "mup"
    seed: int = 0
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "train": {k: v for k, v in _plain(dataclasses.asdict(self.train)).items() if k != "seed"},
        }
        for name in ("augmentation", "data", "evaluation", "sweep", "mup_check"):
            d[name] = _plain(dataclasses.asdict(getattr(self, name)))
        d.update(parametrization=self.parametrization, seed=self.seed, out_dir=self.out_dir)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# -- validation ------------------------------------------------------------------
def _check_scalar(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigValidationError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-08) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigValidationError(key, f"expected a string, got {value!r}")
        return value
    return value


def _check_value(key: str, value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(key, f"expected a list, got {value!r}")
        if not default:
            return tuple(value)
        proto = default[0]
        if isinstance(proto, tuple):
            # nested tables keep their own structure; deeper checks belong to the owning type
            return tuple(value)
        return tuple(_check_value(f"{key}[{i}]", v, proto) for i, v in enumerate(value))
    return _check_scalar(key, value, default)


# fields whose default is None need an explicit prototype for type checks
_NULLABLE = {
    "model.stage_depths": (0,),
    "data.train_path": "",
    "data.eval_path": "",
}


def _build_section(cls, raw: Any, prefix: str, skip: tuple[str, ...] = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigValidationError(prefix, f"expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}"
        if key not in fields:
            raise ConfigValidationError(path, f"unknown key (expected one of: {', '.join(sorted(fields))})")
        default = getattr(defaults, key)
        if value is None:
            if default is not None:
                raise ConfigValidationError(path, "null is not allowed here")
            kwargs[key] = None
            continue
        proto = _NULLABLE.get(path, default)
        kwargs[key] = _check_value(path, value, proto)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        sub, _, rest = msg.partition(": ")
        if rest and sub.split("[")[0].split("/")[0] in fields:
            raise ConfigValidationError(f"{prefix}.{sub}", rest) from None
        raise ConfigValidationError(prefix, msg) from None
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(prefix, str(exc)) from None


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "augmentation": AugmentationConfig,
    "data": DataSection,
    "evaluation": EvalSection,
    "sweep": SweepSection,
    "mup_check": MupCheckSection,
}
_TOP_SCALARS = {"parametrization": "mup", "seed": 0, "out_dir": "runs"}


def config_from_dict(raw: dict | None, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Validate a raw tree; relative dataset paths resolve against ``base_dir``."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigValidationError("<root>", "top level must be a mapping")
    for key in raw:
        if key not in _SECTIONS and key not in _TOP_SCALARS:
            allowed = sorted(list(_SECTIONS) + list(_TOP_SCALARS))
            raise ConfigValidationError(key, f"unknown key (expected one of: {', '.join(allowed)})")
    top = {k: _check_scalar(k, raw[k], d) for k, d in _TOP_SCALARS.items() if k in raw}
    seed = top.get("seed", 0)
    if seed < 0:
        raise ConfigValidationError("seed", "must be a non-negative integer")
    if top.get("parametrization", "mup") not in ("mup", "sp"):
        raise ConfigValidationError("parametrization", "expected 'mup' or 'sp'")

    sections = {}
    for name, cls in _SECTIONS.items():
        skip = ("seed",) if name == "train" else ()
        sections[name] = _build_section(cls, raw.get(name), name, skip)
    sections["train"] = dataclasses.replace(sections["train"], seed=seed)
    # views are cropped to the model's input length
    aug_raw = raw.get("augmentation") or {}
    crop = sections["model"].crop_length
    if "crop_length" in aug_raw and aug_raw["crop_length"] != crop:
        raise ConfigValidationError("augmentation.crop_length", f"must equal model.crop_length ({crop})")
    sections["augmentation"] = dataclasses.replace(sections["augmentation"], crop_length=crop)

    data = sections["data"]
    updates = {}
    for key in ("train_path", "eval_path"):
        value = getattr(data, key)
        if value is None:
            continue
        p = Path(value)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        if not p.exists():
            raise ConfigValidationError(f"data.{key}", f"file not found: {p}")
        updates[key] = str(p.resolve())
    if data.frames_min > data.frames_max:
        raise ConfigValidationError("data.frames_min", "must not exceed data.frames_max")
    sections["data"] = dataclasses.replace(data, **updates)

    sweep = sections["sweep"]
    if sweep.metric not in ("controlled", "wild"):
        raise ConfigValidationError("sweep.metric", "expected 'controlled' or 'wild'")
    if sweep.form not in ("saturating", "additive"):
        raise ConfigValidationError("sweep.form", "expected 'saturating' or 'additive'")
    for i, f in enumerate(sweep.fractions):
        if not 0.0 < f <= 1.0:
            raise ConfigValidationError(f"sweep.fractions[{i}]", "must be in (0, 1]")
    for section, widths in (("sweep", sweep.widths), ("mup_check", sections["mup_check"].widths)):
        for i, c in enumerate(widths):
            if c < 1:
                raise ConfigValidationError(f"{section}.widths[{i}]", "must be a positive integer")
            try:
                sections["model"].with_width(c)
            except ConfigError as exc:
                raise ConfigValidationError(f"{section}.widths[{i}]", str(exc)) from None
    return ExperimentConfig(**sections, **top)


def parse_config(path: str | Path) -> ExperimentConfig:
    """Read YAML (or JSON) from ``path``; an empty file gives the default configuration.

    A run manifest is accepted too: its resolved ``config`` tree is used.
    """
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, ValueError) as exc:
        raise ConfigValidationError("<file>", f"cannot parse {path}: {exc}") from None
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = raw.get("config")
    return config_from_dict(raw, base_dir=path.parent)


DESK_PRESET = {
    "model": {
        "family": "gaitformer",
        "variant": "shallow",
        "base_stage_widths": [16, 16, 32, 32],
        "base_stage_heads": [2, 2, 4, 4],
        "head_dim": 8,
        "emb_size": 32,
        "crop_length": 32,
        "mlp_ratio": 2,
    },
    "train": {"batch_size": 32, "base_lr": 0.005, "warmup_steps": 20},
}


def desk_config(**overrides) -> ExperimentConfig:
    """Small synthetic-benchmark setup that trains in seconds per run on one core."""
    raw = {k: dict(v) for k, v in DESK_PRESET.items()}
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return config_from_dict(raw)
