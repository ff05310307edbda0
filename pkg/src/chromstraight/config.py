"""Run configuration: sectioned dataclasses, YAML round trip and flag overrides."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .evaluation import EvalConfig
from .synthdata import DataConfig, derive_seed
from .training import ModelConfig, TrainConfig

SECTIONS = ("data", "model", "train", "eval", "match")
DRIVING_MODES = ("sl", "random", "paired")


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.04
    window: int = 5
    width_mode: str = "span"
    eps: float = 1.0
    driving_mode: str = "sl"  # sl | random | paired (ground-truth straight image)

    def validate(self) -> None:
        if not 0 <= self.tau <= 1:
            raise ConfigurationError(f"match.tau must be in [0, 1], got {self.tau}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f"match.window must be a positive odd integer, got {self.window}")
        if self.width_mode not in ("span", "count"):
            raise ConfigurationError(f"match.width_mode must be 'span' or 'count', got {self.width_mode!r}")
        if self.eps <= 0:
            raise ConfigurationError("match.eps must be > 0")
        if self.driving_mode not in DRIVING_MODES:
            raise ConfigurationError(f"match.driving_mode must be one of {DRIVING_MODES}, got {self.driving_mode!r}")


def _validate_eval(c: EvalConfig) -> None:
    if c.k_folds < 2:
        raise ConfigurationError("eval.k_folds must be >= 2")
    if c.dca_lr <= 0 or c.dca_batch_size < 1 or c.dca_max_epochs < 1:
        raise ConfigurationError("eval.dca_lr, eval.dca_batch_size and eval.dca_max_epochs must be positive")
    for arm in c.ablation_arms:
        parse_arm(arm)


def parse_arm(arm: str) -> dict:
    """'patchgan' or 'vit<N>' to model overrides."""
    if arm == "patchgan":
        return {"discriminator": "patchgan"}
    if arm.startswith("vit") and arm[3:].isdigit() and int(arm[3:]) >= 1:
        return {"discriminator": "vit", "blocks": int(arm[3:])}
    raise ConfigurationError(f"eval.ablation_arms: unknown arm {arm!r} (expected 'patchgan' or 'vit<N>')")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    match: MatchConfig = field(default_factory=MatchConfig)

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.model.validate()
        self.train.validate()
        _validate_eval(self.eval)
        self.match.validate()
        return self

    def resolved(self) -> "RunConfig":
        """Section seeds left unset are derived from the root seed."""
        def fill(section, purpose):
            return section if section.seed is not None else replace(section, seed=derive_seed(self.seed, purpose))
        return replace(self, data=fill(self.data, "data"), train=fill(self.train, "train"),
                       eval=fill(self.eval, "eval"))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# typed coercion


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigurationError as exc:
                errors.append(str(exc))
        raise ConfigurationError(errors[0] if errors else f"{key}: invalid value {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(value) != len(args):
            raise ConfigurationError(f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigurationError(f"{key}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    raise ConfigurationError(f"{key}: unsupported field type {tp!r}")


def _build_section(cls, values: dict, prefix: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"{prefix}: expected a mapping, got {values!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigurationError(f"unknown config key {prefix}.{unknown[0]}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}") for k, v in values.items()}
    return cls(**kwargs)


_SECTION_TYPES = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
                  "eval": EvalConfig, "match": MatchConfig}


def config_from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigurationError(f"unknown config key {unknown[0]}")
    kwargs = {}
    if "seed" in d:
        kwargs["seed"] = _coerce(d["seed"], int, "seed")
    for name in SECTIONS:
        if name in d and d[name] is not None:
            kwargs[name] = _build_section(_SECTION_TYPES[name], d[name], name)
    return RunConfig(**kwargs).validate()


def parse_override(key: str, raw: str) -> tuple[list[str], object]:
    """``section.key`` plus a YAML-parsed value."""
    parts = key.split(".")
    if not (len(parts) == 1 and parts[0] == "seed") and not (len(parts) == 2 and parts[0] in SECTIONS):
        raise ConfigurationError(f"unknown config key {key}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{key}: cannot parse value {raw!r}") from exc
    return parts, value


def apply_overrides(d: dict, overrides: list[tuple[str, str]]) -> dict:
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (d or {}).items()}
    for key, raw in overrides:
        parts, value = parse_override(key, raw)
        if len(parts) == 1:
            d["seed"] = value
        else:
            d.setdefault(parts[0], {})
            if d[parts[0]] is None:
                d[parts[0]] = {}
            d[parts[0]][parts[1]] = value
    return d


def load_config(path=None, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    """Read an optional YAML file, apply ``(section.key, value)`` overrides, validate."""
    d: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_overrides(d, overrides or []))


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config))
    return path
