"""Run configuration: one strict JSON document holding every hyperparameter."""
from __future__ import annotations

import json
import types
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Union, get_args, get_origin, get_type_hints

from regnav.expert import ExpertConfig
from regnav.nav import FUSION_MODES, TrainConfig
from regnav.sim import DIFFICULTIES, House, generate_house


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    train_seeds: tuple[int, int] = (0, 16)  # half-open house-seed ranges
    eval_seeds: tuple[int, int] = (1000, 1008)
    min_rooms: int = 3
    max_rooms: int = 4
    min_style_gap: float = 0.5

    def validate(self) -> None:
        for name in ("train_seeds", "eval_seeds"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise ConfigError(f"world.{name} must be a non-empty range [lo, hi) with lo >= 0")
        (a, b), (c, d) = self.train_seeds, self.eval_seeds
        if a < d and c < b:
            raise ConfigError("train and eval house seed ranges must be disjoint")
        if not 2 <= self.min_rooms <= self.max_rooms <= 12:
            raise ConfigError("need 2 <= min_rooms <= max_rooms <= 12")
        if self.min_style_gap < 0:
            raise ConfigError("min_style_gap must be >= 0")

    def rooms_for(self, seed: int) -> int:
        return self.min_rooms + seed % (self.max_rooms - self.min_rooms + 1)


@dataclass
class DataConfig:
    episodes_per_house: int = 12
    angles: int = 4
    clean: bool = True
    blank_threshold: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.episodes_per_house < 1 or self.angles < 1:
            raise ConfigError("episodes_per_house and angles must be >= 1")
        if not self.blank_threshold > 0:
            raise ConfigError("blank_threshold must be > 0")


@dataclass
class PretrainConfig:
    epochs: int = 20
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("pretrain.epochs must be >= 1")
        try:
            self.expert.validate()
        except ValueError as exc:
            raise ConfigError(f"pretrain.expert: {exc}") from exc


@dataclass
class PolicyStageConfig:
    fusion: str = "explicit"
    total_steps: int = 300_000
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"policy.fusion must be one of {FUSION_MODES}")
        if self.total_steps < 0:
            raise ConfigError("policy.total_steps must be >= 0")
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(f"policy.train: {exc}") from exc


@dataclass
class EvalConfig:
    n_episodes: int = 90
    difficulty: str = "all"
    seed: int = 0
    svg_episodes: int = 3

    def validate(self) -> None:
        if self.n_episodes < 1:
            raise ConfigError("eval.n_episodes must be >= 1")
        if self.difficulty != "all" and self.difficulty not in DIFFICULTIES:
            raise ConfigError(f"eval.difficulty must be 'all' or one of {DIFFICULTIES}")
        if self.svg_episodes < 0:
            raise ConfigError("eval.svg_episodes must be >= 0")


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    policy: PolicyStageConfig = field(default_factory=PolicyStageConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for part in (self.world, self.data, self.pretrain, self.policy, self.eval):
            part.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(tp, value, where: str):
    if is_dataclass(tp):
        return _build(tp, value, where)
    origin = get_origin(tp)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in get_args(tp):
            return None
        tp = next(a for a in get_args(tp) if a is not type(None))
        return _coerce(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        args = get_args(tp)
        item_types = [args[0]] * len(value) if len(args) == 2 and args[1] is Ellipsis else list(args)
        if len(item_types) != len(value):
            raise ConfigError(f"{where} must have {len(item_types)} entries")
        return tuple(_coerce(t, v, where) for t, v in zip(item_types, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def make_houses(world: WorldConfig, split: str = "train") -> list[House]:
    lo, hi = world.train_seeds if split == "train" else world.eval_seeds
    return [generate_house(s, world.rooms_for(s), min_style_gap=world.min_style_gap) for s in range(lo, hi)]


def parse_seed_range(text: str) -> tuple[int, int]:
    """'lo:hi' (half open) or a single seed 'n'."""
    try:
        if ":" in text:
            lo, hi = (int(p) for p in text.split(":", 1))
        else:
            lo = int(text)
            hi = lo + 1
    except ValueError as exc:
        raise ConfigError(f"bad seed range {text!r}; expected 'lo:hi'") from exc
    if not 0 <= lo < hi:
        raise ConfigError(f"bad seed range {text!r}; need 0 <= lo < hi")
    return lo, hi
