"""Run configuration: dataclasses, presets, JSON loading and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError


@dataclass
class EncoderConfig:
    stage_widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    convs_per_stage: list[int] = field(default_factory=lambda: [2, 2, 3, 3, 3])
    input_channels: int = 3

    def validate(self):
        if len(self.stage_widths) != 5 or len(self.convs_per_stage) != 5:
            raise ConfigError("encoder: stage_widths and convs_per_stage need 5 entries")
        if any(w <= 0 for w in self.stage_widths):
            raise ConfigError(f"encoder.stage_widths must be positive: {self.stage_widths}")
        if any(c < 1 for c in self.convs_per_stage):
            raise ConfigError(f"encoder.convs_per_stage must be >= 1: {self.convs_per_stage}")
        if self.input_channels <= 0:
            raise ConfigError("encoder.input_channels must be positive")


@dataclass
class DsfrConfig:
    enabled: bool = True
    proj_dim: int = 64
    beta: Optional[float] = None  # None means 1/sqrt(proj_dim)

    @property
    def effective_beta(self) -> float:
        return self.beta if self.beta is not None else 1.0 / math.sqrt(self.proj_dim)

    def validate(self):
        if self.proj_dim <= 0:
            raise ConfigError("dsfr.proj_dim must be positive")
        if self.beta is not None and self.beta <= 0:
            raise ConfigError("dsfr.beta must be positive")


@dataclass
class DecoderConfig:
    fusion: str = "cf"  # "cf" or "concat"
    upsample: str = "bilinear"  # "bilinear" or "nearest"

    def validate(self):
        if self.fusion not in ("cf", "concat"):
            raise ConfigError(f"decoder.fusion must be 'cf' or 'concat', got {self.fusion!r}")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"decoder.upsample must be 'bilinear' or 'nearest', got {self.upsample!r}")


@dataclass
class LossConfig:
    # None: derived from the training split's class balance at startup
    w0: Optional[float] = None
    w1: Optional[float] = None
    lam: float = field(default=0.1, metadata={"key": "lambda"})
    dice_epsilon: float = 1e-6

    def validate(self):
        for name in ("w0", "w1"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"loss.{name} must be positive")
        if self.lam < 0:
            raise ConfigError("loss.lambda must be >= 0")
        if self.dice_epsilon <= 0:
            raise ConfigError("loss.dice_epsilon must be positive")


@dataclass
class OptimConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self):
        if self.lr0 <= 0 or self.weight_decay < 0 or self.adam_epsilon <= 0:
            raise ConfigError("optim: lr0 and adam_epsilon must be positive, weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optim: betas must lie in [0, 1)")


@dataclass
class ScheduleConfig:
    decay_end_iter: int = 3000

    def validate(self):
        if self.decay_end_iter <= 0:
            raise ConfigError("schedule.decay_end_iter must be positive")


@dataclass
class LoopConfig:
    max_iters: int = 3000
    batch_size: int = 8
    val_every: int = 100
    seed: int = 0

    def validate(self):
        if self.max_iters <= 0 or self.batch_size <= 0 or self.val_every <= 0:
            raise ConfigError("loop: max_iters, batch_size and val_every must be positive")


@dataclass
class DataConfig:
    root: Optional[str] = None  # None: generate a synthetic corpus in memory
    synth_n: int = 800
    synth_size: int = 64
    synth_seed: int = 0
    difficulty: int = 1
    split_ratios: list[float] = field(default_factory=lambda: [0.75, 0.125, 0.125])
    split_seed: int = 0
    augment: bool = False

    def validate(self):
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"data.split_ratios must be 3 values summing to 1, got {self.split_ratios}")
        if self.synth_size <= 0 or self.synth_size % 16:
            raise ConfigError("data.synth_size must be a positive multiple of 16")
        if self.synth_n <= 0:
            raise ConfigError("data.synth_n must be positive")
        if self.difficulty not in (0, 1, 2):
            raise ConfigError(f"data.difficulty must be 0, 1 or 2, got {self.difficulty}")


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"

    def validate(self):
        if not self.out_dir:
            raise ConfigError("paths.out_dir must not be empty")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dsfr: DsfrConfig = field(default_factory=DsfrConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict:
        return _to_dict(self)

    def architecture(self) -> dict:
        d = self.to_dict()
        return {"encoder": d["encoder"], "dsfr": d["dsfr"], "decoder": d["decoder"]}

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[_key(f)] = _to_dict(v) if dataclasses.is_dataclass(v) else copy.deepcopy(v)
    return out


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _fill(obj, data: dict, prefix: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected an object")
    hints = typing.get_type_hints(type(obj))
    fields = {_key(f): f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        f = fields[key]
        current = getattr(obj, f.name)
        if dataclasses.is_dataclass(current):
            _fill(current, value, path)
        else:
            setattr(obj, f.name, _coerce(value, hints[f.name], path))


def from_dict(data: dict, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    _fill(cfg, data, "")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as strings."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: Any = value
        for part in reversed(key.strip().split(".")):
            nested = {part: nested}
        _fill(cfg, nested, "")
    return cfg


def load_config(path: Optional[str | Path], overrides: Optional[list[str]] = None, preset: Optional[str] = None) -> RunConfig:
    base = PRESETS[preset]() if preset else RunConfig()
    if path is not None:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        try:
            base = from_dict(data, base)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}{_line_hint(text, str(exc))}") from exc
    cfg = apply_overrides(base, overrides or [])
    return cfg.validate()


def _line_hint(text: str, message: str) -> str:
    # best effort: locate the offending key's last path component in the file
    if "'" not in message:
        return ""
    key = message.split("'")[1].split(".")[-1].split("[")[0]
    for lineno, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return f" (line {lineno})"
    return ""


def desk_preset() -> RunConfig:
    return RunConfig()


def tiny_preset() -> RunConfig:
    cfg = RunConfig()
    cfg.encoder.stage_widths = [8, 16, 32, 32, 32]
    cfg.dsfr.proj_dim = 32
    cfg.loop.max_iters = 800
    cfg.schedule.decay_end_iter = 800
    cfg.data.synth_n = 800
    cfg.data.synth_size = 64
    cfg.data.split_ratios = [0.75, 0.125, 0.125]
    return cfg


def full_preset() -> RunConfig:
    cfg = RunConfig()
    cfg.encoder.stage_widths = [64, 128, 256, 512, 512]
    cfg.dsfr.proj_dim = 512
    cfg.optim.lr0 = 1e-5
    cfg.schedule.decay_end_iter = 30000
    cfg.loop.max_iters = 30000
    cfg.loop.batch_size = 32
    cfg.loop.val_every = 500
    cfg.data.synth_size = 256
    cfg.data.split_ratios = [0.7, 0.1, 0.2]
    return cfg


PRESETS = {"desk": desk_preset, "tiny": tiny_preset, "full": full_preset}
