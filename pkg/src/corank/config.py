"""Model/training configuration and the flat ``key=value`` config file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("full", "prf-only", "group-only")
ORDER_MODES = ("shuffled", "initial", "reversed")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    heads: int = 4
    base_layers: int = 2
    calib_layers: int = 2
    group_layers: int = 4
    vocab_size: int = 30000
    max_seq_len: int = 256
    window: int = 150
    stride: int = 75
    max_group: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if not 0 < self.stride <= self.window:
            raise ValueError("need 0 < stride <= window")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    n: int = 60
    m: int = 4
    o: int = 4
    k: int = 1000
    base_lr: float = 3e-6
    warmup_fraction: float = 0.10
    order_mode: str = "shuffled"
    variant: str = "full"
    residual: bool = True
    first_pass_epochs: int = 2
    first_pass_lr: float = 3e-6
    grad_clip: float = 0.0  # global gradient-norm bound; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.order_mode not in ORDER_MODES:
            raise ValueError(f"order_mode must be one of {ORDER_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.o >= self.n:
            raise ValueError("overlap must be smaller than group size")
        if self.m < 0 or self.k < 1:
            raise ValueError("need m >= 0 and k >= 1")
        if self.m == 0 and self.variant != "group-only":
            raise ValueError("calibration requires m >= 1")


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_config_text(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    """Parse ``key=value`` lines; ``#`` comments and blanks are skipped.

    Keys are the field names of ModelConfig and TrainConfig, except the shared
    ``seed`` which seeds both. Unknown or repeated keys are rejected.
    """
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_kw, train_kw, seen = {}, {}, set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected key=value")
        if key in seen:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        if key not in model_fields and key not in train_fields:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            if key in model_fields:
                model_kw[key] = _coerce(value, model_fields[key])
            if key in train_fields:
                train_kw[key] = _coerce(value, train_fields[key])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = [f"{k}={v}" for k, v in dataclasses.asdict(model_cfg).items() if k != "seed"]
    lines += [f"{k}={v}" for k, v in dataclasses.asdict(train_cfg).items()]
    return "\n".join(lines) + "\n"


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps([dataclasses.asdict(model_cfg), dataclasses.asdict(train_cfg)],
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
