"""Training configuration: nested dataclasses loaded from one strict JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .models.cmg import VARIANTS
from .models.dma import ConfigError, DmaConfig

STAGE1_LOSSES = ("L_w", "L_r", "L_s")
STAGE2_LOSSES = ("L_f", "L_t", "L_cls")

# Published full-scale schedule, kept for reference next to the desk defaults.
PUBLISHED_SCALE = {
    "stage1": {"steps": 1600, "lr": 1e-4},
    "stage2": {"steps": 3000, "lr": 1e-4, "batch_size": 50},
}


@dataclass
class DataConfig:
    manifest: str = ""
    out_dir: str = "runs"


@dataclass
class ModelConfig:
    channels: int = 32
    n_blocks: int = 4
    n_heads: int = 8
    down_after: List[int] = field(default_factory=lambda: [1])
    up_after: List[int] = field(default_factory=lambda: [3])
    refine_width: int = 8
    cmg_base: int = 8


@dataclass
class Stage1Config:
    steps: int = 400
    lr: float = 1e-3
    batch_size: int = 8
    n_pairs: int = 256
    tau: float = 0.02
    weights: Dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in STAGE1_LOSSES})


@dataclass
class Stage2Config:
    steps: int = 600
    lr: float = 1e-3
    batch_size: int = 8
    margin: float = 0.3
    weights: Dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in STAGE2_LOSSES})


@dataclass
class AblationConfig:
    disable_losses: List[str] = field(default_factory=list)
    no_head_split: bool = False
    no_token_resampling: bool = False
    cmg_variant: str = "gated"


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name, stage, allowed in (("stage1", self.stage1, STAGE1_LOSSES), ("stage2", self.stage2, STAGE2_LOSSES)):
            unknown = set(stage.weights) - set(allowed)
            if unknown:
                raise ConfigError(f"{name}.weights: unknown loss terms {sorted(unknown)}")
            if stage.steps < 0 or stage.batch_size < 1 or stage.lr <= 0:
                raise ConfigError(f"{name}: steps >= 0, batch_size >= 1 and lr > 0 required")
            if any(w < 0 for w in stage.weights.values()):
                raise ConfigError(f"{name}.weights must be non-negative")
        bad = set(self.ablation.disable_losses) - set(STAGE1_LOSSES + STAGE2_LOSSES)
        if bad:
            raise ConfigError(f"ablation.disable_losses: unknown terms {sorted(bad)}")
        if self.ablation.cmg_variant not in VARIANTS:
            raise ConfigError(f"ablation.cmg_variant must be one of {VARIANTS}")
        if self.stage2.batch_size < 2:
            raise ConfigError("stage2.batch_size must be >= 2 for the triplet loss")
        self.dma_config().validate()
        return self

    def dma_config(self) -> DmaConfig:
        m = self.model
        resample = not self.ablation.no_token_resampling
        return DmaConfig(
            n_blocks=m.n_blocks,
            channels=m.channels,
            n_heads=m.n_heads,
            down_after=tuple(m.down_after) if resample else (),
            up_after=tuple(m.up_after) if resample else (),
            split_heads=not self.ablation.no_head_split,
        )

    def loss_weights(self, stage: int) -> Dict[str, float]:
        weights = dict((self.stage1 if stage == 1 else self.stage2).weights)
        names = STAGE1_LOSSES if stage == 1 else STAGE2_LOSSES
        for name in names:
            weights.setdefault(name, 1.0)
            if name in self.ablation.disable_losses:
                weights[name] = 0.0
        return weights

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, payload: Any, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(payload).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        ftype = fields[name].type
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        if sub is not None:
            kwargs[name] = _build(sub, value, path)
        else:
            kwargs[name] = _coerce(value, ftype, path)
    return cls(**kwargs)


def _coerce(value: Any, ftype: str, path: str):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "List[int]": lambda v: isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
        "List[str]": lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v),
        "Dict[str, float]": lambda v: isinstance(v, dict)
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v.values()),
    }
    check = ok.get(ftype)
    if check is None or not check(value):
        raise ConfigError(f"{path}: expected {ftype}, got {value!r}")
    if ftype == "float":
        return float(value)
    if ftype == "Dict[str, float]":
        return {k: float(v) for k, v in value.items()}
    return value


_NESTED = {
    (TrainConfig, "data"): DataConfig,
    (TrainConfig, "model"): ModelConfig,
    (TrainConfig, "stage1"): Stage1Config,
    (TrainConfig, "stage2"): Stage2Config,
    (TrainConfig, "ablation"): AblationConfig,
}


def config_from_dict(payload: Dict[str, Any]) -> TrainConfig:
    cfg = _build(TrainConfig, payload, "")
    # partial weight dicts fill in the remaining terms at 1
    for stage, names in ((cfg.stage1, STAGE1_LOSSES), (cfg.stage2, STAGE2_LOSSES)):
        stage.weights = {**{k: 1.0 for k in names}, **stage.weights}
    return cfg.validate()


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(payload)
