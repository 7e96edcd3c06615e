"""Experiment configuration: JSON schema, dotted-key overrides and presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbones import BackboneConfig
from .multitask import HybridLossConfig

SCHEMA_VERSION = 1
SELECTION_METRICS = ("rain_csi", "heavy_csi", "mean_csi")


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class CamSettings:
    enabled: bool = True
    reduction_ratio: int = 16
    merge: str = "residual_add"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    dataset: str = ""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cam: CamSettings = field(default_factory=CamSettings)
    loss: HybridLossConfig = field(default_factory=HybridLossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 1
    epochs: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    selection_metric: str = "rain_csi"
    eval_mode: str = "classification"
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if self.optimizer.kind != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer.kind!r}")
        if not self.optimizer.lr > 0:
            raise ValueError("optimizer.lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(f"selection_metric must be one of {SELECTION_METRICS}")
        if self.eval_mode not in ("classification", "regression"):
            raise ValueError("eval_mode must be 'classification' or 'regression'")

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d, "")

    def hash(self) -> bytes:
        """32-byte SHA-256 digest of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()


def _to_jsonable(v):
    if isinstance(v, dict):
        return {k: _to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    return v


def _from_dict(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigKeyError(f"{prefix or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigKeyError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _from_dict(t, v, f"{prefix}{k}.")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def flatten(cfg: ExperimentConfig) -> dict[str, object]:
    """Every leaf config key as a dotted path with its current value."""
    out = {}

    def walk(prefix, d):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(f"{prefix}{k}.", v)
            else:
                out[prefix + k] = v

    walk("", cfg.to_dict())
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` strings (dotted keys, JSON values) to ``cfg``.

    Unknown keys are rejected before anything is changed.
    """
    known = flatten(cfg)
    parsed = []
    for item in overrides:
        if "=" not in item:
            raise ConfigKeyError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigKeyError(f"unknown config key {key!r}")
        parsed.append((key, parse_value(text)))
    d = cfg.to_dict()
    for key, value in parsed:
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


def load_config(path, overrides=()) -> ExperimentConfig:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = ExperimentConfig.from_dict(d)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


# Training settings per benchmark region. Swin-Unet runs use lr 1e-4;
# the U-Net/ConvLSTM baselines use 1e-3 on Korea and Germany.
_PRESETS = {
    "korea": dict(lr=1e-4, baseline_lr=1e-3, batch_size=1, epochs=50, weights=(1.0, 5.0, 30.0)),
    "germany": dict(lr=1e-4, baseline_lr=1e-3, batch_size=20, epochs=30, weights=(1.0, 5.0, 30.0)),
    "china": dict(lr=1e-4, baseline_lr=1e-4, batch_size=1, epochs=100, weights=(1.0, 15.0, 10.0)),
}


def preset(region: str, backbone: str = "swin_unet", dataset: str = "") -> ExperimentConfig:
    p = _PRESETS[region]
    lr = p["lr"] if backbone == "swin_unet" else p["baseline_lr"]
    return ExperimentConfig(
        name=f"{region}-{backbone}",
        dataset=dataset,
        backbone=BackboneConfig(kind=backbone),
        loss=HybridLossConfig(class_weights=p["weights"], alpha=100.0),
        optimizer=OptimizerConfig(lr=lr),
        batch_size=p["batch_size"],
        epochs=p["epochs"],
        seeds=(0, 1, 2),
    )


def toy(dataset: str = "", **changes) -> ExperimentConfig:
    """Small CPU-friendly Swin-Unet + CAMT configuration."""
    cfg = ExperimentConfig(
        name="toy",
        dataset=dataset,
        backbone=BackboneConfig(kind="swin_unet", out_feature_channels=32),
        loss=HybridLossConfig(log1p_target=True),
        optimizer=OptimizerConfig(lr=1e-3),
        batch_size=2,
        epochs=20,
        seeds=(0,),
    )
    return replace(cfg, **changes)
