"""Run configuration: one YAML file per experiment (backbone, rank, split, input strategy, threshold)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .lora import LoraConfig
from .metrics import ThresholdPolicy
from .model_zoo import FeatureMode, get_backbone
from .preprocess import AugmentationConfig, PreprocessConfig
from .splitter import SplitStrategy
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    strategy: SplitStrategy = SplitStrategy.RANDOM
    k: int = 3
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", SplitStrategy(self.strategy))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "k": self.k, "seed": self.seed, "stratify": self.stratify}


@dataclass(frozen=True)
class RunConfig:
    manifest: Path
    output_dir: Path
    backbone: str = "tiny-test"
    feature_mode: FeatureMode = FeatureMode.CLS
    weights: Path | None = None
    model_seed: int = 0
    lora: LoraConfig = field(default_factory=LoraConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy)

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        spec = get_backbone(self.backbone)
        if self.preprocess.target_size != spec.input_size:
            raise ConfigError(
                f"preprocess.target_size {self.preprocess.target_size} differs from {self.backbone} input size {spec.input_size}"
            )

    def check_paths(self) -> None:
        if not Path(self.manifest).is_file():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.weights is not None and not Path(self.weights).is_file():
            raise ConfigError(f"weights file not found: {self.weights}")

    def with_overrides(self, seed: int | None = None, out=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=seed), split=replace(cfg.split, seed=seed))
        if out is not None:
            cfg = replace(cfg, output_dir=Path(out))
        return cfg

    def to_dict(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "output_dir": str(self.output_dir),
            "backbone": self.backbone,
            "feature_mode": self.feature_mode.value,
            "weights": None if self.weights is None else str(self.weights),
            "model_seed": self.model_seed,
            "lora": self.lora.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "augmentation": self.augmentation.to_dict(),
            "train": self.train.to_dict(),
            "split": self.split.to_dict(),
            "threshold": self.threshold.to_dict(),
        }

    def echo(self, directory=None) -> Path:
        """Write the fully resolved config next to the run's outputs."""
        directory = Path(directory or self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.yaml"
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path


_SECTIONS = {"lora", "preprocess", "augmentation", "train", "split", "threshold"}
_TOP = {"manifest", "output_dir", "backbone", "feature_mode", "weights", "model_seed"} | _SECTIONS


def _section(cls, data: dict | None, name: str):
    try:
        return cls(**(data or {}))
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def config_from_dict(d: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a RunConfig; relative paths resolve against ``base_dir``."""
    unknown = set(d) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "manifest" not in d:
        raise ConfigError("config needs a 'manifest' path")

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    lora = dict(d.get("lora") or {})
    if "targets" in lora:
        lora["targets"] = tuple(lora["targets"])
    return RunConfig(
        manifest=path(d["manifest"]),
        output_dir=path(d.get("output_dir", "runs/default")),
        backbone=d.get("backbone", "tiny-test"),
        feature_mode=d.get("feature_mode", "cls"),
        weights=path(d.get("weights")),
        model_seed=int(d.get("model_seed", 0)),
        lora=_section(LoraConfig, lora, "lora"),
        preprocess=_section(PreprocessConfig, d.get("preprocess"), "preprocess"),
        augmentation=_section(AugmentationConfig, d.get("augmentation"), "augmentation"),
        train=_section(TrainConfig, d.get("train"), "train"),
        split=_section(SplitConfig, d.get("split"), "split"),
        threshold=_section(ThresholdPolicy, d.get("threshold"), "threshold"),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return config_from_dict(data, base_dir=path.parent)
