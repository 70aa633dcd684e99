"""Backbone registry and the (backbone + LoRA + linear head) classifier."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path

import torch
import torch.nn as nn
import yaml

from .lora import LoraConfig, freeze_base, inject_lora
from .vit import VisionTransformer

WEIGHTS_ENV = "MITOLORA_WEIGHTS_ROOT"
REGISTRY_VERSION = 1
_WEIGHT_SUFFIXES = (".safetensors", ".pth", ".pt", ".bin")


class FeatureMode(str, Enum):
    CLS = "cls"
    CLS_PLUS_MEANPATCH = "cls_plus_meanpatch"


class WeightsSource(str, Enum):
    PRETRAINED_EXTERNAL = "pretrained_external"
    RANDOM_TINY = "random_tiny"


class ModelZooError(ValueError):
    pass


class GatedWeightsError(ModelZooError, FileNotFoundError):
    pass


class InputSizeError(ModelZooError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    architecture: str
    embed_dim: int
    depth: int
    num_heads: int
    patch_size: int
    input_size: int = 224
    mlp_ratio: float = 4.0
    mlp_kind: str = "gelu"
    layer_scale_init: float | None = None
    num_reg_tokens: int = 0
    qkv_fused: bool = True
    feature_mode: FeatureMode = FeatureMode.CLS
    norm_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, ...] = (0.229, 0.224, 0.225)
    weights_source: WeightsSource = WeightsSource.PRETRAINED_EXTERNAL
    gated_source: str = ""
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        object.__setattr__(self, "weights_source", WeightsSource(self.weights_source))
        object.__setattr__(self, "norm_mean", tuple(float(v) for v in self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(float(v) for v in self.norm_std))
        if self.embed_dim <= 0 or self.depth <= 0:
            raise ModelZooError(f"{self.name}: embed_dim and depth must be positive")
        if self.mlp_kind not in ("gelu", "swiglu"):
            raise ModelZooError(f"{self.name}: unknown mlp_kind {self.mlp_kind!r}")

    @property
    def feature_dim(self) -> int:
        return self.embed_dim * (2 if self.feature_mode is FeatureMode.CLS_PLUS_MEANPATCH else 1)

    def with_feature_mode(self, mode) -> "BackboneSpec":
        return replace(self, feature_mode=FeatureMode(mode))


def _load_registry() -> dict[str, BackboneSpec]:
    text = resources.files(__package__).joinpath("backbones.yaml").read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    if doc.get("version") != REGISTRY_VERSION:
        raise ModelZooError(f"backbone registry version {doc.get('version')!r} unsupported")
    specs = {}
    for entry in doc["backbones"]:
        spec = BackboneSpec(**entry)
        specs[spec.name] = spec
    return specs


_REGISTRY = _load_registry()


def list_backbones() -> list[BackboneSpec]:
    return list(_REGISTRY.values())


def get_backbone(name: str) -> BackboneSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ModelZooError(f"unknown backbone {name!r}; known: {sorted(_REGISTRY)}") from None


def make_vit(spec: BackboneSpec) -> VisionTransformer:
    return VisionTransformer(
        img_size=spec.input_size,
        patch_size=spec.patch_size,
        embed_dim=spec.embed_dim,
        depth=spec.depth,
        num_heads=spec.num_heads,
        mlp_ratio=spec.mlp_ratio,
        mlp_kind=spec.mlp_kind,
        layer_scale_init=spec.layer_scale_init,
        num_reg_tokens=spec.num_reg_tokens,
        qkv_fused=spec.qkv_fused,
    )


def resolve_weights(spec: BackboneSpec, weights_path=None) -> Path:
    """Explicit path first, then ``$MITOLORA_WEIGHTS_ROOT/<name>.{safetensors,pth,pt,bin}``."""
    if weights_path is not None:
        p = Path(weights_path)
        if p.is_file():
            return p
        raise GatedWeightsError(f"weights file for {spec.name!r} not found at {p}")
    root = os.environ.get(WEIGHTS_ENV)
    if root:
        for suffix in _WEIGHT_SUFFIXES:
            p = Path(root) / f"{spec.name}{suffix}"
            if p.is_file():
                return p
    raise GatedWeightsError(
        f"backbone {spec.name!r} needs gated pretrained weights from {spec.gated_source or 'its publisher'}; "
        f"download them after accepting the license and pass --weights or set {WEIGHTS_ENV}"
    )


def load_backbone_weights(vit: VisionTransformer, path: Path) -> None:
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file

        state = load_file(str(path))
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
    # classifier heads and pooling norms of the source model are not used
    state = {k: v for k, v in state.items() if not k.startswith(("head.", "fc_norm."))}
    missing, unexpected = vit.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ModelZooError(
            f"weights at {path} do not match the declared architecture: "
            f"missing {list(missing)[:5]}, unexpected {list(unexpected)[:5]}"
        )


class AMFClassifier(nn.Module):
    """Frozen ViT backbone with LoRA adapters and a single-logit linear head."""

    def __init__(self, spec: BackboneSpec, backbone: VisionTransformer, lora_cfg: LoraConfig | None):
        super().__init__()
        self.spec = spec
        self.lora_cfg = lora_cfg
        self.backbone = backbone
        self.head = nn.Linear(spec.feature_dim, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.backbone.forward_tokens(x)
        cls = tokens[:, 0]
        if self.spec.feature_mode is FeatureMode.CLS_PLUS_MEANPATCH:
            patches = tokens[:, self.backbone.num_prefix_tokens :]
            return torch.cat([cls, patches.mean(dim=1)], dim=-1)
        return cls

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


def build_model(
    spec: BackboneSpec,
    lora_cfg: LoraConfig | None,
    weights_path=None,
    seed: int = 0,
) -> AMFClassifier:
    """Backbone (random-tiny or user-supplied weights) + adapters + fresh head.

    ``seed`` drives adapter and head initialization; a RANDOM_TINY backbone
    always uses ``spec.init_seed`` so it can be rebuilt bit-identically from
    a checkpoint that stores no base weights. ``lora_cfg=None`` builds the
    adapter-free baseline.
    """
    vit = make_vit(spec)
    if spec.weights_source is WeightsSource.RANDOM_TINY:
        vit.init_random(torch.Generator().manual_seed(spec.init_seed))
    else:
        load_backbone_weights(vit, resolve_weights(spec, weights_path))

    gen = torch.Generator().manual_seed(seed)
    model = AMFClassifier(spec, vit, lora_cfg)
    with torch.no_grad():
        bound = 1.0 / spec.feature_dim**0.5
        model.head.weight.copy_((torch.rand(model.head.weight.shape, generator=gen) * 2 - 1) * bound)
        model.head.bias.zero_()
    if lora_cfg is not None:
        inject_lora(vit.blocks, lora_cfg, generator=gen)
    return freeze_base(model)


def forward_logit(model: AMFClassifier, batch: torch.Tensor) -> torch.Tensor:
    size = model.spec.input_size
    if batch.ndim != 4 or tuple(batch.shape[-2:]) != (size, size):
        raise InputSizeError(f"{model.spec.name} expects N x C x {size} x {size} input, got {tuple(batch.shape)}")
    return model(batch)
