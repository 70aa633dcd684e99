"""Low-rank adapters for attention projections.

A frozen linear map ``y = x W0^T + b`` gains a trainable update
``scaling * drop(x) A^T B^T`` with ``A: r x d_in``, ``B: d_out x r`` and
``scaling = alpha / r``. ``B`` starts at zero so a fresh adapter leaves the
base output untouched.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LORA_TARGETS = ("query", "key", "value")


class LoraError(ValueError):
    pass


class LoraRankWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout_p: float = 0.3
    targets: tuple[str, ...] = LORA_TARGETS
    # None adapts every block
    blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.rank < 1:
            raise LoraError(f"rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise LoraError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise LoraError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not self.targets:
            raise LoraError("targets must name at least one of query/key/value")
        unknown = set(self.targets) - set(LORA_TARGETS)
        if unknown:
            raise LoraError(f"unknown LoRA targets {sorted(unknown)}; choose from {LORA_TARGETS}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout_p": self.dropout_p,
            "targets": list(self.targets),
            "blocks": None if self.blocks is None else list(self.blocks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        blocks = d.get("blocks")
        return cls(
            rank=int(d["rank"]),
            alpha=float(d["alpha"]),
            dropout_p=float(d["dropout_p"]),
            targets=tuple(d["targets"]),
            blocks=None if blocks is None else tuple(blocks),
        )


@dataclass
class LoraLayerState:
    A: torch.Tensor
    B: torch.Tensor
    scaling: float
    dropout_p: float = 0.0
    merged: bool = False

    @property
    def delta(self) -> torch.Tensor:
        return self.scaling * (self.B @ self.A)


def _check_rank(d_in: int, d_out: int, rank: int) -> None:
    if d_in < 1 or d_out < 1:
        raise LoraError(f"layer dims must be >= 1, got d_in={d_in}, d_out={d_out}")
    if rank > min(d_in, d_out):
        warnings.warn(
            f"LoRA rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}; the update is still valid but not low-rank",
            LoraRankWarning,
            stacklevel=3,
        )


def init_adapter(
    d_in: int,
    d_out: int,
    cfg: LoraConfig,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> LoraLayerState:
    _check_rank(d_in, d_out, cfg.rank)
    A = torch.randn(cfg.rank, d_in, generator=generator, dtype=dtype) / cfg.rank
    B = torch.zeros(d_out, cfg.rank, dtype=dtype)
    return LoraLayerState(A=A, B=B, scaling=cfg.scaling, dropout_p=cfg.dropout_p)


def _dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def adapted_forward(
    x: torch.Tensor,
    W0: torch.Tensor,
    bias: torch.Tensor | None,
    s: LoraLayerState,
    train_mode: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Base linear output plus the scaled low-rank update.

    When ``s.merged`` is set, ``W0`` is taken to already contain the update.
    """
    if x.shape[-1] != W0.shape[1]:
        raise LoraError(f"input has {x.shape[-1]} features, weight expects {W0.shape[1]}")
    if s.A.shape != (s.A.shape[0], W0.shape[1]) or s.B.shape != (W0.shape[0], s.A.shape[0]):
        raise LoraError(f"adapter shapes A{tuple(s.A.shape)} B{tuple(s.B.shape)} do not fit weight {tuple(W0.shape)}")
    y = F.linear(x, W0, bias)
    if s.merged:
        return y
    h = _dropout(x, s.dropout_p, generator) if train_mode else x
    return y + s.scaling * ((h @ s.A.T) @ s.B.T)


def merge(W0: torch.Tensor, s: LoraLayerState) -> torch.Tensor:
    if s.merged:
        raise LoraError("adapter is already merged")
    W = W0 + s.delta.to(W0.dtype)
    s.merged = True
    return W


def unmerge(W_merged: torch.Tensor, s: LoraLayerState) -> torch.Tensor:
    if not s.merged:
        raise LoraError("adapter is not merged")
    W = W_merged - s.delta.to(W_merged.dtype)
    s.merged = False
    return W


class LoraLinear(nn.Module):
    """``nn.Linear`` wrapper carrying a LoRA adapter; the wrapped layer is frozen."""

    def __init__(
        self,
        base: nn.Linear,
        cfg: LoraConfig,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.base = base
        self.rank = cfg.rank
        self.scaling = cfg.scaling
        state = init_adapter(base.in_features, base.out_features, cfg, generator, dtype=base.weight.dtype)
        self.lora_A = nn.Parameter(state.A)
        self.lora_B = nn.Parameter(state.B)
        self.lora_dropout = nn.Dropout(cfg.dropout_p) if cfg.dropout_p > 0 else nn.Identity()
        self.merged = False
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.merged:
            return y
        return y + self.scaling * F.linear(F.linear(self.lora_dropout(x), self.lora_A), self.lora_B)

    @torch.no_grad()
    def merge(self) -> None:
        if self.merged:
            raise LoraError("adapter is already merged")
        self.base.weight += self.scaling * (self.lora_B @ self.lora_A)
        self.merged = True

    @torch.no_grad()
    def unmerge(self) -> None:
        if not self.merged:
            raise LoraError("adapter is not merged")
        self.base.weight -= self.scaling * (self.lora_B @ self.lora_A)
        self.merged = False

    def extra_repr(self) -> str:
        return f"rank={self.rank}, scaling={self.scaling}"


def inject_lora(
    blocks: Sequence[nn.Module],
    cfg: LoraConfig,
    generator: torch.Generator | None = None,
) -> list[str]:
    """Wrap the attention projections of ``blocks`` in place.

    Each block must expose ``block.attn`` with either separate ``query``,
    ``key`` and ``value`` linears or a fused ``qkv`` linear. A fused layer is
    adapted as one matrix (rank ``r`` over the whole ``3d`` output) whenever
    any q/k/v target is requested. Returns the qualified names of wrapped layers.
    """
    wanted = range(len(blocks)) if cfg.blocks is None else cfg.blocks
    wrapped = []
    for i in wanted:
        if not 0 <= i < len(blocks):
            raise LoraError(f"block index {i} out of range for {len(blocks)} blocks")
        attn = blocks[i].attn
        if hasattr(attn, "qkv"):
            if isinstance(attn.qkv, LoraLinear):
                raise LoraError(f"block {i} already carries an adapter")
            attn.qkv = LoraLinear(attn.qkv, cfg, generator)
            wrapped.append(f"blocks.{i}.attn.qkv")
            continue
        for name in cfg.targets:
            layer = getattr(attn, name)
            if isinstance(layer, LoraLinear):
                raise LoraError(f"block {i} {name} already carries an adapter")
            setattr(attn, name, LoraLinear(layer, cfg, generator))
            wrapped.append(f"blocks.{i}.attn.{name}")
    return wrapped


def lora_layers(model: nn.Module) -> list[tuple[str, LoraLinear]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, LoraLinear)]


def is_trainable_name(name: str) -> bool:
    return ".lora_A" in name or ".lora_B" in name or name.startswith("lora_") or name.startswith("head.")


def freeze_base(model: nn.Module) -> nn.Module:
    """Leave only adapter factors and the classifier head (``head.*``) trainable."""
    for name, p in model.named_parameters():
        p.requires_grad_(is_trainable_name(name))
    return model


@dataclass
class ModelDescription:
    """Dimensions needed to count trainable parameters without building a model."""

    adapted_layers: list[tuple[int, int]] = field(default_factory=list)
    head_in: int = 0
    head_out: int = 1
    head_bias: bool = True

    @property
    def head_params(self) -> int:
        if self.head_in == 0:
            return 0
        return self.head_in * self.head_out + (self.head_out if self.head_bias else 0)


def describe_model(model: nn.Module) -> ModelDescription:
    desc = ModelDescription(adapted_layers=[(m.in_features, m.out_features) for _, m in lora_layers(model)])
    head = getattr(model, "head", None)
    if isinstance(head, nn.Linear):
        desc.head_in = head.in_features
        desc.head_out = head.out_features
        desc.head_bias = head.bias is not None
    return desc


def trainable_param_count(desc: ModelDescription, cfg: LoraConfig) -> int:
    """Sum of ``r * (d_in + d_out)`` over adapted layers plus head parameters."""
    return sum(cfg.rank * (d_in + d_out) for d_in, d_out in desc.adapted_layers) + desc.head_params


def frozen_checksum(model: nn.Module) -> str:
    """SHA-256 over every non-trainable parameter and buffer, in name order."""
    h = hashlib.sha256()
    tensors = dict(model.named_parameters())
    tensors.update(dict(model.named_buffers()))
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, nn.Parameter) and t.requires_grad:
            continue
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def adapter_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    """Only the trainable tensors (adapters + head); base weights are never exported."""
    return {n: p.detach().clone().contiguous() for n, p in model.named_parameters() if is_trainable_name(n)}


def load_adapter_state_dict(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    own = {n: p for n, p in model.named_parameters() if is_trainable_name(n)}
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise LoraError(f"adapter state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    with torch.no_grad():
        for n, p in own.items():
            if p.shape != state[n].shape:
                raise LoraError(f"{n}: shape {tuple(state[n].shape)} does not match {tuple(p.shape)}")
            p.copy_(state[n])


def merge_all(model: nn.Module) -> None:
    for _, m in lora_layers(model):
        m.merge()


def unmerge_all(model: nn.Module) -> None:
    for _, m in lora_layers(model):
        m.unmerge()


def iter_trainable(model: nn.Module) -> Iterable[nn.Parameter]:
    return (p for p in model.parameters() if p.requires_grad)
