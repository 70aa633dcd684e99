"""Per-fold training: balanced sampling, BCE-with-logits, plateau LR, early stopping."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import WeightedRandomSampler

from .lora import LoraConfig, adapter_state_dict, load_adapter_state_dict
from .manifest import AMF, NMF, Manifest
from .metrics import confusion_at_threshold, sensitivity, specificity, balanced_accuracy_from_rates, roc_auc
from .model_zoo import AMFClassifier, build_model, forward_logit, get_backbone
from .preprocess import AugmentationConfig, InputPipeline, PreprocessConfig, apply_strategy, load_image

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
VALIDATION_THRESHOLD = 0.5


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    sched_factor: float = 0.5
    sched_patience: int = 3
    early_stop_patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    eval_batch_size: int = 32

    def __post_init__(self):
        if not (self.lr > 0 and self.weight_decay >= 0 and self.batch_size > 0 and self.eval_batch_size > 0):
            raise TrainingError("lr and batch sizes must be positive, weight_decay non-negative")
        if not 0 < self.sched_factor < 1:
            raise TrainingError(f"sched_factor must lie in (0, 1), got {self.sched_factor}")
        if self.sched_patience < 1 or self.early_stop_patience < 1:
            raise TrainingError("patience values must be positive")
        if self.sched_patience >= self.early_stop_patience:
            raise TrainingError("sched_patience must be smaller than early_stop_patience")
        if self.max_epochs < 0:
            raise TrainingError("max_epochs must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# sampling and loss


def compute_sample_weights(labels) -> np.ndarray:
    """Inverse class frequency per sample: ``1 / count(label(i))``.

    Accepts a :class:`Manifest` or a label sequence.
    """
    if isinstance(labels, Manifest):
        labels = labels.labels
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(y == AMF))
    n_neg = int(np.sum(y == NMF))
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("weighted sampling needs both AMF and NMF samples in the training subset")
    return np.where(y == AMF, 1.0 / n_pos, 1.0 / n_neg)


def balanced_indices(weights: np.ndarray, num_samples: int, generator: torch.Generator) -> list[int]:
    sampler = WeightedRandomSampler(
        torch.as_tensor(weights, dtype=torch.double), num_samples, replacement=True, generator=generator
    )
    return list(sampler)


def bce_with_logits_loss(logits, labels) -> torch.Tensor:
    """Mean of ``log(1 + exp(-(2y-1) z))`` as ``max(z,0) - z y + log1p(exp(-|z|))``."""
    z = torch.as_tensor(logits)
    y = torch.as_tensor(labels, dtype=z.dtype)
    return (z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))).mean()


# ---------------------------------------------------------------------------
# scheduler / early stopping


@dataclass(frozen=True)
class PlateauState:
    lr: float
    best: float = -math.inf
    stale: int = 0
    reductions: int = 0


def lr_plateau_step(state: PlateauState, val_metric: float, factor: float = 0.5, patience: int = 3) -> PlateauState:
    """Maximize-mode plateau rule: ``patience`` stale epochs in a row scale lr by ``factor``."""
    if val_metric > state.best:
        return PlateauState(state.lr, val_metric, 0, state.reductions)
    stale = state.stale + 1
    if stale >= patience:
        return PlateauState(state.lr * factor, state.best, 0, state.reductions + 1)
    return PlateauState(state.lr, state.best, stale, state.reductions)


@dataclass(frozen=True)
class EarlyStopState:
    best_metric: float = -math.inf
    epochs_since_improve: int = 0
    best_epoch: int | None = None


def early_stop_update(
    state: EarlyStopState, val_metric: float, patience: int = 10, epoch: int | None = None
) -> tuple[EarlyStopState, bool]:
    if val_metric > state.best_metric:
        return EarlyStopState(val_metric, 0, epoch), False
    new = EarlyStopState(state.best_metric, state.epochs_since_improve + 1, state.best_epoch)
    return new, new.epochs_since_improve >= patience


# ---------------------------------------------------------------------------
# data


class CropDataset:
    """Manifest records run through an input pipeline.

    The deterministic part (decode + pad/resize) is cached per crop; without
    augmentation the finished tensor is cached as well.
    """

    def __init__(self, manifest: Manifest, pipeline: InputPipeline):
        self.manifest = manifest
        self.records = list(manifest.records)
        self.pipeline = pipeline
        self._sized: dict[int, np.ndarray] = {}
        self._ready: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([r.label for r in self.records], dtype=np.int64)

    @property
    def crop_ids(self) -> list[str]:
        return [r.crop_id for r in self.records]

    def sized_image(self, i: int) -> np.ndarray:
        if i not in self._sized:
            img = load_image(self.manifest.resolve(self.records[i]))
            self._sized[i] = apply_strategy(img, self.pipeline.preprocess)
        return self._sized[i]

    def item(self, i: int, rng_key=None) -> torch.Tensor:
        if self.pipeline.augmenting:
            return self.pipeline.finish(self.sized_image(i), rng_key)
        if i not in self._ready:
            self._ready[i] = self.pipeline.finish(self.sized_image(i))
        return self._ready[i]

    def batch(self, indices: Sequence[int], rng_keys: Sequence | None = None) -> torch.Tensor:
        if rng_keys is None:
            rng_keys = [None] * len(indices)
        return torch.stack([self.item(i, key) for i, key in zip(indices, rng_keys)])


def make_pipelines(
    spec_name: str,
    preprocess: PreprocessConfig,
    augmentation: AugmentationConfig | None,
) -> tuple[InputPipeline, InputPipeline]:
    spec = get_backbone(spec_name)
    if preprocess.target_size != spec.input_size:
        raise TrainingError(f"{spec_name} expects {spec.input_size}px inputs, preprocess targets {preprocess.target_size}")
    train = InputPipeline(preprocess, spec.norm_mean, spec.norm_std, augmentation, train=True)
    val = InputPipeline(preprocess, spec.norm_mean, spec.norm_std, None, train=False)
    return train, val


@torch.no_grad()
def predict_probs(model: AMFClassifier, ds: CropDataset, batch_size: int = 32) -> np.ndarray:
    if ds.pipeline.augmenting:
        raise TrainingError("evaluation datasets must not augment")
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(ds), batch_size):
        idx = range(start, min(start + batch_size, len(ds)))
        out.append(torch.sigmoid(forward_logit(model, ds.batch(idx))).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def validation_metrics(probs: np.ndarray, labels: np.ndarray, threshold: float = VALIDATION_THRESHOLD) -> dict:
    c = confusion_at_threshold(probs, labels, threshold)
    sens, spec = sensitivity(c), specificity(c)
    return {
        "balanced_accuracy": balanced_accuracy_from_rates(sens, spec),
        "sensitivity": sens,
        "specificity": spec,
        "roc_auc": roc_auc(probs, labels),
    }


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    fold: int | None
    backbone: str
    feature_mode: str
    lora: LoraConfig | None
    train_config: TrainConfig
    preprocess: dict
    adapter_state: dict[str, torch.Tensor]
    best_metrics: dict
    epoch: int
    model_seed: int = 0
    split_plan_digest: str | None = None
    history: list[dict] = field(default_factory=list)
    consumed_crop_ids: set[str] = field(default_factory=set, repr=False)
    consumed_digest: str = ""

    def metadata(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "fold": self.fold,
            "backbone": self.backbone,
            "feature_mode": self.feature_mode,
            "lora": None if self.lora is None else self.lora.to_dict(),
            "train_config": self.train_config.to_dict(),
            "preprocess": self.preprocess,
            "best_metrics": self.best_metrics,
            "epoch": self.epoch,
            "model_seed": self.model_seed,
            "split_plan_digest": self.split_plan_digest,
            "consumed_digest": self.consumed_digest,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    from safetensors.torch import save_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.contiguous() for k, v in ckpt.adapter_state.items()}
    # single metadata key keeps the header byte-stable
    save_file(tensors, str(path), metadata={"mitolora": json.dumps(ckpt.metadata(), sort_keys=True)})
    return path


def load_checkpoint(path) -> Checkpoint:
    from safetensors import safe_open

    path = Path(path)
    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads((fh.metadata() or {})["mitolora"])
        tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint format_version {meta.get('format_version')!r}")
    return Checkpoint(
        fold=meta["fold"],
        backbone=meta["backbone"],
        feature_mode=meta["feature_mode"],
        lora=None if meta["lora"] is None else LoraConfig.from_dict(meta["lora"]),
        train_config=TrainConfig(**meta["train_config"]),
        preprocess=meta["preprocess"],
        adapter_state=tensors,
        best_metrics=meta["best_metrics"],
        epoch=meta["epoch"],
        model_seed=meta["model_seed"],
        split_plan_digest=meta["split_plan_digest"],
        consumed_digest=meta.get("consumed_digest", ""),
    )


def model_from_checkpoint(ckpt: Checkpoint, weights_path=None) -> AMFClassifier:
    spec = get_backbone(ckpt.backbone).with_feature_mode(ckpt.feature_mode)
    model = build_model(spec, ckpt.lora, weights_path=weights_path, seed=ckpt.model_seed)
    load_adapter_state_dict(model, ckpt.adapter_state)
    model.eval()
    return model


def preprocess_from_checkpoint(ckpt: Checkpoint) -> PreprocessConfig:
    p = ckpt.preprocess
    return PreprocessConfig(strategy=p["strategy"], target_size=p["target_size"], pad_fill=tuple(p["pad_fill"]))


def _ids_digest(ids) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


# ---------------------------------------------------------------------------
# training loop


def fit(
    model: AMFClassifier,
    train_set: CropDataset,
    val_set: CropDataset,
    cfg: TrainConfig,
    log_path=None,
    fold: int | None = None,
    split_plan_digest: str | None = None,
    model_seed: int = 0,
) -> Checkpoint:
    """Train adapters + head on ``train_set``; keep the best validation-BAC state.

    Validation BAC uses the fixed 0.5 threshold. Each epoch draws
    ``len(train_set)`` indices with replacement from the class-balanced
    sampler. Per-epoch records go to ``log_path`` as JSON lines.
    """
    overlap = set(train_set.crop_ids) & set(val_set.crop_ids)
    if overlap:
        raise TrainingError(f"{len(overlap)} crops appear in both train and validation sets, e.g. {sorted(overlap)[:3]}")
    if val_set.pipeline.augmenting:
        raise TrainingError("validation pipeline must not augment")
    val_labels = val_set.labels
    if len(set(val_labels.tolist())) < 2:
        raise TrainingError("validation set needs both classes to compute balanced accuracy")

    torch.manual_seed(cfg.seed)
    sampler_gen = torch.Generator().manual_seed(cfg.seed)
    weights = compute_sample_weights(train_set.labels)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay) if params else None

    plateau = PlateauState(lr=cfg.lr)
    stopper = EarlyStopState()
    history: list[dict] = []
    consumed: set[str] = set()
    best_state = adapter_state_dict(model)
    best_metrics = validation_metrics(predict_probs(model, val_set, cfg.eval_batch_size), val_labels)
    best_epoch = 0
    aug_seed = train_set.pipeline.augmentation.seed if train_set.pipeline.augmentation else 0

    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_fh = log_path.open("w", encoding="utf-8")
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            order = balanced_indices(weights, len(train_set), sampler_gen)
            total, n_seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                keys = [(aug_seed, cfg.seed, epoch, start + j) for j in range(len(idx))]
                x = train_set.batch(idx, keys)
                y = torch.as_tensor(train_set.labels[idx], dtype=torch.float32)
                consumed.update(train_set.records[i].crop_id for i in idx)
                loss = bce_with_logits_loss(forward_logit(model, x), y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start} (lr={plateau.lr:g})"
                    )
                if opt is not None:
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                total += loss.item() * len(idx)
                n_seen += len(idx)

            metrics = validation_metrics(predict_probs(model, val_set, cfg.eval_batch_size), val_labels)
            bac = metrics["balanced_accuracy"]
            record = {"epoch": epoch, "loss": total / max(n_seen, 1), "lr": plateau.lr, **{f"val_{k}": v for k, v in metrics.items()}}

            stopper, stop = early_stop_update(stopper, bac, cfg.early_stop_patience, epoch)
            if stopper.best_epoch == epoch:
                best_state = adapter_state_dict(model)
                best_metrics = metrics
                best_epoch = epoch
            plateau = lr_plateau_step(plateau, bac, cfg.sched_factor, cfg.sched_patience)
            if opt is not None:
                for g in opt.param_groups:
                    g["lr"] = plateau.lr
            record["best_epoch"] = best_epoch
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("fold %s epoch %d loss %.4f val BAC %.4f lr %.2e", fold, epoch, record["loss"], bac, record["lr"])
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    load_adapter_state_dict(model, best_state)
    spec = model.spec
    return Checkpoint(
        fold=fold,
        backbone=spec.name,
        feature_mode=spec.feature_mode.value,
        lora=model.lora_cfg,
        train_config=cfg,
        preprocess=train_set.pipeline.preprocess.to_dict(),
        adapter_state=copy.deepcopy(best_state),
        best_metrics=best_metrics,
        epoch=best_epoch,
        model_seed=model_seed,
        split_plan_digest=split_plan_digest,
        history=history,
        consumed_crop_ids=consumed,
        consumed_digest=_ids_digest(consumed),
    )
