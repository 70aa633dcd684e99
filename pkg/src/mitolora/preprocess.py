"""Crop-to-input conversion: pad or resize to the backbone size, augment, normalize.

Images are ``H x W x C`` float arrays in ``[0, 1]`` until :func:`to_tensor`
turns them into ``C x H x W`` torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class Strategy(str, Enum):
    PAD = "pad"
    RESIZE = "resize"


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    strategy: Strategy = Strategy.PAD
    target_size: int = 224
    # H&E background is near-white
    pad_fill: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if isinstance(self.pad_fill, (int, float)):
            object.__setattr__(self, "pad_fill", (float(self.pad_fill),) * 3)
        else:
            object.__setattr__(self, "pad_fill", tuple(float(v) for v in self.pad_fill))
        if self.target_size <= 0:
            raise PreprocessError(f"target_size must be positive, got {self.target_size}")
        if any(not 0.0 <= v <= 1.0 for v in self.pad_fill):
            raise PreprocessError(f"pad_fill values must lie in [0, 1], got {self.pad_fill}")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "target_size": self.target_size, "pad_fill": list(self.pad_fill)}


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    jitter_strength: float = 0.2
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range", tuple(float(v) for v in self.crop_scale_range))
        lo, hi = self.crop_scale_range
        if not 0.0 <= self.flip_prob <= 1.0:
            raise PreprocessError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.max_rotation_deg < 0:
            raise PreprocessError("max_rotation_deg must be non-negative")
        if not 0.0 <= self.jitter_strength <= 1.0:
            raise PreprocessError(f"jitter_strength must lie in [0, 1], got {self.jitter_strength}")
        if not (0.0 < lo <= hi <= 1.0):
            raise PreprocessError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(flip_prob=0.0, max_rotation_deg=0.0, jitter_strength=0.0, crop_scale_range=(1.0, 1.0), seed=seed)

    def to_dict(self) -> dict:
        return {
            "flip_prob": self.flip_prob,
            "max_rotation_deg": self.max_rotation_deg,
            "jitter_strength": self.jitter_strength,
            "crop_scale_range": list(self.crop_scale_range),
            "seed": self.seed,
        }


def load_image(path) -> np.ndarray:
    """Decode an 8-bit image file to an RGB float32 array in [0, 1]."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise PreprocessError(f"expected an H x W x C image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise PreprocessError(f"empty image of shape {img.shape}")
    return img


def pad_to_target(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Center ``img`` on a ``target x target`` canvas of ``pad_fill``; no resampling."""
    img = _check_image(img)
    h, w, c = img.shape
    t = cfg.target_size
    if h > t or w > t:
        raise PreprocessError(
            f"crop of {h}x{w} exceeds target {t}x{t}; padding cannot shrink, use the RESIZE strategy"
        )
    fill = np.asarray(cfg.pad_fill[:c] if len(cfg.pad_fill) >= c else cfg.pad_fill[:1] * c, dtype=img.dtype)
    out = np.empty((t, t, c), dtype=img.dtype)
    out[:] = fill
    top, left = (t - h) // 2, (t - w) // 2
    out[top : top + h, left : left + w] = img
    return out


def _bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == tuple(size):
        return img.copy()
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return y[0].permute(1, 2, 0).numpy().astype(img.dtype, copy=False)


def resize_to_target(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    img = _check_image(img)
    t = cfg.target_size
    return _bilinear(img, (t, t))


def apply_strategy(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    if cfg.strategy is Strategy.PAD:
        return pad_to_target(img, cfg)
    return resize_to_target(img, cfg)


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[2] < 3:
        return img.mean(axis=2, keepdims=True)
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])[..., None]


def _rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Bilinear rotation about the center, reflecting at the borders."""
    h, w, _ = img.shape
    t = np.deg2rad(angle_deg)
    cos, sin = np.cos(t), np.sin(t)
    # normalized coords: scale x/y so the rotation is isotropic in pixel space
    theta = torch.tensor(
        [[cos, -sin * h / w, 0.0], [sin * w / h, cos, 0.0]], dtype=torch.float32
    )[None]
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return y[0].permute(1, 2, 0).numpy()


def augment(img: np.ndarray, cfg: AugmentationConfig, rng_state=None) -> np.ndarray:
    """Random resized crop, horizontal flip, rotation and color jitter.

    ``rng_state`` may be a ``numpy.random.Generator`` or anything
    ``numpy.random.default_rng`` accepts; ``None`` falls back to ``cfg.seed``.
    Output shape always equals input shape.
    """
    img = _check_image(img)
    rng = np.random.default_rng(cfg.seed if rng_state is None else rng_state)
    h, w, _ = img.shape
    out = img

    lo, hi = cfg.crop_scale_range
    if lo < 1.0:
        scale = rng.uniform(lo, hi)
        ch = min(h, max(1, int(round(h * np.sqrt(scale)))))
        cw = min(w, max(1, int(round(w * np.sqrt(scale)))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        if (ch, cw) != (h, w):
            out = _bilinear(out[top : top + ch, left : left + cw], (h, w))

    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1]

    if cfg.max_rotation_deg > 0:
        angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
        out = _rotate(out, angle)

    j = cfg.jitter_strength
    if j > 0:
        brightness, contrast, saturation = rng.uniform(1 - j, 1 + j, size=3)
        out = out * brightness
        out = out.mean() + contrast * (out - out.mean())
        g = _gray(out)
        out = g + saturation * (out - g)
        out = np.clip(out, 0.0, 1.0)

    return np.ascontiguousarray(out, dtype=img.dtype)


def normalize(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise PreprocessError(f"normalization std must be positive per channel, got {std.tolist()}")
    return ((np.asarray(img, dtype=np.float64) - mean) / std).astype(np.asarray(img).dtype, copy=False)


def denormalize(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (np.asarray(img, dtype=np.float64) * std + mean).astype(np.asarray(img).dtype, copy=False)


@dataclass(frozen=True)
class InputPipeline:
    """Strategy + (train-only) augmentation + normalization, ending in a CHW tensor."""

    preprocess: PreprocessConfig
    mean: tuple[float, ...]
    std: tuple[float, ...]
    augmentation: AugmentationConfig | None = None
    train: bool = False

    @property
    def augmenting(self) -> bool:
        return self.train and self.augmentation is not None

    def __call__(self, img: np.ndarray, rng_state=None) -> torch.Tensor:
        return self.finish(apply_strategy(img, self.preprocess), rng_state)

    def finish(self, sized: np.ndarray, rng_state=None) -> torch.Tensor:
        """Augment (train only) and normalize an image already at target size."""
        x = augment(sized, self.augmentation, rng_state) if self.augmenting else sized
        return to_tensor(normalize(x, self.mean, self.std))


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).contiguous()
