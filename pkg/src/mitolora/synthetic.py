"""Desk-scale stand-in for the mitotic-figure crop datasets.

Each crop is a small pink "tissue" patch with a dark blob whose hue encodes
the class (blue-violet for NMF, red-brown for AMF), so the task is separable
by color. Crops come in groups per source image, and each source image
belongs to one domain with its own brightness offset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import AMF, NMF, CropRecord, Manifest, write_manifest

_BACKGROUND = np.array([0.92, 0.76, 0.86])
_BLOB = {NMF: np.array([0.25, 0.20, 0.62]), AMF: np.array([0.62, 0.18, 0.16])}
_SOURCES = ("AMi-Br", "MIDOG25", "OMG-Octo")


def render_crop(label: int, size: tuple[int, int], rng: np.random.Generator, brightness: float = 0.0) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    cy = h / 2 + rng.uniform(-0.1, 0.1) * h
    cx = w / 2 + rng.uniform(-0.1, 0.1) * w
    r = min(h, w) * rng.uniform(0.22, 0.34)
    inside = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
    img = np.empty((h, w, 3))
    img[:] = _BACKGROUND
    img[inside] = _BLOB[label]
    img += rng.normal(0.0, 0.03, size=img.shape) + brightness
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(
    out_dir,
    n_crops: int = 200,
    n_domains: int = 4,
    crops_per_image: tuple[int, int] = (2, 5),
    amf_fraction: float = 0.3,
    size_range: tuple[int, int] = (40, 96),
    seed: int = 0,
) -> Manifest:
    """Write PNG crops plus ``manifest.csv`` under ``out_dir`` and return the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    offsets = np.linspace(-0.05, 0.05, n_domains) if n_domains > 1 else np.zeros(1)

    records = []
    image_no = 0
    while len(records) < n_crops:
        domain = image_no % n_domains
        n_here = min(int(rng.integers(crops_per_image[0], crops_per_image[1] + 1)), n_crops - len(records))
        source_image_id = f"img{image_no:04d}"
        for _ in range(n_here):
            idx = len(records)
            label = AMF if rng.random() < amf_fraction else NMF
            size = tuple(int(v) for v in rng.integers(size_range[0], size_range[1] + 1, size=2))
            arr = render_crop(label, size, rng, offsets[domain])
            rel = f"crops/crop{idx:05d}.png"
            Image.fromarray((arr * 255).round().astype(np.uint8)).save(out_dir / rel)
            records.append(
                CropRecord(
                    crop_id=f"crop{idx:05d}",
                    image_ref=rel,
                    source_image_id=source_image_id,
                    label=label,
                    domain_id=f"domain{domain}",
                    dataset_source=_SOURCES[domain % len(_SOURCES)],
                )
            )
        image_no += 1
    m = Manifest(tuple(records), root=out_dir)
    write_manifest(m, out_dir / "manifest.csv")
    return m


def statistics_manifest(n_nmf: int = 10191, n_amf: int = 1748, n_images: int = 454, n_domains: int = 9, seed: int = 0) -> Manifest:
    """Label/domain skeleton with the dataset's published counts (no pixels)."""
    rng = np.random.default_rng(seed)
    labels = np.array([NMF] * n_nmf + [AMF] * n_amf)
    rng.shuffle(labels)
    image_of = np.sort(np.concatenate([np.arange(n_images), rng.integers(0, n_images, len(labels) - n_images)]))
    return Manifest(
        tuple(
            CropRecord(
                crop_id=f"c{i:06d}",
                image_ref=f"crops/c{i:06d}.png",
                source_image_id=f"img{image_of[i]:04d}",
                label=int(labels[i]),
                domain_id=f"domain{image_of[i] % n_domains}",
                dataset_source=_SOURCES[image_of[i] % len(_SOURCES)],
            )
            for i in range(len(labels))
        )
    )
