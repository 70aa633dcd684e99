"""Annotation manifests: crop records, CSV I/O and class/domain tallies."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

NMF = 0
AMF = 1
LABEL_NAMES = {NMF: "NMF", AMF: "AMF"}

MANIFEST_COLUMNS = (
    "crop_id",
    "image_ref",
    "source_image_id",
    "label",
    "domain_id",
    "dataset_source",
)
SCHEMA_VERSION = 1

_LABEL_TOKENS = {"0": NMF, "1": AMF, "NMF": NMF, "AMF": AMF}


class ManifestError(ValueError):
    """Base class for manifest loading and validation errors."""


class ManifestFileNotFound(ManifestError, FileNotFoundError):
    pass


class ManifestColumnError(ManifestError):
    """Header is missing required columns or carries unknown ones."""


class ManifestLabelError(ManifestError):
    def __init__(self, row: int, value: str):
        self.row = row
        self.value = value
        super().__init__(f"row {row}: label {value!r} is not one of 0, 1, NMF, AMF")


class ManifestFieldError(ManifestError):
    def __init__(self, row: int, column: str, reason: str = "must be non-empty"):
        self.row = row
        self.column = column
        super().__init__(f"row {row}: {column} {reason}")


class DuplicateCropIdError(ManifestError):
    def __init__(self, crop_id: str, rows: Sequence[int]):
        self.crop_id = crop_id
        self.rows = tuple(rows)
        joined = " and ".join(str(r) for r in self.rows)
        super().__init__(f"duplicate crop_id {crop_id!r} on rows {joined}")


def parse_label(value) -> int:
    """Normalize ``0/1/NMF/AMF`` (int or string) to ``0/1``; raises ``KeyError`` otherwise."""
    if isinstance(value, bool):
        raise KeyError(value)
    if isinstance(value, int):
        if value in (NMF, AMF):
            return value
        raise KeyError(value)
    return _LABEL_TOKENS[str(value).strip().upper()]


@dataclass(frozen=True)
class CropRecord:
    crop_id: str
    image_ref: str
    source_image_id: str
    label: int
    domain_id: str
    dataset_source: str = ""

    def __post_init__(self):
        for name in ("crop_id", "source_image_id", "domain_id"):
            if not getattr(self, name):
                raise ManifestFieldError(-1, name)
        if self.label not in (NMF, AMF):
            raise ManifestLabelError(-1, str(self.label))


@dataclass(frozen=True)
class Manifest:
    records: tuple[CropRecord, ...] = ()
    schema_version: int = SCHEMA_VERSION
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            if rec.crop_id in seen:
                raise DuplicateCropIdError(rec.crop_id, (seen[rec.crop_id], i))
            seen[rec.crop_id] = i

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.records]

    def image_ids(self) -> list[str]:
        """Distinct source image ids in first-appearance order."""
        return list(dict.fromkeys(r.source_image_id for r in self.records))

    def subset(self, keep: Iterable[str]) -> "Manifest":
        """Records whose source_image_id is in ``keep``, order preserved."""
        keep = set(keep)
        return Manifest(
            tuple(r for r in self.records if r.source_image_id in keep),
            self.schema_version,
            self.root,
        )

    def resolve(self, rec: CropRecord) -> Path:
        p = Path(rec.image_ref)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def require_both_labels(self) -> None:
        counts = class_counts(self)
        missing = [k for k, v in counts.items() if v == 0]
        if missing:
            raise ManifestError(f"manifest has no {', '.join(missing)} records; training needs both classes")


def load_manifest(path) -> Manifest:
    """Read and validate a manifest CSV.

    Row indices in error messages are 1-based data rows (header excluded).
    Relative ``image_ref`` values resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestFileNotFound(f"manifest not found: {path}")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestColumnError(f"{path}: empty file, expected header {','.join(MANIFEST_COLUMNS)}")
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        unknown = [c for c in header if c not in MANIFEST_COLUMNS]
        if missing or unknown:
            parts = []
            if missing:
                parts.append(f"missing columns {missing}")
            if unknown:
                parts.append(f"unknown columns {unknown}")
            raise ManifestColumnError(f"{path}: " + "; ".join(parts))
        idx = {c: header.index(c) for c in MANIFEST_COLUMNS}

        records: list[CropRecord] = []
        first_row: dict[str, int] = {}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ManifestFieldError(row_no, "row", f"has {len(row)} fields, expected {len(header)}")
            values = {c: row[i].strip() for c, i in idx.items()}
            try:
                label = parse_label(values["label"])
            except KeyError:
                raise ManifestLabelError(row_no, values["label"]) from None
            for name in ("crop_id", "source_image_id", "domain_id"):
                if not values[name]:
                    raise ManifestFieldError(row_no, name)
            cid = values["crop_id"]
            if cid in first_row:
                raise DuplicateCropIdError(cid, (first_row[cid], row_no))
            first_row[cid] = row_no
            records.append(
                CropRecord(
                    crop_id=cid,
                    image_ref=values["image_ref"],
                    source_image_id=values["source_image_id"],
                    label=label,
                    domain_id=values["domain_id"],
                    dataset_source=values["dataset_source"],
                )
            )
    return Manifest(tuple(records), SCHEMA_VERSION, path.parent)


def write_manifest(m: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in m.records:
            writer.writerow([r.crop_id, r.image_ref, r.source_image_id, r.label, r.domain_id, r.dataset_source])
    return path


def class_counts(m: Manifest) -> dict[str, int]:
    tally = Counter(r.label for r in m.records)
    return {"NMF": tally.get(NMF, 0), "AMF": tally.get(AMF, 0)}


def domain_counts(m: Manifest) -> dict[str, int]:
    return dict(Counter(r.domain_id for r in m.records))
