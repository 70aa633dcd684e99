"""K-fold cross-validation plans at source-image granularity.

Two strategies: RANDOM shuffles images across folds, GROUP keeps every image
of a domain inside a single fold (domain-held-out validation).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .manifest import AMF, Manifest

PLAN_FORMAT_VERSION = 1


class SplitStrategy(str, Enum):
    RANDOM = "random"
    GROUP = "group"


class SplitError(ValueError):
    pass


class PlanMismatchError(SplitError):
    """Plan and manifest do not cover the same set of source images."""


@dataclass(frozen=True)
class SplitPlan:
    strategy: SplitStrategy
    k: int
    assignment: Mapping[str, int]
    seed: int
    domain_of: Mapping[str, str]
    stratified: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", SplitStrategy(self.strategy))
        object.__setattr__(self, "assignment", dict(self.assignment))
        object.__setattr__(self, "domain_of", dict(self.domain_of))
        if self.k < 2:
            raise SplitError(f"k must be >= 2, got {self.k}")
        bad = {i: f for i, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise SplitError(f"fold indices outside [0, {self.k}): {bad}")

    def fold_images(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes

    def fold_pairs(self) -> list[tuple[list[str], list[str]]]:
        """The k (train_images, validation_images) pairs; pair j holds out fold j."""
        pairs = []
        for j in range(self.k):
            val = self.fold_images(j)
            train = sorted(i for i, f in self.assignment.items() if f != j)
            pairs.append((train, val))
        return pairs

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "strategy": self.strategy.value,
            "k": self.k,
            "seed": self.seed,
            "stratified": self.stratified,
            "assignment": [
                {"source_image_id": i, "fold": self.assignment[i], "domain_id": self.domain_of.get(i, "")}
                for i in sorted(self.assignment)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        version = d.get("format_version")
        if version != PLAN_FORMAT_VERSION:
            raise SplitError(f"unsupported split plan format_version {version!r}")
        rows = d["assignment"]
        return cls(
            strategy=SplitStrategy(d["strategy"]),
            k=int(d["k"]),
            assignment={r["source_image_id"]: int(r["fold"]) for r in rows},
            seed=int(d["seed"]),
            domain_of={r["source_image_id"]: r["domain_id"] for r in rows},
            stratified=bool(d.get("stratified", False)),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def save_plan(plan: SplitPlan, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_plan(path) -> SplitPlan:
    return SplitPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _image_domains(m: Manifest) -> dict[str, str]:
    """Map each source image to its domain; an image must not straddle domains."""
    out: dict[str, str] = {}
    for r in m.records:
        prev = out.setdefault(r.source_image_id, r.domain_id)
        if prev != r.domain_id:
            raise SplitError(
                f"source image {r.source_image_id!r} has crops in domains {prev!r} and {r.domain_id!r}"
            )
    return out


def random_kfold(m: Manifest, k: int = 3, seed: int = 0, stratify: bool = False) -> SplitPlan:
    """Shuffle source images and deal them round-robin into ``k`` folds.

    Fold sizes differ by at most one image. With ``stratify`` the deal runs
    over images containing an AMF crop first, then the rest, continuing the
    round-robin so the size guarantee still holds.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    domain_of = _image_domains(m)
    images = sorted(domain_of)
    if len(images) < k:
        raise SplitError(f"{len(images)} source images cannot fill {k} folds")
    rng = np.random.default_rng(seed)

    if stratify:
        has_amf = {r.source_image_id for r in m.records if r.label == AMF}
        strata = [[i for i in images if i in has_amf], [i for i in images if i not in has_amf]]
    else:
        strata = [images]

    order: list[str] = []
    for stratum in strata:
        order.extend(stratum[p] for p in rng.permutation(len(stratum)))
    assignment = {img: pos % k for pos, img in enumerate(order)}
    return SplitPlan(SplitStrategy.RANDOM, k, assignment, seed, domain_of, stratified=stratify)


def group_kfold(m: Manifest, k: int = 3, seed: int = 0) -> SplitPlan:
    """Assign whole domains to folds, largest first, each to the currently smallest fold.

    Sizes are source-image counts. Equal-size domains are ordered by a
    seeded shuffle; equal-size folds resolve to the lowest index.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    domain_of = _image_domains(m)
    sizes: dict[str, int] = {}
    for img, d in domain_of.items():
        sizes[d] = sizes.get(d, 0) + 1
    if len(sizes) < k:
        raise SplitError(f"{len(sizes)} domains cannot fill {k} folds under the group strategy")

    rng = np.random.default_rng(seed)
    domains = sorted(sizes)
    tiebreak = dict(zip(domains, rng.permutation(len(domains)).tolist()))
    domains.sort(key=lambda d: (-sizes[d], tiebreak[d]))

    load = [0] * k
    fold_of_domain: dict[str, int] = {}
    for d in domains:
        f = min(range(k), key=lambda j: (load[j], j))
        fold_of_domain[d] = f
        load[f] += sizes[d]
    assignment = {img: fold_of_domain[d] for img, d in domain_of.items()}
    return SplitPlan(SplitStrategy.GROUP, k, assignment, seed, domain_of)


@dataclass
class LeakageAudit:
    image_violations: list[dict] = field(default_factory=list)
    domain_violations: list[dict] = field(default_factory=list)

    @property
    def n_violations(self) -> int:
        return len(self.image_violations) + len(self.domain_violations)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "image_violations": self.image_violations,
            "domain_violations": self.domain_violations,
        }


def crop_folds(plan: SplitPlan, m: Manifest) -> dict[str, int]:
    """Expand the image-level plan to crop_id -> fold."""
    return {r.crop_id: plan.assignment[r.source_image_id] for r in m.records}


def verify_no_leakage(
    plan: SplitPlan,
    m: Manifest,
    crop_assignment: Mapping[str, int] | None = None,
) -> LeakageAudit:
    """Audit a plan against a manifest.

    ``crop_assignment`` optionally supplies the fold each crop actually landed
    in (e.g. reconstructed from a training run); by default it is derived
    from ``plan``. Raises :class:`PlanMismatchError` when the plan does not
    cover exactly the manifest's source images.
    """
    images = set(m.image_ids())
    planned = set(plan.assignment)
    missing = sorted(images - planned)
    extra = sorted(planned - images)
    if missing or extra:
        raise PlanMismatchError(f"plan/manifest mismatch: missing {missing[:10]}, unknown {extra[:10]}")

    audit = LeakageAudit()
    if crop_assignment is None:
        crop_assignment = crop_folds(plan, m)
    else:
        absent = [r.crop_id for r in m.records if r.crop_id not in crop_assignment]
        if absent:
            raise PlanMismatchError(f"crop assignment lacks {len(absent)} crops, e.g. {absent[:5]}")

    folds_of_image: dict[str, set[int]] = {}
    for r in m.records:
        folds_of_image.setdefault(r.source_image_id, set()).add(int(crop_assignment[r.crop_id]))
    for img in sorted(folds_of_image):
        if len(folds_of_image[img]) > 1:
            audit.image_violations.append({"source_image_id": img, "folds": sorted(folds_of_image[img])})

    if plan.strategy is SplitStrategy.GROUP:
        folds_of_domain: dict[str, set[int]] = {}
        for r in m.records:
            folds_of_domain.setdefault(r.domain_id, set()).add(int(crop_assignment[r.crop_id]))
        for d in sorted(folds_of_domain):
            if len(folds_of_domain[d]) > 1:
                audit.domain_violations.append({"domain_id": d, "folds": sorted(folds_of_domain[d])})
    return audit
