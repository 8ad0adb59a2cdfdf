"""Assemble the augmented training set: base annotations plus accepted pseudo-labels."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Sequence

from cooclabel.dataset import AnnotatedDataset, GroundTruthBox, ImageRecord, clamp_box
from cooclabel.errors import MergeError
from cooclabel.pseudolabel import PseudoLabel

ID_POLICIES = ("auto", "remap", "keep")


@dataclass(frozen=True)
class MergePlan:
    """What to merge.

    ``id_policy``: ``keep`` refuses colliding image ids, ``remap`` renumbers
    every unlabeled image above the base maximum, ``auto`` renumbers only
    when some id collides.
    """

    base: AnnotatedDataset
    unlabeled_images: tuple[ImageRecord, ...]
    labels: tuple[PseudoLabel, ...]
    id_policy: str = "auto"
    label_category_ids: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "unlabeled_images", tuple(self.unlabeled_images))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.id_policy not in ID_POLICIES:
            raise ValueError(f"id_policy must be one of {ID_POLICIES}")


@dataclass
class MergeReport:
    batch: str
    per_source: dict[str, int]
    per_class: dict[int, dict[str, int]]
    images_added: int
    images_excluded: list[int] = field(default_factory=list)
    remapped: dict[int, int] = field(default_factory=dict)
    clamped: list[int] = field(default_factory=list)

    def pseudo_per_class(self) -> dict[int, int]:
        return {cid: c["pseudo"] for cid, c in self.per_class.items()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch": self.batch,
            "per_source": self.per_source,
            "per_class": {str(cid): c for cid, c in self.per_class.items()},
            "images_added": self.images_added,
            "images_excluded": self.images_excluded,
            "remapped": {str(k): v for k, v in self.remapped.items()},
            "clamped": self.clamped,
        }


def batch_fingerprint(labels: Sequence[PseudoLabel]) -> str:
    """Order-independent hash of a label batch, used to refuse double merges."""
    rows = sorted(
        [lb.image_id, lb.bbox.as_list(), lb.category, lb.confidence, lb.sigma_used, lb.source_tag]
        for lb in labels
    )
    return hashlib.sha256(json.dumps(rows, separators=(",", ":")).encode()).hexdigest()[:16]


def _assign_image_ids(plan: MergePlan) -> dict[int, int]:
    ids = [im.id for im in plan.unlabeled_images]
    dupes = sorted(i for i, c in Counter(ids).items() if c > 1)
    if dupes:
        raise MergeError(f"unlabeled image ids repeat: {dupes}; cannot tell which labels belong where")
    base_ids = set(plan.base.image_by_id)
    collisions = sorted(set(ids) & base_ids)
    if plan.id_policy == "keep" and collisions:
        raise MergeError(f"unlabeled image ids collide with base ids: {collisions}")
    if plan.id_policy == "remap" or (plan.id_policy == "auto" and collisions):
        start = max(base_ids | set(ids), default=0) + 1
        return {old: start + k for k, old in enumerate(ids)}
    return {old: old for old in ids}


def merge(plan: MergePlan, include_empty_images: bool = True) -> tuple[AnnotatedDataset, MergeReport]:
    base = plan.base
    if plan.label_category_ids is not None and tuple(plan.label_category_ids) != base.category_ids:
        raise MergeError(
            f"labels use category ids {list(plan.label_category_ids)}, base has {list(base.category_ids)}"
        )
    batch = batch_fingerprint(plan.labels)
    for ann in base.annotations:
        if ann.provenance is not None and ann.provenance.get("batch") == batch:
            raise MergeError(f"label batch {batch} is already merged into the base dataset")

    new_ids = _assign_image_ids(plan)
    unlabeled = {im.id: im for im in plan.unlabeled_images}
    next_ann = max((a.id for a in base.annotations), default=0) + 1
    report = MergeReport(
        batch=batch,
        per_source={"human": len(base.annotations), "pseudo": 0},
        per_class={cid: {"human": 0, "pseudo": 0} for cid in base.category_ids},
        images_added=0,
        remapped={old: new for old, new in new_ids.items() if old != new},
    )
    for ann in base.annotations:
        report.per_class[ann.category_id]["human"] += 1

    pseudo = []
    labelled_images = set()
    for lb in plan.labels:
        image = unlabeled.get(lb.image_id)
        if image is None:
            raise MergeError(f"pseudo-label (detection {lb.detection_index}) references unknown image {lb.image_id}")
        if not 0 <= lb.category < base.n_classes:
            raise MergeError(f"pseudo-label class index {lb.category} out of range")
        box, changed = clamp_box(lb.bbox.as_list(), image.width, image.height)
        if box is None:
            raise MergeError(f"pseudo-label on image {lb.image_id} lies outside the image")
        if changed:
            report.clamped.append(next_ann)
        category_id = base.category_ids[lb.category]
        provenance = {
            "batch": batch,
            "source_tag": lb.source_tag,
            "rule": lb.rule,
            "confidence": lb.confidence,
            "sigma_used": lb.sigma_used,
            "detection_index": lb.detection_index,
            "config": lb.config.to_dict(),
        }
        pseudo.append(GroundTruthBox(next_ann, new_ids[lb.image_id], category_id, box, provenance))
        labelled_images.add(lb.image_id)
        report.per_class[category_id]["pseudo"] += 1
        next_ann += 1
    report.per_source["pseudo"] = len(pseudo)

    images = list(base.images)
    for im in plan.unlabeled_images:
        if include_empty_images or im.id in labelled_images:
            images.append(ImageRecord(new_ids[im.id], im.width, im.height, im.file_name))
            report.images_added += 1
        else:
            report.images_excluded.append(im.id)
    merged = AnnotatedDataset(images, base.categories, list(base.annotations) + pseudo)
    return merged, report
