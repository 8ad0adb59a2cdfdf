"""In-memory data model and JSON I/O for annotated datasets and detections.

Annotation files use a subset of the COCO layout::

    {"images": [{"id", "width", "height", "file_name"}],
     "categories": [{"id", "name"}],
     "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h]}]}

Pseudo-label annotations carry an extra ``pseudo_label`` object with their
provenance. Detection files are either a bare JSON array of records or an
object ``{"category_ids", "source_tag", "detections": [...]}``. A record holds
``image_id``, ``bbox`` and exactly one of ``scores`` (probability vector),
``logits`` (raw class responses) or ``category_id`` + ``score`` (COCO results
format). Vector position ``k`` always refers to the ``k``-th smallest
category id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

from cooclabel.errors import ParseError, ReferenceMismatchError, ValidationError

logger = logging.getLogger(__name__)

# Boxes may overshoot the image edge by this much (float round-off after clamping).
BOUNDS_EPS = 1e-9
SCORE_SUM_TOL = 1e-6

_TOP_LEVEL_KEYS = {"images", "categories", "annotations", "category_ids"}
_IMAGE_KEYS = {"id", "width", "height", "file_name"}
_CATEGORY_KEYS = {"id", "name"}
_ANNOTATION_KEYS = {"id", "image_id", "category_id", "bbox", "pseudo_label"}
_DETECTION_KEYS = {"image_id", "bbox", "scores", "logits", "category_id", "score"}


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, ``(x, y)`` is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValidationError(f"non-finite box {self.as_list()}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box must have positive size, got {self.as_list()}")
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"box origin must be non-negative, got {self.as_list()}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def fits(self, width: float, height: float) -> bool:
        return self.x2 <= width + BOUNDS_EPS and self.y2 <= height + BOUNDS_EPS


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str = ""

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.id}: width and height must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "width": self.width, "height": self.height, "file_name": self.file_name}


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotation. ``provenance`` is set only for machine-generated labels."""

    id: int
    image_id: int
    category_id: int
    bbox: BBox
    provenance: dict[str, Any] | None = None

    @property
    def is_pseudo(self) -> bool:
        return self.provenance is not None

    def to_dict(self, strict_coco: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "image_id": self.image_id,
            "category_id": self.category_id,
            "bbox": self.bbox.as_list(),
        }
        if self.provenance is not None and not strict_coco:
            out["pseudo_label"] = self.provenance
        return out


@dataclass
class LoadReport:
    """What a loader changed or skipped while reading a file."""

    clamped: list[Any] = field(default_factory=list)
    dropped: list[Any] = field(default_factory=list)
    ignored_fields: set[str] = field(default_factory=set)
    expanded: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "clamped": list(self.clamped),
            "dropped": list(self.dropped),
            "ignored_fields": sorted(self.ignored_fields),
            "expanded": self.expanded,
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class AnnotatedDataset:
    images: tuple[ImageRecord, ...]
    categories: tuple[Category, ...]
    annotations: tuple[GroundTruthBox, ...]
    load_report: LoadReport | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not self.categories:
            raise ValidationError("dataset needs at least one category")
        _require_unique((c.id for c in self.categories), "category id")
        _require_unique((c.name for c in self.categories), "category name")
        _require_unique((im.id for im in self.images), "image id")
        _require_unique((a.id for a in self.annotations), "annotation id")
        images = self.image_by_id
        cats = set(self.category_index)
        for ann in self.annotations:
            image = images.get(ann.image_id)
            if image is None:
                raise ReferenceMismatchError(f"annotation {ann.id}: image_id {ann.image_id} not in images")
            if ann.category_id not in cats:
                raise ReferenceMismatchError(
                    f"annotation {ann.id}: category_id {ann.category_id} not in categories"
                )
            if not ann.bbox.fits(image.width, image.height):
                raise ValidationError(f"annotation {ann.id}: bbox exceeds image {image.id} bounds")

    @cached_property
    def category_ids(self) -> tuple[int, ...]:
        """Sorted category ids; position in this tuple is the class index."""
        return tuple(sorted(c.id for c in self.categories))

    @cached_property
    def category_index(self) -> dict[int, int]:
        return {cid: k for k, cid in enumerate(self.category_ids)}

    @cached_property
    def image_by_id(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    @property
    def n_classes(self) -> int:
        return len(self.categories)

    def category_names(self) -> list[str]:
        by_id = {c.id: c.name for c in self.categories}
        return [by_id[cid] for cid in self.category_ids]

    def annotations_by_image(self) -> dict[int, list[GroundTruthBox]]:
        out: dict[int, list[GroundTruthBox]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def counts(self) -> tuple[int, int, int]:
        return len(self.images), len(self.categories), len(self.annotations)

    def fingerprint(self) -> str:
        """Content hash independent of record order."""
        payload = {
            "categories": sorted([c.id, c.name] for c in self.categories),
            "images": sorted([im.id, im.width, im.height] for im in self.images),
            "annotations": sorted(
                [a.id, a.image_id, a.category_id, a.bbox.as_list()] for a in self.annotations
            ),
        }
        blob = json.dumps(payload, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self, strict_coco: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if not strict_coco:
            out["category_ids"] = list(self.category_ids)
        out["images"] = [im.to_dict() for im in self.images]
        out["categories"] = [{"id": c.id, "name": c.name} for c in self.categories]
        out["annotations"] = [a.to_dict(strict_coco) for a in self.annotations]
        return out


@dataclass(frozen=True)
class Detection:
    """A raw detector output: a box plus either class probabilities or logits."""

    image_id: int
    bbox: BBox
    scores: tuple[float, ...] | None = None
    logits: tuple[float, ...] | None = None
    # scalar-score records expanded to a vector; the sum-to-one check is skipped for n == 1
    expanded: bool = False

    def __post_init__(self) -> None:
        if (self.scores is None) == (self.logits is None):
            raise ValidationError("detection needs exactly one of scores or logits")
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
            if any(not (0.0 <= s <= 1.0) for s in self.scores):
                raise ValidationError(f"scores outside [0, 1] on image {self.image_id}")
            total = math.fsum(self.scores)
            if not (self.expanded and len(self.scores) == 1) and abs(total - 1.0) > SCORE_SUM_TOL:
                raise ValidationError(
                    f"scores on image {self.image_id} sum to {total!r}, expected 1 (tolerance {SCORE_SUM_TOL})"
                )
        else:
            object.__setattr__(self, "logits", tuple(float(q) for q in self.logits))
            if not all(math.isfinite(q) for q in self.logits):
                raise ValidationError(f"non-finite logits on image {self.image_id}")

    @property
    def vector(self) -> tuple[float, ...]:
        return self.scores if self.scores is not None else self.logits

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"image_id": self.image_id, "bbox": self.bbox.as_list()}
        if self.scores is not None:
            out["scores"] = list(self.scores)
        else:
            out["logits"] = list(self.logits)
        return out


@dataclass(frozen=True)
class DetectionSet:
    detections: tuple[Detection, ...]
    category_ids: tuple[int, ...]
    images: tuple[ImageRecord, ...]
    source_tag: str = "unknown"
    # per-detection annotation id of the generating truth box (None = false positive)
    truth_links: tuple[int | None, ...] | None = field(default=None, compare=False, repr=False)
    load_report: LoadReport | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "category_ids", tuple(self.category_ids))
        object.__setattr__(self, "images", tuple(self.images))
        if list(self.category_ids) != sorted(set(self.category_ids)):
            raise ValidationError("category_ids must be sorted and unique")
        known = {im.id for im in self.images}
        n = len(self.category_ids)
        for k, det in enumerate(self.detections):
            if det.image_id not in known:
                raise ReferenceMismatchError(f"detection {k}: unknown image_id {det.image_id}")
            if len(det.vector) != n:
                raise ValidationError(f"detection {k}: vector length {len(det.vector)} != {n} categories")
        if self.truth_links is not None and len(self.truth_links) != len(self.detections):
            raise ValidationError("truth_links must align with detections")

    @property
    def n_classes(self) -> int:
        return len(self.category_ids)

    def __len__(self) -> int:
        return len(self.detections)

    def by_image(self) -> dict[int, list[int]]:
        """Detection indices grouped per image, image ids ascending."""
        groups: dict[int, list[int]] = {}
        for k, det in enumerate(self.detections):
            groups.setdefault(det.image_id, []).append(k)
        return {image_id: groups[image_id] for image_id in sorted(groups)}

    def to_dict(self) -> dict[str, Any]:
        return {
            "category_ids": list(self.category_ids),
            "source_tag": self.source_tag,
            "detections": [d.to_dict() for d in self.detections],
        }


def _require_unique(values: Iterable[Any], what: str) -> None:
    seen: set[Any] = set()
    for v in values:
        if v in seen:
            raise ValidationError(f"duplicate {what}: {v!r}")
        seen.add(v)


def _read_json(path: str | Path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc


def write_json(obj: Any, path: str | Path) -> None:
    """Write ``obj`` deterministically (fixed key order, repr floats)."""
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def _field(record: dict, key: str, what: str) -> Any:
    try:
        return record[key]
    except (KeyError, TypeError):
        raise ParseError(f"{what}: missing required field {key!r}") from None


def _number(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f"{what}: expected a finite number, got {value!r}")
    return float(value)


def _integer(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what}: expected an integer, got {value!r}")
    return value


def _raw_box(value: Any, what: str) -> tuple[float, float, float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ParseError(f"{what}: bbox must be [x, y, w, h]")
    x, y, w, h = (_number(v, what) for v in value)
    return x, y, w, h


def clamp_box(raw: Sequence[float], width: float, height: float) -> tuple[BBox | None, bool]:
    """Clip ``[x, y, w, h]`` to the image.

    Returns ``(box, changed)``; ``box`` is None when nothing of positive area
    remains inside the image.
    """
    x, y, w, h = (float(v) for v in raw)
    inside = x >= 0 and y >= 0 and x + w <= width + BOUNDS_EPS and y + h <= height + BOUNDS_EPS
    if inside and w > 0 and h > 0:
        return BBox(x, y, w, h), False
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(width), x + w), min(float(height), y + h)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None, True
    return BBox(x0, y0, x1 - x0, y1 - y0), True


def _note_extra(record: dict, known: set[str], report: LoadReport, prefix: str) -> None:
    extra = set(record) - known
    if extra:
        new = {f"{prefix}.{k}" for k in extra} - report.ignored_fields
        if new:
            logger.warning("ignoring unsupported fields: %s", ", ".join(sorted(new)))
        report.ignored_fields |= {f"{prefix}.{k}" for k in extra}


def _parse_images(records: Any, report: LoadReport) -> list[ImageRecord]:
    if not isinstance(records, list):
        raise ParseError("'images' must be a list")
    images = []
    for k, rec in enumerate(records):
        what = f"image #{k}"
        image_id = _integer(_field(rec, "id", what), what)
        what = f"image {image_id}"
        width = _integer(_field(rec, "width", what), what)
        height = _integer(_field(rec, "height", what), what)
        file_name = _field(rec, "file_name", what)
        _note_extra(rec, _IMAGE_KEYS, report, "images")
        images.append(ImageRecord(image_id, width, height, str(file_name)))
    return images


def dataset_from_dict(data: Any, source: str = "<dict>") -> AnnotatedDataset:
    if not isinstance(data, dict):
        raise ParseError(f"{source}: top level must be a JSON object")
    report = LoadReport()
    _note_extra(data, _TOP_LEVEL_KEYS, report, "<root>")
    images = _parse_images(_field(data, "images", source), report)

    cat_records = _field(data, "categories", source)
    if not isinstance(cat_records, list):
        raise ParseError(f"{source}: 'categories' must be a list")
    categories = []
    for k, rec in enumerate(cat_records):
        what = f"category #{k}"
        cid = _integer(_field(rec, "id", what), what)
        name = _field(rec, "name", f"category {cid}")
        _note_extra(rec, _CATEGORY_KEYS, report, "categories")
        categories.append(Category(cid, str(name)))

    ann_records = _field(data, "annotations", source)
    if not isinstance(ann_records, list):
        raise ParseError(f"{source}: 'annotations' must be a list")
    image_by_id = {im.id: im for im in images}
    category_ids = {c.id for c in categories}
    annotations = []
    for k, rec in enumerate(ann_records):
        what = f"annotation #{k}"
        ann_id = _integer(_field(rec, "id", what), what)
        what = f"annotation {ann_id}"
        image_id = _integer(_field(rec, "image_id", what), what)
        category_id = _integer(_field(rec, "category_id", what), what)
        raw = _raw_box(_field(rec, "bbox", what), what)
        _note_extra(rec, _ANNOTATION_KEYS, report, "annotations")
        image = image_by_id.get(image_id)
        if image is None:
            raise ReferenceMismatchError(f"{what}: image_id {image_id} not in images")
        if category_id not in category_ids:
            raise ReferenceMismatchError(f"{what}: category_id {category_id} not in categories")
        box, changed = clamp_box(raw, image.width, image.height)
        if box is None:
            report.dropped.append(ann_id)
            continue
        if changed:
            report.clamped.append(ann_id)
        provenance = rec.get("pseudo_label")
        if provenance is not None and not isinstance(provenance, dict):
            raise ParseError(f"{what}: 'pseudo_label' must be an object")
        annotations.append(GroundTruthBox(ann_id, image_id, category_id, box, provenance))

    dataset = AnnotatedDataset(images, categories, annotations, load_report=report)
    header = data.get("category_ids")
    if header is not None and list(header) != list(dataset.category_ids):
        raise ParseError(f"{source}: category_ids header {header} disagrees with categories")
    if report.clamped or report.dropped:
        logger.info("%s: clamped %d boxes, dropped %d", source, len(report.clamped), len(report.dropped))
    return dataset


def load_annotations(path: str | Path) -> AnnotatedDataset:
    """Read an annotation file.

    Boxes that overshoot their image are clamped; boxes left with zero area
    are dropped. Both are listed in ``dataset.load_report``.
    """
    return dataset_from_dict(_read_json(path), str(path))


def save_annotations(dataset: AnnotatedDataset, path: str | Path, strict_coco: bool = False) -> None:
    """Write ``dataset``; ``strict_coco`` strips pseudo-label provenance and the header."""
    write_json(dataset.to_dict(strict_coco), path)


def load_images(path: str | Path) -> list[ImageRecord]:
    """Image list from either an annotation file or a bare JSON array of images."""
    data = _read_json(path)
    records = data.get("images") if isinstance(data, dict) else data
    return _parse_images(records, LoadReport())


def detections_from_records(
    records: Any,
    images: Sequence[ImageRecord],
    category_ids: Sequence[int],
    source_tag: str = "unknown",
    source: str = "<records>",
) -> DetectionSet:
    if not isinstance(records, list):
        raise ParseError(f"{source}: detections must be a JSON array")
    category_ids = tuple(sorted(category_ids))
    n = len(category_ids)
    index = {cid: k for k, cid in enumerate(category_ids)}
    image_by_id = {im.id: im for im in images}
    report = LoadReport()

    kinds = set()
    for k, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise ParseError(f"{source}: detection #{k} is not an object")
        has_vector = "scores" in rec or "logits" in rec
        has_scalar = "score" in rec or "category_id" in rec
        if has_vector == has_scalar:
            raise ParseError(f"{source}: detection #{k} must have either a score vector or category_id + score")
        kinds.add("vector" if has_vector else "scalar")
    if len(kinds) > 1:
        raise ParseError(f"{source}: mixed full-vector and scalar-score records")

    detections = []
    for k, rec in enumerate(records):
        what = f"detection #{k}"
        image_id = _integer(_field(rec, "image_id", what), what)
        raw = _raw_box(_field(rec, "bbox", what), what)
        _note_extra(rec, _DETECTION_KEYS, report, "detections")
        image = image_by_id.get(image_id)
        if image is None:
            raise ReferenceMismatchError(f"{what}: unknown image_id {image_id}")
        if "scores" in rec and "logits" in rec:
            raise ParseError(f"{what}: has both scores and logits")
        expanded = False
        if "scores" in rec or "logits" in rec:
            key = "scores" if "scores" in rec else "logits"
            vec = rec[key]
            if not isinstance(vec, list):
                raise ParseError(f"{what}: {key} must be a list")
            vec = [_number(v, what) for v in vec]
            if len(vec) != n:
                raise ValidationError(f"{what}: {key} has length {len(vec)}, expected {n}")
        else:
            key = "scores"
            cid = _integer(_field(rec, "category_id", what), what)
            score = _number(_field(rec, "score", what), what)
            if cid not in index:
                raise ReferenceMismatchError(f"{what}: unknown category_id {cid}")
            if not 0.0 <= score <= 1.0:
                raise ValidationError(f"{what}: score {score} outside [0, 1]")
            vec = expand_scalar_score(score, index[cid], n)
            expanded = True
            report.expanded += 1
        box, changed = clamp_box(raw, image.width, image.height)
        if box is None:
            report.dropped.append(k)
            continue
        if changed:
            report.clamped.append(k)
        try:
            det = Detection(image_id, box, expanded=expanded, **{key: vec})
        except ValidationError as exc:
            raise ValidationError(f"{what}: {exc}") from None
        detections.append(det)
    if report.expanded:
        report.notes.append(
            "scalar-score records expanded: score at the category's index, "
            "(1 - score) / (n - 1) at every other index"
        )
    return DetectionSet(detections, category_ids, tuple(images), source_tag, load_report=report)


def expand_scalar_score(score: float, index: int, n: int) -> list[float]:
    """Full probability vector for a single-class COCO-results record."""
    if n == 1:
        return [score]
    rest = (1.0 - score) / (n - 1)
    vec = [rest] * n
    vec[index] = score
    return vec


def load_detections(
    path: str | Path,
    dataset: AnnotatedDataset | None = None,
    *,
    images: Sequence[ImageRecord] | None = None,
    category_ids: Sequence[int] | None = None,
) -> DetectionSet:
    """Read a detection file against a dataset or an explicit image list.

    Category ids come from ``dataset``, then ``category_ids``, then the file
    header, in that order; if the header is present it must agree.
    """
    data = _read_json(path)
    header_ids = None
    source_tag = Path(path).stem
    if isinstance(data, dict):
        header_ids = data.get("category_ids")
        source_tag = str(data.get("source_tag", source_tag))
        records = _field(data, "detections", str(path))
    else:
        records = data
    if dataset is not None:
        images = dataset.images if images is None else images
        category_ids = dataset.category_ids
    elif category_ids is None:
        category_ids = header_ids
    if category_ids is None:
        raise ParseError(f"{path}: no category ids (pass a dataset or a file with a header)")
    if images is None:
        raise ParseError(f"{path}: an image list is required to resolve image ids")
    if header_ids is not None and sorted(header_ids) != sorted(category_ids):
        raise ReferenceMismatchError(f"{path}: category_ids header {header_ids} disagrees with {list(category_ids)}")
    return detections_from_records(records, images, category_ids, source_tag, str(path))


def save_detections(detections: DetectionSet, path: str | Path) -> None:
    write_json(detections.to_dict(), path)
