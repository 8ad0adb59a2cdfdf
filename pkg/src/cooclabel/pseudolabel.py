"""Turn raw detections on unlabeled images into pseudo-labels.

Two acceptance rules are available. The confidence rule keeps a detection
when its top softmax probability ``p`` is strictly above ``rho``. The
co-occurrence rule keeps it when ``p * sigma`` is strictly above ``rho_co``,
where ``sigma`` is the strongest normalized co-occurrence between the
detection's class and the classes of the other confident detections in the
same image. The co-occurrence rule replaces the confidence rule; it is not
applied on top of it.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cooclabel.cooccurrence import CooccurrenceMatrix, check_dimension, sigma
from cooclabel.dataset import BBox, Detection, DetectionSet, write_json
from cooclabel.errors import DimensionError, ParseError, ValidationError
from cooclabel.evaluate import iou

REASONS = ("accepted", "below_rho", "below_rho_co", "suppressed")


def softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Numerically safe softmax over the last axis (max-subtracted)."""
    q = np.asarray(logits, dtype=float)
    if q.ndim == 0 or q.shape[-1] == 0:
        raise ValueError("softmax needs at least one logit")
    if not np.all(np.isfinite(q)):
        raise ValueError("softmax input must be finite")
    e = np.exp(q - q.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(detection: Detection) -> np.ndarray:
    if detection.logits is not None:
        return softmax(detection.logits)
    return np.asarray(detection.scores, dtype=float)


def top_class(detection: Detection) -> tuple[int, float]:
    """Argmax class and its probability; ties go to the lowest index."""
    return top_classes([detection])[0]


def top_classes(detections: Sequence[Detection]) -> list[tuple[int, float]]:
    """Vectorized :func:`top_class` for detections sharing one class count."""
    if not detections:
        return []
    n = len(detections[0].vector)
    probs = np.empty((len(detections), n))
    rows = [k for k, d in enumerate(detections) if d.logits is not None]
    if rows:
        probs[rows] = softmax([detections[k].logits for k in rows])
    rest = [k for k, d in enumerate(detections) if d.logits is None]
    if rest:
        probs[rest] = [detections[k].scores for k in rest]
    best = probs.argmax(axis=1)
    return list(zip(best.tolist(), probs[np.arange(len(best)), best].tolist()))


@dataclass(frozen=True)
class FilterConfig:
    rho: float = 0.5
    rho_co: float = 0.3
    use_cooccurrence: bool = True
    context_threshold: float | None = None  # None means "same as rho"
    nms_iou: float = 0.5
    nms_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("rho", "rho_co", "nms_iou", "context_threshold"):
            value = getattr(self, name)
            if value is None:
                continue
            if not 0.0 < value < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {value}")
        if self.rho_co > self.rho:
            warnings.warn(f"rho_co={self.rho_co} exceeds rho={self.rho}", UserWarning, stacklevel=3)

    @property
    def context_bar(self) -> float:
        return self.rho if self.context_threshold is None else self.context_threshold

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FilterConfig:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass(frozen=True)
class PseudoLabel:
    image_id: int
    bbox: BBox
    category: int  # class index, not category id
    confidence: float
    sigma_used: float
    source_tag: str
    config: FilterConfig
    detection_index: int = -1

    @property
    def rule(self) -> str:
        return "cooccurrence" if self.config.use_cooccurrence else "one_hot"

    def passes(self) -> bool:
        """Re-check the acceptance inequality from the recorded fields."""
        if self.config.use_cooccurrence:
            return self.confidence * self.sigma_used > self.config.rho_co
        return self.confidence > self.config.rho

    def to_dict(self, category_ids: Sequence[int]) -> dict[str, Any]:
        return {
            "detection_index": self.detection_index,
            "image_id": self.image_id,
            "bbox": self.bbox.as_list(),
            "category": self.category,
            "category_id": category_ids[self.category],
            "confidence": self.confidence,
            "sigma_used": self.sigma_used,
            "provenance": {"source_tag": self.source_tag, "rule": self.rule, "config": self.config.to_dict()},
        }


@dataclass
class FilterReport:
    """Per-class tallies keyed by category id, one counter per outcome."""

    per_class: dict[int, Counter] = field(default_factory=dict)
    n_images: int = 0
    n_detections: int = 0

    @classmethod
    def empty(cls, category_ids: Sequence[int]) -> FilterReport:
        return cls({cid: Counter({r: 0 for r in REASONS}) for cid in category_ids})

    def add(self, category_id: int, reason: str, count: int = 1) -> None:
        counter = self.per_class.get(category_id)
        if counter is None:
            counter = self.per_class[category_id] = Counter({r: 0 for r in REASONS})
        counter[reason] += count

    def absorb(self, other: FilterReport) -> None:
        """Add ``other``'s tallies into this report in place."""
        self.n_images += other.n_images
        self.n_detections += other.n_detections
        for cid, counter in other.per_class.items():
            for reason in REASONS:
                if counter[reason]:
                    self.add(cid, reason, counter[reason])

    def merge(self, other: FilterReport) -> FilterReport:
        out = FilterReport.empty([])
        out.absorb(self)
        out.absorb(other)
        for cid in self.per_class.keys() | other.per_class.keys():
            out.per_class.setdefault(cid, Counter({r: 0 for r in REASONS}))
        return out

    def totals(self) -> dict[str, int]:
        return {r: sum(c[r] for c in self.per_class.values()) for r in REASONS}

    def accepted_per_class(self) -> dict[int, int]:
        return {cid: c["accepted"] for cid, c in sorted(self.per_class.items())}

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_images": self.n_images,
            "n_detections": self.n_detections,
            "totals": self.totals(),
            "per_class": {str(cid): {r: c[r] for r in REASONS} for cid, c in sorted(self.per_class.items())},
        }


def one_hot_accept(detection: Detection, config: FilterConfig) -> tuple[int, float] | None:
    c, p = top_class(detection)
    return (c, p) if p > config.rho else None


def _context_from_scored(scored: Sequence[tuple[int, float]], bar: float, exclude: int) -> frozenset[int]:
    return frozenset(c for j, (c, p) in enumerate(scored) if j != exclude and p > bar)


def build_context(image_detections: Sequence[Detection], config: FilterConfig, exclude: int) -> frozenset[int]:
    """Classes of the other detections in the image whose top probability clears the context bar."""
    ids = {d.image_id for d in image_detections}
    if len(ids) > 1:
        raise ValueError(f"detections span several images: {sorted(ids)}")
    scored = top_classes(image_detections)
    return _context_from_scored(scored, config.context_bar, exclude)


def cooccurrence_accept(
    detection: Detection,
    context: frozenset[int] | set[int],
    matrix: CooccurrenceMatrix,
    config: FilterConfig,
    source_tag: str = "unknown",
    detection_index: int = -1,
) -> PseudoLabel | None:
    if len(detection.vector) != matrix.n:
        raise DimensionError(f"detection has {len(detection.vector)} classes, matrix has {matrix.n}")
    c, p = top_class(detection)
    s = sigma(matrix, c, context)
    if p * s > config.rho_co:
        return PseudoLabel(detection.image_id, detection.bbox, c, p, s, source_tag, config, detection_index)
    return None


def suppress_duplicates(labels: Sequence[PseudoLabel], config: FilterConfig) -> list[PseudoLabel]:
    """Class-wise greedy suppression; survivors keep their input order."""
    if not config.nms_enabled:
        return list(labels)
    order = sorted(
        range(len(labels)),
        key=lambda k: (-labels[k].confidence, labels[k].bbox.x, labels[k].bbox.y, k),
    )
    kept: dict[tuple[int, int], list[BBox]] = {}
    survivors = []
    for k in order:
        label = labels[k]
        group = kept.setdefault((label.image_id, label.category), [])
        if all(iou(label.bbox, other) <= config.nms_iou for other in group):
            group.append(label.bbox)
            survivors.append(k)
    return [labels[k] for k in sorted(survivors)]


def _label_image(
    detections: DetectionSet,
    indices: Sequence[int],
    scored_all: Sequence[tuple[int, float]],
    matrix: CooccurrenceMatrix | None,
    config: FilterConfig,
) -> tuple[list[PseudoLabel], FilterReport]:
    ids = detections.category_ids
    report = FilterReport(n_images=1, n_detections=len(indices))
    dets = [detections.detections[k] for k in indices]
    scored = [scored_all[k] for k in indices]
    candidates = []
    for j, (k, det) in enumerate(zip(indices, dets)):
        c, p = scored[j]
        if config.use_cooccurrence:
            context = _context_from_scored(scored, config.context_bar, j)
            s = sigma(matrix, c, context)
            if p * s > config.rho_co:
                candidates.append(PseudoLabel(det.image_id, det.bbox, c, p, s, detections.source_tag, config, k))
            else:
                report.add(ids[c], "below_rho_co")
        elif p > config.rho:
            candidates.append(PseudoLabel(det.image_id, det.bbox, c, p, 1.0, detections.source_tag, config, k))
        else:
            report.add(ids[c], "below_rho")
    kept = suppress_duplicates(candidates, config)
    offered = Counter(ids[label.category] for label in candidates)
    survived = Counter(ids[label.category] for label in kept)
    for cid, count in offered.items():
        report.add(cid, "accepted", survived[cid])
        report.add(cid, "suppressed", count - survived[cid])
    return kept, report


def pseudolabel_dataset(
    detections: DetectionSet,
    matrix: CooccurrenceMatrix | None,
    config: FilterConfig,
    threads: int = 1,
) -> tuple[list[PseudoLabel], FilterReport]:
    """Filter every image's detections; labels come out ordered by (image id, detection index)."""
    if config.use_cooccurrence:
        if matrix is None:
            raise ValidationError("co-occurrence filtering needs a matrix")
        check_dimension(matrix, detections.category_ids)
    groups = list(detections.by_image().items())
    scored = top_classes(detections.detections)

    def work(item: tuple[int, list[int]]) -> tuple[list[PseudoLabel], FilterReport]:
        return _label_image(detections, item[1], scored, matrix, config)

    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, groups))
    else:
        results = [work(g) for g in groups]
    labels: list[PseudoLabel] = []
    report = FilterReport.empty(detections.category_ids)
    for image_labels, image_report in results:
        labels.extend(image_labels)
        report.absorb(image_report)
    return labels, report


def save_pseudolabels(
    labels: Sequence[PseudoLabel],
    path: str | Path,
    category_ids: Sequence[int],
    config: FilterConfig,
    source_tag: str,
) -> None:
    write_json(
        {
            "category_ids": list(category_ids),
            "source_tag": source_tag,
            "config": config.to_dict(),
            "labels": [label.to_dict(category_ids) for label in labels],
        },
        path,
    )


def load_pseudolabels(path: str | Path) -> tuple[list[PseudoLabel], dict[str, Any]]:
    """Labels plus the file header (``category_ids``, ``source_tag``, ``config``)."""
    try:
        data = json.loads(Path(path).read_text())
        header = {k: data[k] for k in ("category_ids", "source_tag", "config")}
        labels = []
        for rec in data["labels"]:
            prov = rec["provenance"]
            labels.append(
                PseudoLabel(
                    image_id=int(rec["image_id"]),
                    bbox=BBox(*rec["bbox"]),
                    category=int(rec["category"]),
                    confidence=float(rec["confidence"]),
                    sigma_used=float(rec["sigma_used"]),
                    source_tag=str(prov["source_tag"]),
                    config=FilterConfig.from_dict(prov["config"]),
                    detection_index=int(rec.get("detection_index", -1)),
                )
            )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: invalid pseudo-label file ({exc!r})") from None
    return labels, header
