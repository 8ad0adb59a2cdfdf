"""COCO-style box evaluation: IoU, greedy matching, AP and mAP over an IoU sweep."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from cooclabel.dataset import AnnotatedDataset, BBox
from cooclabel.errors import EvaluationError

IOU_SWEEP = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
AP_METHODS = ("coco101", "voc11")


def iou(a: BBox, b: BBox) -> float:
    # areas use the same corner arithmetic as the intersection so iou(a, a) == 1 exactly
    ax2, ay2, bx2, by2 = a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h
    iw = min(ax2, bx2) - max(a.x, b.x)
    ih = min(ay2, by2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - a.x) * (ay2 - a.y) + (bx2 - b.x) * (by2 - b.y) - inter
    return inter / union


def iou_matrix(dets: Sequence[BBox], truths: Sequence[BBox]) -> np.ndarray:
    out = np.zeros((len(dets), len(truths)))
    for i, d in enumerate(dets):
        for j, t in enumerate(truths):
            out[i, j] = iou(d, t)
    return out


class ScoredBox(NamedTuple):
    """A class-labelled, scored box to be evaluated (a detection or a pseudo-label)."""

    image_id: int
    category: int
    bbox: BBox
    score: float


@dataclass
class Matching:
    """Result of matching one image's detections of one class.

    ``matched[k]`` is the truth index assigned to detection ``k`` (input
    order) or None for a false positive.
    """

    matched: list[int | None]
    n_truths: int

    @property
    def tp(self) -> int:
        return sum(m is not None for m in self.matched)

    @property
    def fp(self) -> int:
        return len(self.matched) - self.tp

    @property
    def fn(self) -> int:
        return self.n_truths - self.tp

    @property
    def tp_flags(self) -> list[bool]:
        return [m is not None for m in self.matched]


def _greedy(ious: np.ndarray, scores: Sequence[float], threshold: float) -> list[int | None]:
    n_det, n_truth = ious.shape
    order = sorted(range(n_det), key=lambda k: (-scores[k], k))
    taken = [False] * n_truth
    matched: list[int | None] = [None] * n_det
    for k in order:
        best, best_iou = None, -1.0
        for t in range(n_truth):
            if not taken[t] and ious[k, t] >= threshold and ious[k, t] > best_iou:
                best, best_iou = t, ious[k, t]
        if best is not None:
            taken[best] = True
            matched[k] = best
    return matched


def match_detections(
    dets: Sequence[BBox], scores: Sequence[float], truths: Sequence[BBox], iou_threshold: float
) -> Matching:
    """Greedy one-to-one matching for a single image and class.

    Detections are visited by descending score (ties: input order); each
    takes the unmatched truth with the highest IoU at or above the threshold.
    """
    return Matching(_greedy(iou_matrix(dets, truths), scores, iou_threshold), len(truths))


def precision_recall_curve(tp_flags: Sequence[bool], n_truths: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision and recall for detections already in ranked order."""
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_truths
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def average_precision(tp_flags: Sequence[bool], n_truths: int, method: str = "coco101") -> float | None:
    """Interpolated AP for ranked detections; None when there is no ground truth.

    ``coco101`` averages the interpolated precision at recalls k/100, k = 0..100;
    ``voc11`` at recalls k/10. Interpolated precision at r is the best
    precision reached at any recall >= r (0 if r is never reached).
    """
    if method not in AP_METHODS:
        raise ValueError(f"method must be one of {AP_METHODS}")
    if n_truths == 0:
        return None
    steps = 100 if method == "coco101" else 10
    levels = np.arange(steps + 1) / steps
    if len(tp_flags) == 0:
        return 0.0
    precision, recall = precision_recall_curve(tp_flags, n_truths)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, levels, side="left")
    values = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(values.mean())


@dataclass
class EvalReport:
    per_class_ap: dict[int, dict[float, float]]
    map_by_threshold: dict[float, float]
    map_sweep: float
    map_50: float | None
    pseudo_precision: float
    pseudo_recall: float
    tp: int
    fp: int
    fn: int
    excluded_classes: list[int] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "map_sweep": self.map_sweep,
            "map_50": self.map_50,
            "map_by_threshold": {f"{t:.2f}": v for t, v in self.map_by_threshold.items()},
            "per_class_ap": {
                str(cid): {f"{t:.2f}": v for t, v in aps.items()} for cid, aps in self.per_class_ap.items()
            },
            "excluded_classes": self.excluded_classes,
            "pseudo_precision": self.pseudo_precision,
            "pseudo_recall": self.pseudo_recall,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "config": self.config,
        }

    def write_csv(self, path: str | Path) -> None:
        thresholds = list(self.map_by_threshold)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category_id", *(f"{t:.2f}" for t in thresholds)])
            for cid, aps in self.per_class_ap.items():
                writer.writerow([cid, *(repr(aps[t]) for t in thresholds)])


def scored_from_pseudolabels(labels: Iterable[Any]) -> list[ScoredBox]:
    return [ScoredBox(lb.image_id, lb.category, lb.bbox, lb.confidence) for lb in labels]


def scored_from_detections(detections: Any) -> list[ScoredBox]:
    from cooclabel.pseudolabel import top_classes

    scored = top_classes(detections.detections)
    return [ScoredBox(det.image_id, c, det.bbox, p) for det, (c, p) in zip(detections.detections, scored)]


def _match_group(
    dets: list[tuple[int, ScoredBox]], truths: list[BBox], thresholds: Sequence[float]
) -> list[list[bool]]:
    ious = iou_matrix([d.bbox for _, d in dets], truths)
    scores = [d.score for _, d in dets]
    return [[m is not None for m in _greedy(ious, scores, t)] for t in thresholds]


def evaluate(
    records: Sequence[ScoredBox],
    ground_truth: AnnotatedDataset,
    iou_thresholds: Sequence[float] = IOU_SWEEP,
    method: str = "coco101",
    max_dets: int | None = None,
    pr_iou: float = 0.5,
    threads: int = 1,
) -> EvalReport:
    """Score ``records`` against ``ground_truth``.

    AP is computed per class and threshold over the whole dataset; classes
    with no ground truth are left out of the means. Precision and recall are
    taken at ``pr_iou`` with class-and-box matching.
    """
    if not ground_truth.annotations:
        raise EvaluationError("ground truth has no annotations")
    n = ground_truth.n_classes
    index = ground_truth.category_index
    thresholds = sorted(set(float(t) for t in iou_thresholds) | {pr_iou})
    known = ground_truth.image_by_id

    truths: dict[tuple[int, int], list[BBox]] = {}
    for ann in sorted(ground_truth.annotations, key=lambda a: a.id):
        truths.setdefault((ann.image_id, index[ann.category_id]), []).append(ann.bbox)
    groups: dict[tuple[int, int], list[tuple[int, ScoredBox]]] = {}
    for k, rec in enumerate(records):
        if rec.image_id not in known:
            raise EvaluationError(f"record {k}: image {rec.image_id} is not in the ground truth")
        if not 0 <= rec.category < n:
            raise EvaluationError(f"record {k}: class index {rec.category} out of range")
        groups.setdefault((rec.image_id, rec.category), []).append((k, rec))
    if max_dets is not None:
        for key, dets in groups.items():
            dets.sort(key=lambda item: (-item[1].score, item[0]))
            groups[key] = sorted(dets[:max_dets])

    keys = sorted(groups)

    def work(key: tuple[int, int]) -> list[list[bool]]:
        return _match_group(groups[key], truths.get(key, []), thresholds)

    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flags = dict(zip(keys, pool.map(work, keys)))
    else:
        flags = {key: work(key) for key in keys}

    n_truth = np.zeros(n, dtype=int)
    for (_, c), boxes in truths.items():
        n_truth[c] += len(boxes)

    # rank within class by score; ties by image id, then record position
    ranked: dict[int, list[tuple[float, int, int, int, tuple[int, int]]]] = {c: [] for c in range(n)}
    for key in keys:
        for pos, (k, rec) in enumerate(groups[key]):
            ranked[key[1]].append((-rec.score, rec.image_id, k, pos, key))
    for items in ranked.values():
        items.sort()

    per_class: dict[int, dict[float, float]] = {}
    ti = {t: i for i, t in enumerate(thresholds)}
    sweep = [float(t) for t in iou_thresholds]
    for c in range(n):
        if n_truth[c] == 0:
            continue
        per_class[ground_truth.category_ids[c]] = {
            t: average_precision([flags[key][ti[t]][pos] for *_, pos, key in ranked[c]], int(n_truth[c]), method)
            for t in sweep
        }
    excluded = [cid for c, cid in enumerate(ground_truth.category_ids) if n_truth[c] == 0]
    map_by_threshold = {t: float(np.mean([aps[t] for aps in per_class.values()])) for t in sweep}

    tp = sum(sum(f[ti[pr_iou]]) for f in flags.values())
    n_records = sum(len(v) for v in groups.values())
    fp = n_records - tp
    fn = int(n_truth.sum()) - tp
    return EvalReport(
        per_class_ap=per_class,
        map_by_threshold=map_by_threshold,
        map_sweep=float(np.mean(list(map_by_threshold.values()))),
        map_50=map_by_threshold.get(0.5),
        pseudo_precision=tp / n_records if n_records else 0.0,
        pseudo_recall=tp / int(n_truth.sum()),
        tp=tp,
        fp=fp,
        fn=fn,
        excluded_classes=excluded,
        config={"iou_thresholds": sweep, "method": method, "max_dets": max_dets, "pr_iou": pr_iou},
    )
