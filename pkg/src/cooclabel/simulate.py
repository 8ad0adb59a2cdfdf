"""Seeded synthetic detector for closed-loop tests without a network.

Each ground-truth box is detected with probability ``p_detect``; its box is
jittered and its logits are ``logit_scale * one_hot(k) + N(0, 1)`` where
``k`` is drawn from the box's confusion row. Each image also receives
``Poisson(fp_rate)`` false positives with random boxes. Every image draws
from its own generator seeded by ``(seed, image_id)``, so output does not
depend on processing order or thread count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cooclabel.dataset import (
    AnnotatedDataset,
    BBox,
    Category,
    Detection,
    DetectionSet,
    GroundTruthBox,
    ImageRecord,
    clamp_box,
    write_json,
)
from cooclabel.errors import ParseError, ValidationError

DEFAULT_SCENES: dict[str, tuple[str, ...]] = {
    "kitchen": ("cup", "fork", "bowl"),
    "street": ("car", "bus", "traffic_light"),
    "farm": ("horse", "cow", "sheep"),
    "office": ("laptop", "keyboard", "mouse"),
}


@dataclass(frozen=True)
class NoiseModel:
    seed: int = 0
    p_detect: float = 0.9
    box_jitter: float = 0.05
    logit_scale: float = 4.0
    confusion: tuple[tuple[float, ...], ...] | None = None  # None = identity
    fp_rate: float = 1.0
    contextual_fp: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_detect <= 1.0:
            raise ValidationError(f"p_detect must be in [0, 1], got {self.p_detect}")
        if self.box_jitter < 0 or self.logit_scale < 0 or self.fp_rate < 0:
            raise ValidationError("box_jitter, logit_scale and fp_rate must be non-negative")
        if self.confusion is not None:
            rows = tuple(tuple(float(v) for v in row) for row in self.confusion)
            object.__setattr__(self, "confusion", rows)
            m = np.asarray(rows)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValidationError("confusion must be a square matrix")
            if np.any(m < 0) or np.any(m > 1):
                raise ValidationError("confusion entries must lie in [0, 1]")
            if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
                raise ValidationError("confusion rows must sum to 1")

    def confusion_matrix(self, n: int) -> np.ndarray:
        if self.confusion is None:
            return np.eye(n)
        m = np.asarray(self.confusion)
        if m.shape != (n, n):
            raise ValidationError(f"confusion is {m.shape[0]}x{m.shape[1]}, dataset has {n} classes")
        return m

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["confusion"] = None if self.confusion is None else [list(r) for r in self.confusion]
        return out


def _image_rng(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed % 2**63, image_id % 2**63])


def _simulate_image(
    image: ImageRecord,
    truths: list[GroundTruthBox],
    index: dict[int, int],
    confusion: np.ndarray,
    model: NoiseModel,
) -> tuple[list[Detection], list[int | None]]:
    rng = _image_rng(model.seed, image.id)
    n = len(confusion)
    cdf = np.cumsum(confusion, axis=1)
    dets: list[Detection] = []
    links: list[int | None] = []
    for ann in truths:
        # draw everything up front so the stream layout does not depend on p_detect
        u = rng.random()
        shift = rng.standard_normal(4)
        v = rng.random()
        noise = rng.standard_normal(n)
        if u >= model.p_detect:
            continue
        box = ann.bbox
        j = model.box_jitter
        w2 = box.w * float(np.exp(j * shift[2]))
        h2 = box.h * float(np.exp(j * shift[3]))
        x2 = box.x + (box.w - w2) / 2 + j * box.w * shift[0]
        y2 = box.y + (box.h - h2) / 2 + j * box.h * shift[1]
        jittered, _ = clamp_box((x2, y2, w2, h2), image.width, image.height)
        c = index[ann.category_id]
        k = min(int(np.searchsorted(cdf[c], v, side="right")), n - 1)
        logits = noise.copy()
        logits[k] += model.logit_scale
        dets.append(Detection(image.id, jittered or box, logits=tuple(logits.tolist())))
        links.append(ann.id)

    present = sorted({index[a.category_id] for a in truths})
    for _ in range(int(rng.poisson(model.fp_rate))):
        fw = image.width * rng.uniform(0.05, 0.4)
        fh = image.height * rng.uniform(0.05, 0.4)
        fx = rng.uniform(0.0, image.width - fw)
        fy = rng.uniform(0.0, image.height - fh)
        if model.contextual_fp or not present:
            k = int(rng.integers(n))
        else:
            k = present[int(rng.integers(len(present)))]
        logits = rng.standard_normal(n)
        logits[k] += model.logit_scale
        box, _ = clamp_box((fx, fy, fw, fh), image.width, image.height)
        dets.append(Detection(image.id, box, logits=tuple(logits.tolist())))
        links.append(None)
    return dets, links


def simulate(
    dataset: AnnotatedDataset,
    model: NoiseModel,
    threads: int = 1,
    source_tag: str | None = None,
) -> DetectionSet:
    """Noisy detections for every image of ``dataset``.

    The returned set carries ``truth_links``: the generating annotation id of
    each detection, or None for a false positive.
    """
    confusion = model.confusion_matrix(dataset.n_classes)
    by_image = dataset.annotations_by_image()
    images = sorted(dataset.images, key=lambda im: im.id)

    def work(image: ImageRecord) -> tuple[list[Detection], list[int | None]]:
        truths = sorted(by_image[image.id], key=lambda a: a.id)
        return _simulate_image(image, truths, dataset.category_index, confusion, model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, images))
    else:
        results = [work(im) for im in images]
    dets = [d for ds, _ in results for d in ds]
    links = [lk for _, ls in results for lk in ls]
    tag = source_tag or f"sim-seed{model.seed}"
    return DetectionSet(dets, dataset.category_ids, dataset.images, tag, truth_links=tuple(links))


def save_truth_links(detections: DetectionSet, path: str | Path) -> None:
    """Sidecar mapping detection position to its generating annotation id."""
    if detections.truth_links is None:
        raise ValueError("detection set has no truth links")
    write_json({"source_tag": detections.source_tag, "truth_links": list(detections.truth_links)}, path)


def load_truth_links(path: str | Path) -> list[int | None]:
    try:
        return list(json.loads(Path(path).read_text())["truth_links"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: invalid truth sidecar ({exc!r})") from None


def make_scene_dataset(
    n_images: int,
    seed: int = 0,
    scenes: dict[str, Sequence[str]] | None = None,
    objects_per_image: tuple[int, int] = (3, 5),
    image_size: tuple[int, int] = (640, 480),
    first_image_id: int = 1,
) -> AnnotatedDataset:
    """Synthetic dataset with sharply structured co-occurrence.

    Every image belongs to one scene and only shows that scene's classes, so
    classes from different scenes never co-occur. Objects sit in distinct
    cells of a 3x2 grid and never overlap.
    """
    scenes = DEFAULT_SCENES if scenes is None else scenes
    names = [name for group in scenes.values() for name in group]
    categories = [Category(k + 1, name) for k, name in enumerate(names)]
    cid = {name: k + 1 for k, name in enumerate(names)}
    groups = list(scenes.values())
    lo, hi = objects_per_image
    if not 1 <= lo <= hi <= 6:
        raise ValueError("objects_per_image must satisfy 1 <= lo <= hi <= 6")
    width, height = image_size
    cw, ch = width / 3, height / 2
    rng = np.random.default_rng(seed)
    images, annotations = [], []
    ann_id = 1
    for k in range(n_images):
        image_id = first_image_id + k
        images.append(ImageRecord(image_id, width, height, f"scene_{image_id:06d}.jpg"))
        group = groups[int(rng.integers(len(groups)))]
        count = int(rng.integers(lo, hi + 1))
        cells = rng.permutation(6)[:count]
        for cell in cells:
            name = group[int(rng.integers(len(group)))]
            bw = cw * rng.uniform(0.4, 0.9)
            bh = ch * rng.uniform(0.4, 0.9)
            x = (cell % 3) * cw + rng.uniform(0.0, cw - bw)
            y = (cell // 3) * ch + rng.uniform(0.0, ch - bh)
            annotations.append(GroundTruthBox(ann_id, image_id, cid[name], BBox(float(x), float(y), float(bw), float(bh))))
            ann_id += 1
    return AnnotatedDataset(images, categories, annotations)


def subset(dataset: AnnotatedDataset, image_ids: Sequence[int]) -> AnnotatedDataset:
    """Dataset restricted to ``image_ids``, keeping all categories."""
    keep = set(image_ids)
    return AnnotatedDataset(
        [im for im in dataset.images if im.id in keep],
        dataset.categories,
        [a for a in dataset.annotations if a.image_id in keep],
    )
