"""Class co-occurrence prior estimated from an annotated dataset.

Presence is counted per image: a class shown once or ten times in an image
counts once. ``raw[x, z]`` is the fraction of images containing ``z`` that
also contain ``x``; the diagonal ``raw[x, x]`` is the fraction of images with
``x`` that hold at least two instances of it. ``normalized`` rescales each
row so that a class's strongest partner maps to exactly 1.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cooclabel.dataset import AnnotatedDataset, write_json
from cooclabel.errors import DimensionError, FingerprintWarning, ParseError

ORIENTATIONS = ("row", "column")


@dataclass(frozen=True, eq=False)
class CooccurrenceMatrix:
    category_ids: tuple[int, ...]
    image_counts: np.ndarray
    joint_counts: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray
    fingerprint: str
    n_images: int = 0
    orientation: str = "row"
    smoothing: float = 0.0

    @property
    def n(self) -> int:
        return len(self.category_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CooccurrenceMatrix):
            return NotImplemented
        return (
            self.category_ids == other.category_ids
            and self.fingerprint == other.fingerprint
            and self.n_images == other.n_images
            and self.orientation == other.orientation
            and self.smoothing == other.smoothing
            and np.array_equal(self.image_counts, other.image_counts)
            and np.array_equal(self.joint_counts, other.joint_counts)
            and np.array_equal(self.raw, other.raw)
            and np.array_equal(self.normalized, other.normalized)
        )

    @classmethod
    def uniform(cls, category_ids: Sequence[int]) -> CooccurrenceMatrix:
        """All-ones table: every lookup returns 1, so rescoring is a no-op."""
        n = len(category_ids)
        ones = np.ones((n, n))
        zeros = np.zeros(n, dtype=np.int64)
        return cls(tuple(category_ids), zeros, np.zeros((n, n), dtype=np.int64), ones, ones.copy(), "uniform")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "category_ids": list(self.category_ids),
            "image_counts": self.image_counts.tolist(),
            "joint_counts": self.joint_counts.tolist(),
            "n_images": self.n_images,
            "orientation": self.orientation,
            "smoothing": self.smoothing,
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
            "fingerprint": self.fingerprint,
        }


def _presence(dataset: AnnotatedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Binary presence and multi-instance indicators, one row per image (sorted by id)."""
    row = {image_id: k for k, image_id in enumerate(sorted(dataset.image_by_id))}
    index = dataset.category_index
    instances = np.zeros((len(row), dataset.n_classes), dtype=np.int64)
    for ann in dataset.annotations:
        instances[row[ann.image_id], index[ann.category_id]] += 1
    return (instances >= 1).astype(np.int64), (instances >= 2).astype(np.int64)


def _count_chunk(present: np.ndarray, multi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    joint = present.T @ present
    np.fill_diagonal(joint, multi.sum(axis=0))
    return present.sum(axis=0), joint


def count_cooccurrence(dataset: AnnotatedDataset, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-class image counts and the symmetric joint-presence count table.

    Counts are integers, so the chunked parallel sum is bit-identical to the
    sequential one.
    """
    present, multi = _presence(dataset)
    n = dataset.n_classes
    if threads <= 1 or len(present) < 2 * threads:
        return _count_chunk(present, multi)
    bounds = np.linspace(0, len(present), threads + 1).astype(int)
    chunks = [(present[a:b], multi[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    counts = np.zeros(n, dtype=np.int64)
    joint = np.zeros((n, n), dtype=np.int64)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for c, j in pool.map(lambda args: _count_chunk(*args), chunks):
            counts += c
            joint += j
    return counts, joint


def conditional_from_counts(counts: np.ndarray, joint: np.ndarray, smoothing: float = 0.0) -> np.ndarray:
    """``raw[x, z] = joint[x, z] / counts[z]``; zero wherever either class is unseen."""
    n = len(counts)
    raw = np.zeros((n, n))
    seen = counts > 0
    both = np.outer(seen, seen)
    denom = counts.astype(float) + 2.0 * smoothing
    raw[both] = ((joint + smoothing) / np.where(seen, denom, 1.0)[None, :])[both]
    return raw


def max_normalize(raw: np.ndarray, orientation: str = "row") -> np.ndarray:
    """Scale each row (or column) by its largest off-diagonal entry.

    The diagonal is divided by the same scale and capped at 1. Rows whose
    off-diagonal entries are all zero stay zero.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    table = raw if orientation == "row" else raw.T
    n = len(table)
    off = table.copy()
    np.fill_diagonal(off, 0.0)
    scale = off.max(axis=1) if n else np.zeros(0)
    out = np.zeros_like(table)
    live = scale > 0
    out[live] = table[live] / scale[live, None]
    diag = np.arange(n)
    out[diag, diag] = np.minimum(out[diag, diag], 1.0)
    return out if orientation == "row" else out.T


def build_cooccurrence(
    dataset: AnnotatedDataset,
    smoothing: float = 0.0,
    orientation: str = "row",
    threads: int = 1,
) -> CooccurrenceMatrix:
    if smoothing < 0:
        raise ValueError("smoothing must be non-negative")
    counts, joint = count_cooccurrence(dataset, threads)
    raw = conditional_from_counts(counts, joint, smoothing)
    return CooccurrenceMatrix(
        category_ids=dataset.category_ids,
        image_counts=counts,
        joint_counts=joint,
        raw=raw,
        normalized=max_normalize(raw, orientation),
        fingerprint=dataset.fingerprint(),
        n_images=len(dataset.images),
        orientation=orientation,
        smoothing=float(smoothing),
    )


def sigma(matrix: CooccurrenceMatrix, target_class: int, context: Iterable[int]) -> float:
    """Strongest normalized co-occurrence between ``target_class`` and any context class.

    An empty context returns 1.0 so the rescored test falls back to a plain
    confidence threshold.
    """
    n = matrix.n
    if not 0 <= target_class < n:
        raise IndexError(f"class index {target_class} out of range for {n} classes")
    best = None
    for z in context:
        if not 0 <= z < n:
            raise IndexError(f"context class index {z} out of range for {n} classes")
        value = matrix.normalized[target_class, z]
        if best is None or value > best:
            best = value
    return 1.0 if best is None else float(best)


def check_dimension(matrix: CooccurrenceMatrix, category_ids: Sequence[int]) -> None:
    if matrix.n != len(category_ids):
        raise DimensionError(f"matrix has {matrix.n} classes, data has {len(category_ids)}")
    if tuple(matrix.category_ids) != tuple(category_ids):
        raise DimensionError(
            f"matrix category ids {list(matrix.category_ids)} differ from data category ids {list(category_ids)}"
        )


def top_pairs(matrix: CooccurrenceMatrix, k: int = 10) -> list[tuple[int, int, float, float]]:
    """Strongest off-diagonal ``(x, z, raw, normalized)`` entries, by raw conditional."""
    pairs = [
        (x, z, float(matrix.raw[x, z]), float(matrix.normalized[x, z]))
        for x in range(matrix.n)
        for z in range(matrix.n)
        if x != z and matrix.raw[x, z] > 0
    ]
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    return pairs[:k]


def save_matrix(matrix: CooccurrenceMatrix, path: str | Path) -> None:
    write_json(matrix.to_dict(), path)


def matrix_from_dict(data: dict, source: str = "<dict>") -> CooccurrenceMatrix:
    try:
        n = int(data["n"])
        ids = tuple(int(c) for c in data["category_ids"])
        counts = np.asarray(data["image_counts"], dtype=np.int64).reshape(n)
        joint = np.asarray(data.get("joint_counts", np.zeros((n, n))), dtype=np.int64).reshape(n, n)
        raw = np.asarray(data["raw"], dtype=float).reshape(n, n)
        normalized = np.asarray(data["normalized"], dtype=float).reshape(n, n)
        fingerprint = str(data["fingerprint"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{source}: invalid matrix file ({exc!r})") from None
    if len(ids) != n:
        raise DimensionError(f"{source}: n={n} but {len(ids)} category ids")
    orientation = data.get("orientation", "row")
    if orientation not in ORIENTATIONS:
        raise ParseError(f"{source}: unknown orientation {orientation!r}")
    return CooccurrenceMatrix(
        ids, counts, joint, raw, normalized, fingerprint,
        n_images=int(data.get("n_images", 0)),
        orientation=orientation,
        smoothing=float(data.get("smoothing", 0.0)),
    )


def load_matrix(path: str | Path, dataset: AnnotatedDataset | None = None) -> CooccurrenceMatrix:
    """Read a matrix file; with ``dataset`` given, check it applies.

    A dimension mismatch raises; a fingerprint mismatch only warns, since
    priors from one dataset are routinely applied to another.
    """
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc
    matrix = matrix_from_dict(data, str(path))
    if dataset is not None:
        check_dimension(matrix, dataset.category_ids)
        if matrix.fingerprint != dataset.fingerprint():
            warnings.warn(
                f"{path}: matrix built from dataset {matrix.fingerprint}, applied to {dataset.fingerprint()}",
                FingerprintWarning,
                stacklevel=2,
            )
    return matrix


def export_csv(matrix: CooccurrenceMatrix, path: str | Path, names: Sequence[str] | None = None) -> None:
    """Normalized table for eyeballing; rows are targets, columns conditioning classes."""
    labels = list(names) if names is not None else [str(c) for c in matrix.category_ids]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target\\given", *labels])
        for label, row in zip(labels, matrix.normalized):
            writer.writerow([label, *(repr(float(v)) for v in row)])
