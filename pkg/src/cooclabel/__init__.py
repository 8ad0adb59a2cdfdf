"""Co-occurrence filtered pseudo-labeling for semi-supervised object detection."""

from cooclabel.cooccurrence import CooccurrenceMatrix, build_cooccurrence, load_matrix, save_matrix, sigma
from cooclabel.dataset import (
    AnnotatedDataset,
    BBox,
    Category,
    Detection,
    DetectionSet,
    GroundTruthBox,
    ImageRecord,
    load_annotations,
    load_detections,
    save_annotations,
    save_detections,
)
from cooclabel.evaluate import EvalReport, average_precision, evaluate, iou, match_detections
from cooclabel.merge import MergePlan, merge
from cooclabel.pseudolabel import (
    FilterConfig,
    PseudoLabel,
    build_context,
    cooccurrence_accept,
    one_hot_accept,
    pseudolabel_dataset,
    softmax,
    suppress_duplicates,
)
from cooclabel.simulate import NoiseModel, make_scene_dataset, simulate

__all__ = [
    "AnnotatedDataset",
    "BBox",
    "Category",
    "CooccurrenceMatrix",
    "Detection",
    "DetectionSet",
    "EvalReport",
    "FilterConfig",
    "GroundTruthBox",
    "ImageRecord",
    "MergePlan",
    "NoiseModel",
    "PseudoLabel",
    "average_precision",
    "build_context",
    "build_cooccurrence",
    "cooccurrence_accept",
    "evaluate",
    "iou",
    "load_annotations",
    "load_detections",
    "load_matrix",
    "make_scene_dataset",
    "match_detections",
    "merge",
    "one_hot_accept",
    "pseudolabel_dataset",
    "save_annotations",
    "save_detections",
    "save_matrix",
    "sigma",
    "simulate",
    "softmax",
    "suppress_duplicates",
]
