import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import det, scores_for, tiny_dataset
from oracles import box_iou, softmax_reference
from cooclabel.cooccurrence import CooccurrenceMatrix, build_cooccurrence, matrix_from_dict
from cooclabel.dataset import BBox, Detection, DetectionSet, ImageRecord
from cooclabel.errors import DimensionError, ValidationError
from cooclabel.pseudolabel import (
    FilterConfig,
    FilterReport,
    PseudoLabel,
    build_context,
    cooccurrence_accept,
    load_pseudolabels,
    one_hot_accept,
    pseudolabel_dataset,
    save_pseudolabels,
    softmax,
    suppress_duplicates,
)
from cooclabel.simulate import NoiseModel, make_scene_dataset, simulate, subset

APPLE, DOG, HORSE, BIKE = range(4)
IMAGES = tuple(ImageRecord(i, 100, 100) for i in range(1, 7))
CATS = (1, 2, 3, 4)


def matrix_with(normalized) -> CooccurrenceMatrix:
    n = len(normalized)
    return matrix_from_dict(
        {
            "n": n,
            "category_ids": list(range(1, n + 1)),
            "image_counts": [1] * n,
            "raw": normalized,
            "normalized": normalized,
            "fingerprint": "test",
        }
    )


def label(p, box=(0.0, 0.0, 10.0, 10.0), category=0, image_id=1, config=FilterConfig()):
    return PseudoLabel(image_id, BBox(*box), category, p, 1.0, "t", config)


@st.composite
def detection_sets(draw, n=4, max_per_image=6):
    dets = []
    for image_id in range(1, draw(st.integers(1, 5)) + 1):
        for _ in range(draw(st.integers(0, max_per_image))):
            logits = draw(st.lists(st.floats(-6, 6, allow_nan=False), min_size=n, max_size=n))
            gx, gy = draw(st.integers(0, 3)), draw(st.integers(0, 3))
            dets.append(Detection(image_id, BBox(gx * 10.0, gy * 10.0, 30.0, 30.0), logits=tuple(logits)))
    return DetectionSet(dets, CATS, IMAGES, "hyp")


@st.composite
def matrices(draw, n=4):
    table = draw(
        st.lists(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.8, 1.0]), min_size=n, max_size=n), min_size=n, max_size=n)
    )
    return matrix_with(table)


def accepted_keys(labels):
    return {(lb.detection_index, lb.category) for lb in labels}


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0, 0]), [0.25] * 4, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("q", [-700.0, 0.0, 3.5, 700.0])
    def test_single(self, q):
        assert softmax([q]).tolist() == [1.0]

    def test_reference_value(self):
        # frozen from a 50-digit mpmath evaluation
        np.testing.assert_allclose(
            softmax([2, 1, 0]), [0.6652409557748219, 0.24472847105479764, 0.09003057317038046], rtol=0, atol=1e-9
        )
        np.testing.assert_allclose(softmax([2, 1, 0]), softmax_reference([2, 1, 0]), rtol=0, atol=1e-15)

    def test_extreme_no_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            p = softmax([700.0, -700.0, 699.0])
        np.testing.assert_allclose(p, softmax_reference([700.0, -700.0, 699.0]), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("bad", [[math.nan, 0.0], [math.inf], []])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            softmax(bad)

    def test_batched_rows_sum_to_one(self):
        q = np.random.default_rng(0).normal(0, 50, size=(50, 7))
        np.testing.assert_allclose(softmax(q).sum(axis=1), 1.0, atol=1e-12)


class TestOneHot:
    def test_certain(self):
        assert one_hot_accept(det(1, 2, 1.0), FilterConfig(rho=0.5)) == (2, 1.0)

    def test_boundary_is_rejected(self):
        assert one_hot_accept(det(1, 2, 0.5), FilterConfig(rho=0.5)) is None

    def test_tie_breaks_low(self):
        d = Detection(1, BBox(0.0, 0.0, 1.0, 1.0), logits=(0.0, 5.0, 5.0, 0.0))
        assert one_hot_accept(d, FilterConfig(rho=0.3))[0] == 1

    def test_logits_path(self):
        d = Detection(1, BBox(0.0, 0.0, 1.0, 1.0), logits=(0.0, 0.0, 3.0, 0.0))
        c, p = one_hot_accept(d, FilterConfig(rho=0.5))
        assert c == 2 and p == pytest.approx(math.exp(3) / (math.exp(3) + 3))

    @settings(max_examples=80, deadline=None)
    @given(detection_sets())
    def test_high_rho_is_subset(self, ds):
        # enumerate every detection and check membership directly
        low = {k for k, d in enumerate(ds.detections) if one_hot_accept(d, FilterConfig(rho=0.5))}
        high = {k for k, d in enumerate(ds.detections) if one_hot_accept(d, FilterConfig(rho=0.7))}
        assert high <= low


class TestContext:
    def test_single_detection(self):
        assert build_context([det(1, 0, 0.9)], FilterConfig(), 0) == frozenset()

    def test_four_object_scene(self):
        dets = [det(1, DOG, 0.9), det(1, HORSE, 0.8), det(1, BIKE, 0.6), det(1, APPLE, 0.55)]
        assert build_context(dets, FilterConfig(context_threshold=0.5), 3) == {DOG, HORSE, BIKE}

    def test_same_class_pair(self):
        # enumerate: each member of a same-class pair sees the other
        dets = [det(1, DOG, 0.9), det(1, DOG, 0.7)]
        for k in range(2):
            assert build_context(dets, FilterConfig(), k) == {DOG}

    def test_own_class_excluded(self):
        dets = [det(1, DOG, 0.9), det(1, HORSE, 0.4)]
        assert build_context(dets, FilterConfig(), 0) == frozenset()

    def test_rejects_multiple_images(self):
        with pytest.raises(ValueError):
            build_context([det(1, 0, 0.9), det(2, 0, 0.9)], FilterConfig(), 0)


class TestCooccurrenceAccept:
    def test_arithmetic_reject(self):
        m = matrix_with([[0.0, 0.4], [1.0, 0.0]])
        d = Detection(1, BBox(0.0, 0.0, 1.0, 1.0), scores=(0.6, 0.4))
        assert 0.6 * 0.4 < 0.3
        assert cooccurrence_accept(d, {1}, m, FilterConfig(rho=0.5, rho_co=0.3)) is None

    def test_records_sigma(self):
        m = matrix_with([[0.0, 0.8], [1.0, 0.0]])
        d = Detection(1, BBox(0.0, 0.0, 1.0, 1.0), scores=(0.6, 0.4))
        lb = cooccurrence_accept(d, {1}, m, FilterConfig(rho=0.5, rho_co=0.3))
        assert lb.sigma_used == 0.8 and lb.confidence == 0.6 and lb.passes()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            cooccurrence_accept(det(1, 0, 0.9), set(), CooccurrenceMatrix.uniform([1, 2]), FilterConfig())

    @settings(max_examples=80, deadline=None)
    @given(detection_sets(), st.sampled_from([0.3, 0.5, 0.7]))
    def test_unit_sigma_reduces_to_one_hot(self, ds, rho):
        m = CooccurrenceMatrix.uniform(CATS)
        cfg = FilterConfig(rho=rho, rho_co=rho)
        for d in ds.detections:
            for context in (set(), {0, 2}):
                lb = cooccurrence_accept(d, context, m, cfg)
                oh = one_hot_accept(d, cfg)
                assert (lb is None) == (oh is None)
                if lb is not None:
                    assert (lb.category, lb.confidence) == oh


class TestSuppression:
    def test_identical_same_class(self):
        out = suppress_duplicates([label(0.7), label(0.9)], FilterConfig())
        assert [lb.confidence for lb in out] == [0.9]

    def test_identical_different_class(self):
        out = suppress_duplicates([label(0.7, category=0), label(0.9, category=1)], FilterConfig())
        assert len(out) == 2

    @pytest.mark.parametrize("confidences", list(itertools.permutations([0.9, 0.8, 0.7])))
    def test_three_mutual_overlaps(self, confidences):
        boxes = [(0, 0, 10, 10), (1, 0, 10, 10), (0, 1, 10, 10)]
        assert all(box_iou(a, b) >= 0.6 for a, b in itertools.combinations(boxes, 2))
        labels = [label(p, tuple(map(float, b))) for p, b in zip(confidences, boxes)]
        out = suppress_duplicates(labels, FilterConfig(nms_iou=0.5))
        assert len(out) == 1 and out[0].confidence == 0.9

    def test_disabled(self):
        labels = [label(0.7), label(0.9)]
        assert suppress_duplicates(labels, FilterConfig(nms_enabled=False)) == labels

    def test_tie_break_by_position(self):
        a, b = label(0.8, (5.0, 0.0, 10.0, 10.0)), label(0.8, (4.0, 0.0, 10.0, 10.0))
        assert suppress_duplicates([a, b], FilterConfig()) == [b]


class TestConfig:
    @pytest.mark.parametrize("field", ["rho", "rho_co", "nms_iou", "context_threshold"])
    @pytest.mark.parametrize("value", [0.0, 1.0, -0.1])
    def test_open_interval(self, field, value):
        with pytest.raises(ValidationError):
            FilterConfig(**{field: value})

    def test_warns_when_rho_co_exceeds_rho(self):
        with pytest.warns(UserWarning, match="exceeds"):
            FilterConfig(rho=0.5, rho_co=0.6)


class TestPseudolabelDataset:
    def test_empty(self):
        labels, report = pseudolabel_dataset(DetectionSet([], CATS, IMAGES), CooccurrenceMatrix.uniform(CATS), FilterConfig())
        assert labels == []
        assert report.totals() == {"accepted": 0, "below_rho": 0, "below_rho_co": 0, "suppressed": 0}
        assert report.n_detections == 0

    def test_needs_matrix(self):
        with pytest.raises(ValidationError):
            pseudolabel_dataset(DetectionSet([], CATS, IMAGES), None, FilterConfig())

    def test_dimension_checked(self):
        with pytest.raises(DimensionError):
            pseudolabel_dataset(DetectionSet([], CATS, IMAGES), CooccurrenceMatrix.uniform([1, 2]), FilterConfig())

    @settings(max_examples=60, deadline=None)
    @given(detection_sets(), matrices())
    def test_properties(self, ds, m):
        base = FilterConfig(rho=0.5, rho_co=0.3, nms_enabled=False)
        labels, report = pseudolabel_dataset(ds, m, base)
        assert all(lb.passes() for lb in labels)
        totals = report.totals()
        assert sum(totals.values()) == len(ds) == report.n_detections
        # antitone in rho_co (rho fixed at 0.5)
        chain = [
            accepted_keys(pseudolabel_dataset(ds, m, FilterConfig(rho=0.5, rho_co=c, nms_enabled=False))[0])
            for c in (0.1, 0.2, 0.3, 0.4)
        ]
        assert all(b <= a for a, b in zip(chain, chain[1:]))
        # antitone in the confidence threshold
        one_hot = [
            accepted_keys(pseudolabel_dataset(ds, None, FilterConfig(rho=r, use_cooccurrence=False, nms_enabled=False))[0])
            for r in (0.3, 0.5, 0.7)
        ]
        assert one_hot[2] <= one_hot[1] <= one_hot[0]

    @settings(max_examples=60, deadline=None)
    @given(detection_sets(), st.sampled_from([0.3, 0.5, 0.7]), st.booleans())
    def test_reduction_identity(self, ds, rho, nms):
        ones = CooccurrenceMatrix.uniform(CATS)
        a, _ = pseudolabel_dataset(ds, ones, FilterConfig(rho=rho, rho_co=rho, nms_enabled=nms))
        b, _ = pseudolabel_dataset(ds, None, FilterConfig(rho=rho, use_cooccurrence=False, nms_enabled=nms))
        assert [(x.detection_index, x.category, x.confidence, x.bbox) for x in a] == [
            (x.detection_index, x.category, x.confidence, x.bbox) for x in b
        ]

    @settings(max_examples=40, deadline=None)
    @given(detection_sets(), matrices(), st.randoms())
    def test_order_and_thread_independent(self, ds, m, rnd):
        cfg = FilterConfig(rho=0.5, rho_co=0.2)
        labels, report = pseudolabel_dataset(ds, m, cfg)
        perm = list(range(len(ds)))
        rnd.shuffle(perm)
        shuffled = DetectionSet([ds.detections[k] for k in perm], CATS, IMAGES, "hyp")
        other, other_report = pseudolabel_dataset(shuffled, m, cfg, threads=3)
        key = lambda lb: (lb.image_id, lb.bbox.x, lb.bbox.y, lb.category, lb.confidence)  # noqa: E731
        # within an image only ties between identical boxes can reorder survivors
        assert sorted(map(key, labels)) == sorted(map(key, other))
        assert report.to_dict() == other_report.to_dict()
        again, _ = pseudolabel_dataset(ds, m, cfg, threads=4)
        assert again == labels

    def test_context_monotone_never_flips_accept(self):
        m = matrix_with([[0.0, 0.2, 0.9, 0.0], [1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        d = det(1, 0, 0.6)
        cfg = FilterConfig(rho=0.5, rho_co=0.3)
        rng = random.Random(1)
        for _ in range(200):
            small = {rng.randrange(4) for _ in range(rng.randint(1, 3))}
            big = small | {rng.randrange(4)}
            if cooccurrence_accept(d, small, m, cfg) is not None:
                assert cooccurrence_accept(d, big, m, cfg) is not None

    def test_report_per_class(self):
        ds = DetectionSet(
            [det(1, DOG, 0.9), det(1, DOG, 0.8), det(1, HORSE, 0.4), det(2, APPLE, 0.3, box=(50, 50, 10, 10))],
            CATS,
            IMAGES,
        )
        _, report = pseudolabel_dataset(ds, None, FilterConfig(use_cooccurrence=False))
        d = report.to_dict()["per_class"]
        assert d["2"] == {"accepted": 1, "below_rho": 0, "below_rho_co": 0, "suppressed": 1}
        assert d["3"]["below_rho"] == 1 and d["1"]["below_rho"] == 1
        assert report.accepted_per_class() == {1: 0, 2: 1, 3: 0, 4: 0}

    def test_report_merge_associative(self):
        a, b, c = FilterReport(), FilterReport(), FilterReport()
        a.add(1, "accepted", 2)
        b.add(2, "below_rho", 1)
        c.add(1, "suppressed", 3)
        assert a.merge(b).merge(c).to_dict() == a.merge(b.merge(c)).to_dict()

    def test_save_load_round_trip(self, tmp_path):
        ds = DetectionSet([det(1, DOG, 0.9), det(2, HORSE, 0.8)], CATS, IMAGES, "src")
        cfg = FilterConfig(rho=0.5, rho_co=0.3, context_threshold=0.4)
        labels, _ = pseudolabel_dataset(ds, CooccurrenceMatrix.uniform(CATS), cfg)
        save_pseudolabels(labels, tmp_path / "p.json", CATS, cfg, "src")
        loaded, header = load_pseudolabels(tmp_path / "p.json")
        assert loaded == labels
        assert header["category_ids"] == list(CATS) and FilterConfig.from_dict(header["config"]) == cfg


@pytest.fixture(scope="module")
def scene():
    data = make_scene_dataset(240, seed=11)
    ids = [im.id for im in data.images]
    labeled, held_out = subset(data, ids[:120]), subset(data, ids[120:])
    dets = simulate(held_out, NoiseModel(seed=5, p_detect=0.9, fp_rate=1.0, contextual_fp=True))
    return build_cooccurrence(labeled), dets


class TestSimulatedScenes:
    """Contextually random false positives are what co-occurrence filtering removes."""

    def test_removes_implausible_false_positives(self, scene):
        matrix, dets = scene
        baseline, _ = pseudolabel_dataset(dets, None, FilterConfig(rho=0.5, use_cooccurrence=False))
        withco, _ = pseudolabel_dataset(dets, matrix, FilterConfig(rho=0.5, rho_co=0.3))
        links = dets.truth_links
        fp_base = {lb.detection_index for lb in baseline if links[lb.detection_index] is None}
        fp_co = {lb.detection_index for lb in withco if links[lb.detection_index] is None}
        removed = fp_base - fp_co
        assert removed and len(fp_co) < len(fp_base)
        # every removed false positive was confident, so its scene support must have been weak
        by_index = {lb.detection_index: lb for lb in baseline}
        assert all(by_index[k].confidence > 0.5 for k in removed)

    def test_rho_co_chain_on_simulator(self, scene):
        matrix, dets = scene
        sets = [
            accepted_keys(pseudolabel_dataset(dets, matrix, FilterConfig(rho=0.5, rho_co=c, nms_enabled=False))[0])
            for c in (0.1, 0.2, 0.3, 0.4)
        ]
        assert all(b <= a for a, b in zip(sets, sets[1:]))
        assert len(sets[-1]) < len(sets[0])


def test_scores_helper_sums_to_one():
    assert math.fsum(scores_for(2, 0.55)) == pytest.approx(1.0, abs=1e-15)
    assert tiny_dataset().n_classes == 4
