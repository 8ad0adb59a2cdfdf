import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cooclabel.dataset import (  # noqa: E402
    AnnotatedDataset,
    BBox,
    Category,
    Detection,
    GroundTruthBox,
    ImageRecord,
)

# Four classes over five images; apple co-occurs most with horse.
TOY_PRESENCE = {
    1: ["apple", "horse"],
    2: ["apple", "horse", "dog"],
    3: ["dog", "bike"],
    4: ["dog", "horse", "bike"],
    5: ["apple", "apple", "bike"],
}
TOY_IDS = {"apple": 1, "dog": 2, "horse": 3, "bike": 4}


def toy_dict() -> dict:
    images = [{"id": i, "width": 100, "height": 100, "file_name": f"img{i}.jpg"} for i in TOY_PRESENCE]
    categories = [{"id": cid, "name": name} for name, cid in TOY_IDS.items()]
    annotations = []
    ann_id = 1
    for image_id, names in TOY_PRESENCE.items():
        for slot, name in enumerate(names):
            annotations.append(
                {"id": ann_id, "image_id": image_id, "category_id": TOY_IDS[name], "bbox": [slot * 30.0, 10.0, 25.0, 40.0]}
            )
            ann_id += 1
    return {"images": images, "categories": categories, "annotations": annotations}


@pytest.fixture
def toy_data() -> dict:
    return toy_dict()


@pytest.fixture
def toy_path(tmp_path, toy_data) -> Path:
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(toy_data))
    return path


@pytest.fixture
def toy_dataset(toy_path):
    from cooclabel.dataset import load_annotations

    return load_annotations(toy_path)


def scores_for(index: int, p: float, n: int = 4) -> tuple[float, ...]:
    """Probability vector with ``p`` at ``index`` and the rest spread evenly."""
    rest = (1.0 - p) / (n - 1)
    return tuple(p if k == index else rest for k in range(n))


def det(image_id: int, index: int, p: float, box=(10.0, 10.0, 20.0, 20.0), n: int = 4) -> Detection:
    return Detection(image_id, BBox(*box), scores=scores_for(index, p, n))


def tiny_dataset(n_classes: int = 4, n_images: int = 3) -> AnnotatedDataset:
    images = [ImageRecord(i, 100, 100, f"{i}.jpg") for i in range(1, n_images + 1)]
    categories = [Category(k + 1, f"c{k + 1}") for k in range(n_classes)]
    return AnnotatedDataset(images, categories, [GroundTruthBox(1, 1, 1, BBox(0.0, 0.0, 10.0, 10.0))])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
