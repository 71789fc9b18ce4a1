import numpy as np
import pytest

from vsua.boxmath import Box, ImageSize
from vsua.graph import DetectedObject, DetectedRelation, SceneDetections


def make_object(i, box, label=0, attrs=(), d_v=4, rng=None):
    feat = (rng.normal(size=d_v) if rng is not None else np.zeros(d_v))
    return DetectedObject(i, Box(*box), label, 0.9, feat, tuple(attrs))


def random_scene(rng, n_obj=None, d_v=4, canvas=100.0, n_labels=3, n_attr=4, n_pred=3,
                 image_id=0):
    n_obj = n_obj or int(rng.integers(1, 6))
    objs = []
    for i in range(n_obj):
        w, h = rng.uniform(5, 50, size=2)
        cx, cy = rng.uniform(0, canvas, size=2)
        k = int(rng.integers(0, n_attr))
        attrs = sorted(((int(rng.integers(1, n_attr + 1)), float(rng.uniform()))
                        for _ in range(k)), key=lambda a: -a[1])
        objs.append(DetectedObject(i, Box(cx, cy, w, h), int(rng.integers(0, n_labels)),
                                   float(rng.uniform()), rng.normal(size=d_v), tuple(attrs)))
    rels = []
    for i in range(n_obj):
        for j in range(n_obj):
            if i != j and rng.uniform() < 0.5:
                rels.append(DetectedRelation(i, j, int(rng.integers(0, n_pred)),
                                             float(rng.uniform())))
    return SceneDetections(image_id, ImageSize(canvas, canvas), tuple(objs), tuple(rels))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the one-line verdict of an acceptance criterion."""
    def put(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok
    return put


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
