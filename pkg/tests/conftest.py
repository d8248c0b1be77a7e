import numpy as np
import pytest

from eandt.cloud import LabeledCloud
from eandt.labels import SEMANTIC_KITTI_CLASSES, SemanticLabel
from eandt.synth import BuildingSpec, CylinderSpec, FenceSpec, GroundSpec, SceneSpec, SignSpec, generate_scene


def make_cloud(positions, labels=None, class_names=("a", "b")):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    c = len(class_names)
    probs = np.zeros((n, c), dtype=np.float32)
    if c:
        probs[:, 0] = 1.0
    return LabeledCloud(positions, np.zeros(n), probs, list(class_names), labels)


def labeled(positions, label):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return make_cloud(positions, np.full(len(positions), int(SemanticLabel.parse(label))),
                      SEMANTIC_KITTI_CLASSES)


def small_spec(seed=0, **kw) -> SceneSpec:
    """A 30 x 12 m block with one of everything; ~90k points."""
    return SceneSpec(
        ground=GroundSpec(extent=(30.0, 12.0), density=150.0, undulation=0.05),
        buildings=[BuildingSpec((15.31, 9.2), (8.0, 4.0), 4.0, 0.07, 200.0)],
        fences=[FenceSpec([[2.17, 5.43], [9.81, 5.61]], 1.4, 250.0)],
        poles=[CylinderSpec((4.27, 2.13), 3.0, 0.08, 600.0), CylinderSpec((20.63, 2.41), 3.0, 0.08, 600.0)],
        trunks=[CylinderSpec((25.37, 4.71), 3.0, 0.2, 800.0)],
        signs=[SignSpec((4.27, 1.98, 2.3), (0.6, 0.6), 0.0, 1000.0)],
        seed=seed, **kw,
    )


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(small_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one (criterion, passed, detail) entry per acceptance check, printed at the end of the run
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
