from importlib.resources import files

import numpy as np
import pytest
import yaml

from eandt.labels import SemanticLabel
from eandt.pipeline import PipelineConfig, extract_primitives
from eandt.synth import CylinderSpec, GroundSpec, SceneSpec, generate_scene, load_scene_spec, mini_suburb, save_scene_spec

from conftest import small_spec

L = SemanticLabel


def test_same_seed_same_cloud(small_scene):
    cloud, _ = small_scene
    again, _ = generate_scene(small_spec())
    assert again.positions.tobytes() == cloud.positions.tobytes()
    assert np.array_equal(again.labels, cloud.labels)
    other, _ = generate_scene(small_spec(seed=1))
    assert other.positions.tobytes() != cloud.positions.tobytes()


def test_truth_covers_every_point(small_scene):
    cloud, truth = small_scene
    ids = np.sort(np.concatenate([p.point_ids for p in truth.primitives]))
    np.testing.assert_array_equal(ids, np.arange(len(cloud)))
    np.testing.assert_array_equal(truth.true_labels, cloud.labels)
    assert not truth.clutter.any()


def test_primitives_recovered(small_scene):
    cloud, truth = small_scene
    prims = extract_primitives(cloud, PipelineConfig())
    for label in (L.BUILDING, L.FENCE, L.POLE, L.TRAFFIC_SIGN, L.TREE_TRUNK):
        assert len(prims[label]) == truth.count(label), label.key
        assert len({r.instance_index for r in prims[label]}) == truth.instances(label), label.key
    assert len(prims[L.GROUND]) >= 1


def test_clutter_outliers_and_label_noise():
    cloud, truth = generate_scene(small_spec(clutter_fraction=0.1, outlier_fraction=0.02,
                                             label_noise_fraction=0.05))
    assert 0.07 < truth.clutter.mean() < 0.12
    assert np.count_nonzero(truth.point_primitive == -1) == pytest.approx(0.02 * len(cloud), rel=0.2)
    flipped = np.mean(truth.true_labels != cloud.labels)
    assert 0.03 < flipped < 0.08


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(clutter_fraction=0.9)
    with pytest.raises(ValueError):
        small_spec(outlier_fraction=-0.1)


def test_spec_yaml_roundtrip(tmp_path):
    spec = small_spec(seed=7, clutter_fraction=0.05)
    save_scene_spec(spec, tmp_path / "s.yaml")
    again = load_scene_spec(tmp_path / "s.yaml")
    assert again.to_dict() == spec.to_dict()
    a, _ = generate_scene(spec)
    b, _ = generate_scene(again)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_packaged_mini_suburb_matches_code():
    doc = yaml.safe_load(files("eandt").joinpath("data/mini_suburb.yaml").read_text())
    assert SceneSpec.from_dict(doc).to_dict() == mini_suburb().to_dict()


def test_mini_suburb_size_and_ranking():
    cloud, truth = generate_scene(mini_suburb())
    assert 1_000_000 <= len(cloud) <= 2_000_000
    counts = {label: len(cloud.label_ids(label)) for label in L if label != L.OTHER}
    order = [L.GROUND, L.BUILDING, L.TREE_TRUNK, L.FENCE, L.POLE, L.TRAFFIC_SIGN]
    assert [counts[k] for k in order] == sorted((counts[k] for k in order), reverse=True)
    assert truth.count(L.POLE) == 10 and truth.count(L.BUILDING) == 16


def test_single_ground_plane_counts():
    spec = SceneSpec(ground=GroundSpec(extent=(10.0, 10.0), density=100.0))
    cloud, truth = generate_scene(spec)
    assert len(cloud) == pytest.approx(10_000, rel=0.05)
    assert len(truth.primitives) == 1 and truth.primitives[0].kind == "ground"


def test_single_pole_truth_length():
    _, truth = generate_scene(SceneSpec(ground=None, poles=[CylinderSpec((0.0, 0.0), 3.0)]))
    (pole,) = truth.primitives
    assert pole.label == L.POLE and pole.params["length"] == pytest.approx(3.0)
