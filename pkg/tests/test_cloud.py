import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eandt.cloud import (
    CloudFormatError,
    ConfigurationError,
    LabeledCloud,
    NeighborIndex,
    assign_hard_labels,
    decode_cloud,
    encode_cloud,
    k_nearest,
    load_cloud,
    preprocess,
    radius_neighbors,
    save_cloud,
    smooth_label_probs,
    voxel_average_filter,
)
from eandt.labels import SEMANTIC_KITTI_CLASSES, SemanticLabel


def random_cloud(rng, n, names=("road", "building", "pole")):
    probs = rng.random((n, len(names))).astype(np.float32)
    probs /= probs.sum(axis=1, keepdims=True)
    return LabeledCloud(rng.normal(size=(n, 3)) * 10, rng.random(n), probs, list(names))


def test_text_parse_minimal(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nclasses: a b\n0 0 0 1 0.5 0.5\n1 2 3 0 1 0  # trailing\n\n4 5 6 2 0 1\n")
    cloud = load_cloud(p)
    assert len(cloud) == 3
    assert cloud.class_names == ["a", "b"]
    np.testing.assert_array_equal(cloud.positions[1], [1, 2, 3])
    np.testing.assert_array_equal(cloud.probs[2], [0, 1])


def test_text_empty_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    assert len(load_cloud(p, "text-xyzilp")) == 0


@pytest.mark.parametrize("body, line", [
    ("classes: a b\n0 0 0 1 1 0\n1 2\n", 3),
    ("classes: a b\n0 0 0 1 1\n", 2),
    ("0 0 0 1 1 0\n", 1),
    ("classes: a b\n0 0 x 1 1 0\n", 2),
])
def test_text_errors_name_the_line(tmp_path, body, line):
    p = tmp_path / "bad.txt"
    p.write_text(body)
    with pytest.raises(CloudFormatError, match=f"line {line}"):
        load_cloud(p, "text-xyzilp")


def test_binary_roundtrip_bit_exact(tmp_path, rng):
    cloud = random_cloud(rng, 500)
    p = tmp_path / "c.bin"
    save_cloud(cloud, p)
    again = load_cloud(p)
    assert again.class_names == cloud.class_names
    assert again.positions.tobytes() == cloud.positions.tobytes()
    assert again.intensity.tobytes() == cloud.intensity.tobytes()
    assert again.probs.tobytes() == cloud.probs.tobytes()
    save_cloud(again, tmp_path / "d.bin")
    assert (tmp_path / "d.bin").read_bytes() == p.read_bytes()


def test_text_roundtrip(tmp_path, rng):
    cloud = random_cloud(rng, 50)
    save_cloud(cloud, tmp_path / "c.txt", "text-xyzilp")
    again = load_cloud(tmp_path / "c.txt")
    np.testing.assert_array_equal(again.positions, cloud.positions)
    np.testing.assert_array_equal(again.probs, cloud.probs)


def test_binary_empty_roundtrip():
    cloud = LabeledCloud.empty(["x"])
    again = decode_cloud(encode_cloud(cloud))
    assert len(again) == 0 and again.class_names == ["x"]


def test_binary_errors(rng):
    data = encode_cloud(random_cloud(rng, 3))
    with pytest.raises(CloudFormatError, match="magic"):
        decode_cloud(b"NOTACLOUD" + data[9:])
    with pytest.raises(CloudFormatError, match="truncated"):
        decode_cloud(data[:-5])
    with pytest.raises(CloudFormatError, match="trailing"):
        decode_cloud(data + b"\0")


def test_voxel_average_pair():
    cloud = LabeledCloud([[0, 0, 0], [0.004, 0, 0]], [1.0, 3.0], [[1, 0], [0, 1]], ["a", "b"])
    out = voxel_average_filter(cloud, 0.01)
    assert len(out) == 1
    np.testing.assert_allclose(out.positions[0], [0.002, 0, 0])
    np.testing.assert_allclose(out.intensity[0], 2.0)
    np.testing.assert_allclose(out.probs[0], [0.5, 0.5])


def test_voxel_average_separate():
    cloud = LabeledCloud([[0, 0, 0], [0.5, 0, 0]], [1.0, 3.0], [[1, 0], [0, 1]], ["a", "b"])
    out = voxel_average_filter(cloud, 0.01)
    assert len(out) == 2
    np.testing.assert_array_equal(np.sort(out.positions[:, 0]), [0, 0.5])


def test_voxel_average_centroid(rng):
    cloud = random_cloud(rng, 1000)
    cloud.positions[:] = rng.random((1000, 3))
    out = voxel_average_filter(cloud, 10.0)
    assert len(out) == 1
    np.testing.assert_allclose(out.positions[0], cloud.positions.mean(axis=0), rtol=1e-12)


def test_voxel_average_oracle(rng):
    cloud = random_cloud(rng, 2000)
    out = voxel_average_filter(cloud, 3.0)
    groups = {}
    for i, key in enumerate(map(tuple, np.floor(cloud.positions / 3.0).astype(int))):
        groups.setdefault(key, []).append(i)
    assert len(out) == len(groups)
    expect = sorted(tuple(np.round(cloud.positions[ids].mean(axis=0), 9)) for ids in groups.values())
    got = sorted(tuple(np.round(p, 9)) for p in out.positions)
    assert expect == got
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)


def test_voxel_average_rejects_bad_size(rng):
    with pytest.raises(ValueError):
        voxel_average_filter(random_cloud(rng, 3), 0.0)


def test_smooth_isolated_and_coincident():
    cloud = LabeledCloud([[0, 0, 0], [0, 0, 0], [5, 5, 5]], [0, 0, 0], [[1, 0], [0, 1], [0.3, 0.7]], ["a", "b"])
    out = smooth_label_probs(cloud, 0.05)
    np.testing.assert_allclose(out.probs[:2], [[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_allclose(out.probs[2], [0.3, 0.7], rtol=1e-6)
    np.testing.assert_array_equal(out.positions, cloud.positions)


def test_smooth_line_middle_averages_three():
    pos = np.column_stack([np.arange(5) * 0.04, np.zeros(5), np.zeros(5)])
    probs = np.eye(5, dtype=np.float32)
    out = smooth_label_probs(LabeledCloud(pos, np.zeros(5), probs, list("abcde")), 0.05)
    np.testing.assert_allclose(out.probs[2], [0, 1 / 3, 1 / 3, 1 / 3, 0], rtol=1e-6)
    np.testing.assert_allclose(out.probs[0], [0.5, 0.5, 0, 0, 0], rtol=1e-6)


def test_smooth_oracle(rng):
    cloud = random_cloud(rng, 300)
    cloud.positions[:] = rng.random((300, 3))
    out = smooth_label_probs(cloud, 0.15)
    P = cloud.positions
    for i in range(0, 300, 17):
        d2 = ((P - P[i]) ** 2).sum(axis=1)
        m = cloud.probs[d2 <= 0.15 ** 2].astype(np.float64).mean(axis=0)
        np.testing.assert_allclose(out.probs[i], m / m.sum(), rtol=1e-5)


def test_hard_labels():
    names = list(SEMANTIC_KITTI_CLASSES)
    probs = np.zeros((3, len(names)), dtype=np.float32)
    probs[0, names.index("sidewalk")] = 1
    probs[1, names.index("vegetation")] = 1
    probs[2, names.index("building")] = 0.5
    probs[2, names.index("fence")] = 0.5
    out = assign_hard_labels(LabeledCloud(np.zeros((3, 3)), np.zeros(3), probs, names))
    assert list(out.labels) == [SemanticLabel.GROUND, SemanticLabel.OTHER, SemanticLabel.BUILDING]


def test_hard_labels_missing_class():
    cloud = LabeledCloud(np.zeros((1, 3)), [0], [[1.0]], ["spaceship"])
    with pytest.raises(ConfigurationError, match="spaceship"):
        assign_hard_labels(cloud)


def test_preprocess_chain(rng):
    names = ["road", "pole"]
    pos = np.array([[0.001, 0, 0], [0.002, 0, 0], [0.03, 0, 0], [1, 1, 1]])
    probs = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=np.float32)
    out = preprocess(LabeledCloud(pos, np.zeros(4), probs, names))
    assert len(out) == 3
    # the averaged pair and the pole point smooth to a tie, which goes to the lower class
    assert list(out.labels) == [SemanticLabel.GROUND, SemanticLabel.GROUND, SemanticLabel.POLE]


def brute_radius(P, q, r):
    d = P - q
    return np.flatnonzero((d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2] <= r * r)


def test_neighbor_index_matches_brute_force(rng):
    P = rng.random((1000, 3))
    index = NeighborIndex(P)
    for _ in range(50):
        q = rng.random(3)
        r = rng.uniform(0.01, 0.3)
        np.testing.assert_array_equal(radius_neighbors(index, q, r), brute_radius(P, q, r))
        k = int(rng.integers(1, 40))
        d2 = ((P - q) ** 2).sum(axis=1)
        np.testing.assert_array_equal(k_nearest(index, q, k), np.lexsort((np.arange(1000), d2))[:k])


def test_neighbor_index_edge_cases(rng):
    P = rng.random((20, 3))
    index = NeighborIndex(P)
    np.testing.assert_array_equal(index.radius_neighbors(P[3], 0.0), [3])
    d2 = ((P - P[0]) ** 2).sum(axis=1)
    np.testing.assert_array_equal(index.k_nearest(P[0], 20), np.argsort(d2, kind="stable"))
    with pytest.raises(ValueError):
        index.k_nearest(P[0], 21)


def test_k_nearest_ties_by_index():
    P = np.array([[1, 0, 0], [0, 0, 0], [-1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    index = NeighborIndex(P)
    np.testing.assert_array_equal(index.k_nearest([0, 0, 0], 3), [1, 0, 2])
    np.testing.assert_array_equal(index.k_nearest_all(3)[1], [1, 0, 2])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (60, 3), elements=st.floats(-2, 2)), st.floats(0.05, 1.5))
def test_pairs_within_property(P, r):
    pairs = NeighborIndex(P).pairs_within(r)
    got = set(map(tuple, pairs.tolist()))
    expect = {(i, j) for i in range(60) for j in brute_radius(P, P[i], r) if j > i}
    assert got == expect
