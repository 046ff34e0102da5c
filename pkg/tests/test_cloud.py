import numpy as np
import pytest

from heatflow.cloud import (
    CloudError,
    EmptyInputError,
    ParseError,
    PlyFormatError,
    PointCloud,
    SynthSpec,
    normalize_unit_sphere,
    parse_ply_ascii,
    parse_xyz,
    read_cloud,
    surface_distance,
    synth_shape,
    write_xyz,
)


def test_parse_two_points():
    c = parse_xyz("0 0 0\n1 0 0\n")
    assert c.n == 2
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 0, 0]])


def test_parse_skips_comments():
    c = parse_xyz("# header\n0.5 -0.5 2.0\n")
    np.testing.assert_array_equal(c.points, [[0.5, -0.5, 2.0]])


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as e:
        parse_xyz("a b c\n")
    assert e.value.line == 1
    with pytest.raises(ParseError) as e:
        parse_xyz("0 0 0\n\n1 2\n")
    assert e.value.line == 3


def test_parse_empty_input():
    with pytest.raises(EmptyInputError):
        parse_xyz("# nothing\n\n")


def test_extra_columns_ignored():
    c = parse_xyz("1 2 3 0.1 0.2 0.3\n")
    np.testing.assert_array_equal(c.points, [[1, 2, 3]])


PLY_ONE = """ply
format ascii 1.0
element vertex 1
property float x
property float y
property float z
end_header
1 2 3
"""


def test_ply_single_vertex():
    np.testing.assert_array_equal(parse_ply_ascii(PLY_ONE).points, [[1, 2, 3]])


def test_ply_count_mismatch():
    with pytest.raises(PlyFormatError):
        parse_ply_ascii(PLY_ONE.replace("vertex 1", "vertex 2"))


def test_ply_binary_rejected():
    with pytest.raises(PlyFormatError):
        parse_ply_ascii(PLY_ONE.replace("format ascii 1.0", "format binary_little_endian 1.0"))


def test_ply_property_order_and_extras():
    text = """ply
format ascii 1.0
comment made by hand
element vertex 2
property float nx
property float z
property float y
property float x
element face 0
property list uchar int vertex_indices
end_header
9 3 2 1
9 6 5 4
"""
    np.testing.assert_array_equal(parse_ply_ascii(text).points, [[1, 2, 3], [4, 5, 6]])


def test_read_cloud_dispatch(tmp_path):
    (tmp_path / "a.ply").write_text(PLY_ONE)
    (tmp_path / "b.xyz").write_text("4 5 6\n")
    assert read_cloud(tmp_path / "a.ply").points.tolist() == [[1, 2, 3]]
    assert read_cloud(tmp_path / "b.xyz").points.tolist() == [[4, 5, 6]]


def test_write_format():
    assert write_xyz(PointCloud([[0, 0, 0]])) == "0.000000 0.000000 0.000000\n"


def test_round_trip_random():
    pts = np.random.default_rng(0).uniform(-10, 10, (100, 3))
    back = parse_xyz(write_xyz(PointCloud(pts)))
    assert np.max(np.abs(back.points - pts)) < 1e-6


def test_empty_cloud_unrepresentable():
    with pytest.raises(EmptyInputError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(EmptyInputError):
        write_xyz(None)


def test_cloud_validation():
    with pytest.raises(CloudError):
        PointCloud([[0, 0]])
    with pytest.raises(CloudError):
        PointCloud([[0, 0, np.nan]])
    c = PointCloud([[0, 0, 0]])
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_normalize_pair():
    x, tf = normalize_unit_sphere(PointCloud([[2, 0, 0], [4, 0, 0]]))
    np.testing.assert_allclose(x.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-12)
    np.testing.assert_allclose(tf.centroid, [3, 0, 0])
    assert tf.scale == 1.0


def test_normalize_single_point():
    x, tf = normalize_unit_sphere(PointCloud([[5, 5, 5]]))
    np.testing.assert_array_equal(x.points, [[0, 0, 0]])
    assert tf.scale == 1.0


def test_normalize_idempotent():
    pts = np.random.default_rng(1).standard_normal((50, 3))
    x, _ = normalize_unit_sphere(PointCloud(pts))
    y, tf = normalize_unit_sphere(x)
    np.testing.assert_allclose(y.points, x.points, atol=1e-9)
    assert abs(tf.scale - 1) < 1e-9 and np.all(np.abs(tf.centroid) < 1e-9)


def test_normalize_inverse():
    pts = np.random.default_rng(2).standard_normal((40, 3)) * 7 + 3
    x, tf = normalize_unit_sphere(PointCloud(pts))
    assert np.max(np.abs(tf.inverse(x).points - pts)) < 1e-6
    assert np.all(np.abs(x.points.mean(axis=0)) < 1e-9)
    assert abs(np.linalg.norm(x.points, axis=1).max() - 1) < 1e-9


def test_sphere_on_surface():
    clean, _ = synth_shape(SynthSpec("sphere", 100))
    assert np.all(np.abs(np.linalg.norm(clean.points, axis=1) - 1) < 1e-9)


def test_sphere_noise_level():
    spec = SynthSpec("sphere", 100, noise=0.02, seed=3)
    _, noisy = synth_shape(spec)
    d = surface_distance(noisy.points, spec).mean()
    assert 0.01 <= d <= 0.03


@pytest.mark.parametrize("shape", ["sphere", "torus", "plane-grid", "circle"])
def test_synth_deterministic(shape):
    spec = SynthSpec(shape, 64, noise=0.01, seed=5)
    a, b = synth_shape(spec), synth_shape(spec)
    assert a[0] == b[0] and a[1] == b[1]
    assert a[0].n == 64
    assert np.all(surface_distance(a[0].points, spec) < 1e-9)


def test_synth_seed_changes_output():
    a = synth_shape(SynthSpec("torus", 64, 0.01, seed=1))[1]
    b = synth_shape(SynthSpec("torus", 64, 0.01, seed=2))[1]
    assert a != b
