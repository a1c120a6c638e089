import numpy as np
import pytest

from crossreg.geometry import (GeometryError, ParseError, PointCloud, RigidTransform, SpatialIndex,
                               apply_transform, bounding_sphere, load_cloud, load_transform,
                               nearest_neighbor, rotation_about_axis, save_cloud, save_transform)


def random_transform(rng, scale=1.0):
    return RigidTransform(rotation_about_axis(rng.normal(size=3), rng.uniform(-180, 180)),
                          rng.normal(size=3), scale)


def test_cloud_is_immutable_copy():
    src = np.zeros((3, 3))
    c = PointCloud(src)
    src[0, 0] = 5.0
    assert c.points[0, 0] == 0.0
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


@pytest.mark.parametrize("bad", [
    dict(points=[[0, 0, np.nan]]),
    dict(points=[[0, 0, 0]], normals=[[0, 0, 2]]),
    dict(points=[[0, 0, 0]], curvature=[-1.0]),
    dict(points=[[0, 0]]),
])
def test_cloud_validation(bad):
    with pytest.raises(GeometryError):
        PointCloud(**bad)


def test_transform_validation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(GeometryError):
        RigidTransform(scale=0.0)
    with pytest.raises(GeometryError):
        RigidTransform(np.full((3, 3), 0.5))


def test_inverse_and_compose():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = random_transform(rng, rng.uniform(0.5, 2))
        u = random_transform(rng)
        pts = rng.normal(size=(30, 3))
        back = t.inverse().apply_points(t.apply_points(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)
        np.testing.assert_allclose(t.compose(u).apply_points(pts),
                                   t.apply_points(u.apply_points(pts)), atol=1e-12)


def test_matrix_roundtrip():
    rng = np.random.default_rng(1)
    t = random_transform(rng, 1.7)
    r = RigidTransform.from_matrix(t.matrix())
    np.testing.assert_allclose(r.matrix(), t.matrix(), atol=1e-12)


def test_rotation_about_axis_angle():
    rot = rotation_about_axis([0, 0, 1], 90)
    np.testing.assert_allclose(rot @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert RigidTransform(rotation_about_axis([1, 2, 3], 37.0)).rotation_angle_deg() == pytest.approx(37.0)


def test_apply_transform_identity_returns_input_and_moves_normals():
    c = PointCloud([[1.0, 0, 0]], [[1.0, 0, 0]])
    assert apply_transform(c, RigidTransform.identity()) is c
    t = RigidTransform(rotation_about_axis([0, 0, 1], 90), [0, 0, 5])
    moved = apply_transform(c, t)
    np.testing.assert_allclose(moved.points, [[0, 1, 5]], atol=1e-15)
    np.testing.assert_allclose(moved.normals, [[0, 1, 0]], atol=1e-15)


def test_nearest_matches_linear_scan():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(500, 3))
    q = rng.normal(size=(200, 3))
    ids, dist = SpatialIndex(pts).nearest(q)
    d = np.linalg.norm(pts[None] - q[:, None], axis=2)
    np.testing.assert_array_equal(ids, d.argmin(axis=1))
    np.testing.assert_array_equal(dist, d.min(axis=1))


def test_nearest_ties_go_to_lowest_id():
    # eight equidistant cube corners, listed in reverse
    corners = np.array([[x, y, z] for x in (1, -1) for y in (1, -1) for z in (1, -1)], float)
    idx = SpatialIndex(corners)
    assert nearest_neighbor(idx, [0, 0, 0]) == (0, pytest.approx(np.sqrt(3)))
    dup = SpatialIndex(np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 0]]))
    assert nearest_neighbor(dup, [0, 0, 0])[0] == 1


def test_empty_index_raises():
    with pytest.raises(GeometryError):
        SpatialIndex(np.zeros((0, 3))).nearest([[0, 0, 0]])


def test_within_is_sorted_and_inclusive():
    pts = np.array([[2.0, 0, 0], [1.0, 0, 0], [0.5, 0, 0]])
    np.testing.assert_array_equal(SpatialIndex(pts).within([0, 0, 0], 1.0), [1, 2])


def test_bounding_sphere_is_centroid_centred():
    s = bounding_sphere(np.array([[0.0, 0, 0], [0, 0, 0], [3, 0, 0]]))
    np.testing.assert_allclose(s.center, [1, 0, 0])
    assert s.radius == pytest.approx(2.0)


@pytest.mark.parametrize("suffix", [".xyz", ".ply"])
def test_cloud_roundtrip_exact(tmp_path, suffix):
    rng = np.random.default_rng(3)
    nrm = rng.normal(size=(40, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    c = PointCloud(rng.normal(size=(40, 3)), nrm)
    save_cloud(c, tmp_path / f"c{suffix}")
    back = load_cloud(tmp_path / f"c{suffix}")
    np.testing.assert_array_equal(back.points, c.points)
    np.testing.assert_allclose(back.normals, c.normals, atol=1e-15)


def test_xyz_parse_error_names_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("# header\n0 0 0\n1 2\n")
    with pytest.raises(ParseError) as err:
        load_cloud(p)
    assert err.value.line_no == 3


def test_ply_truncated_body(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n")
    with pytest.raises(ParseError):
        load_cloud(p)


def test_transform_file_roundtrip(tmp_path):
    t = random_transform(np.random.default_rng(4), 1.3)
    save_transform(t, tmp_path / "t.txt")
    np.testing.assert_allclose(load_transform(tmp_path / "t.txt").matrix(), t.matrix(), atol=1e-12)
