import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strandrecon.camera import Camera, look_at
from strandrecon.mesh import TriMesh
from strandrecon.strands import (ScalpSurface, StrandError, StrandSet, build_billboards,
                                 catmull_rom_matrix, generate_synthetic_scene,
                                 interpolate_children, nearest_four_guides,
                                 resample_polyline, sample_child_roots, subdivide_catmull_rom,
                                 turning_angles)


def _catmull_rom_point(p0, p1, p2, p3, t):
    # textbook uniform Catmull-Rom segment, evaluated independently of the matrix form
    return 0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t ** 2
                  + (-p0 + 3 * p1 - 3 * p2 + p3) * t ** 3)


def test_subdivide_two_vertices_midpoint():
    out = subdivide_catmull_rom([[0, 0, 0], [1, 0, 0]], 2)
    assert out.shape == (3, 3)
    np.testing.assert_allclose(out[1], [0.5, 0, 0], atol=1e-15)


def test_subdivide_factor_one_identity():
    s = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(subdivide_catmull_rom(s, 1), s)


def test_subdivide_collinear_uniform():
    s = np.outer(np.arange(4.0), [1.0, 2.0, -1.0])
    out = subdivide_catmull_rom(s, 4)
    assert len(out) == 13
    gaps = np.linalg.norm(np.diff(out, axis=0), axis=1)
    np.testing.assert_allclose(gaps, gaps[0], rtol=1e-12)
    np.testing.assert_allclose(np.cross(out - out[0], [1.0, 2.0, -1.0]), 0, atol=1e-12)


def test_subdivide_matches_textbook_basis():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(5, 3))
    out = subdivide_catmull_rom(s, 3)
    ext = np.concatenate([[2 * s[0] - s[1]], s, [2 * s[-1] - s[-2]]])
    for seg in range(4):
        for j in range(3):
            want = _catmull_rom_point(*ext[seg:seg + 4], j / 3)
            np.testing.assert_allclose(out[3 * seg + j], want, atol=1e-12)
    np.testing.assert_array_equal(out[-1], s[-1])


def test_subdivide_rejects_short_strand():
    with pytest.raises(StrandError):
        subdivide_catmull_rom([[0, 0, 0]], 2)


def test_subdivide_resample_regression():
    t = np.linspace(0, np.pi, 12)
    s = np.stack([np.cos(t), np.sin(t), 0.3 * t], axis=1) * 10
    fine = subdivide_catmull_rom(s, 4)
    back = resample_polyline(fine, len(s))
    length = np.linalg.norm(np.diff(s, axis=0), axis=1).sum()
    assert np.abs(back - resample_polyline(s, len(s))).max() < 0.01 * length


def _front_camera():
    return Camera(1000.0, 1000.0, 64.0, 64.0, 128, 128, np.eye(3), np.zeros(3))


def test_billboard_counts():
    cam = _front_camera()
    one = StrandSet.from_list([[[0, 0, 1000], [5, 0, 1000]]])
    bb = build_billboards(one, cam, 0.2)
    assert len(bb.triangles) == 1  # the lone segment is the tip
    for n in (3, 5, 9):
        s = np.stack([np.linspace(0, 10, n), np.zeros(n), np.full(n, 1000.0)], 1)
        bb = build_billboards(StrandSet.from_list([s]), cam, 0.2)
        assert len(bb.triangles) == 2 * (n - 2) + 1


def test_billboard_projected_width():
    cam = _front_camera()
    s = StrandSet.from_list([[[0, 0, 1000], [0, 5, 1000], [0, 10, 1000]]])
    bb = build_billboards(s, cam, 0.2)
    xy, _ = cam.project(bb.vertices[:2])
    assert abs(np.linalg.norm(xy[0] - xy[1]) - 0.2) < 1e-3


def test_billboard_width_perpendicular_to_view_and_segment():
    cam = look_at([30, -20, -200], [0, 0, 0], [0, -1, 0], 500, 500, 64, 64)
    rng = np.random.default_rng(1)
    pts = np.cumsum(rng.normal(size=(6, 3)), axis=0)
    bb = build_billboards(StrandSet.from_list([pts]), cam, 0.4)
    off = bb.vertices[0] - bb.vertices[1]
    assert abs(np.linalg.norm(off) - 0.4) < 1e-12
    view = pts[0] - cam.center
    assert abs(off @ view) < 1e-9 * np.linalg.norm(view)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_billboard_midpoints_reproject(seed):
    rng = np.random.default_rng(seed)
    cam = look_at(rng.normal(size=3) * 5 + [0, 0, -150], [0, 0, 0], [0, -1, 0], 400, 400, 96, 96)
    pts = np.cumsum(rng.normal(size=(5, 3)), axis=0)
    bb = build_billboards(StrandSet.from_list([pts]), cam, 0.3)
    mids = 0.5 * (bb.vertices[bb.vertex_sign > 0] + bb.vertices[bb.vertex_sign < 0])
    src = bb.vertex_src[bb.vertex_sign > 0]
    a, _ = cam.project(mids)
    b, _ = cam.project(pts[src])
    assert np.abs(a - b).max() < 1e-6


def test_billboard_degenerate_view_parallel():
    cam = _front_camera()
    # second segment points straight along the view ray
    pts = [[0, 0, 1000], [1, 0, 1000], [1, 0, 1010], [2, 0, 1010]]
    bb = build_billboards(StrandSet.from_list([pts]), cam, 0.2)
    assert np.all(np.isfinite(bb.vertices))
    assert abs(np.linalg.norm(bb.vertices[0] - bb.vertices[1]) - 0.2) < 1e-12


def test_billboard_behind_camera_dropped():
    cam = _front_camera()
    pts = [[0, 0, -10], [0, 1, -5], [0, 2, 50], [0, 3, 100]]
    bb = build_billboards(StrandSet.from_list([pts]), cam, 0.2)
    # both segments touching the vertex behind the camera are dropped
    assert list(bb.prim_first_tri[:2]) == [-1, -1]
    assert len(bb.triangles) == 1


def _triangle_scalp():
    return ScalpSurface(TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]),
                                np.array([[0, 1, 2]])))


def test_sample_child_roots_counts():
    scene = generate_synthetic_scene("straight", 60, 0, seed=1)
    pos, nrm = sample_child_roots(scene.scalp, 50000, seed=0)
    assert pos.shape == (50000, 3)
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1, atol=1e-12)
    p0, _ = sample_child_roots(scene.scalp, 0, seed=0)
    assert len(p0) == 0


def test_sample_child_roots_inside_single_triangle_and_spread():
    scalp = _triangle_scalp()
    pos, _ = sample_child_roots(scalp, 4, seed=0)
    x, y = pos[:, 0], pos[:, 1]
    assert np.all(x > 0) and np.all(y > 0) and np.all(x + y < 1)

    def min_gap(p):
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        return d[np.triu_indices(len(p), 1)].min()

    rng = np.random.default_rng(0)
    baseline = []
    for _ in range(100):
        u = rng.random((4, 2))
        flip = u.sum(1) > 1
        u[flip] = 1 - u[flip]
        baseline.append(min_gap(u))
    gaps = [min_gap(sample_child_roots(scalp, 4, seed=s)[0][:, :2]) for s in range(100)]
    assert np.mean(gaps) > np.mean(baseline)


def test_sample_child_roots_area_proportional():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [3, 0, 0], [3, 1, 0.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3], [1, 4, 5], [1, 5, 2]])
    mesh = TriMesh(v, tris)
    pos, _ = sample_child_roots(ScalpSurface(mesh), 100_000, seed=4)
    # triangle containing each sample, by half-plane tests on the strip layout
    in_right = pos[:, 0] > 1
    upper = pos[:, 1] > np.where(in_right, (pos[:, 0] - 1) / 2, pos[:, 0])
    counts = np.array([(~in_right & ~upper).sum(), (~in_right & upper).sum(),
                       (in_right & ~upper).sum(), (in_right & upper).sum()])
    expect = mesh.areas / mesh.areas.sum() * len(pos)
    assert np.all(np.abs(counts - expect) / expect < 0.05)


def test_nearest_four_guides_weights():
    g = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [2, 2, 0], [10, 10, 0.0]])
    m = nearest_four_guides(g, [[1, 1, 0]])
    np.testing.assert_allclose(m.weights[0], 0.25)
    assert set(m.indices[0]) == {0, 1, 2, 3}
    m = nearest_four_guides(g, [[2, 0, 0]])
    assert m.weights[0][0] == 1.0 and m.indices[0][0] == 1
    assert np.all(m.weights[0][1:] == 0)
    g2 = np.array([[1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0.0]])
    m = nearest_four_guides(g2, [[0, 0, 0]])
    order = np.argsort(m.indices[0])
    np.testing.assert_allclose(m.weights[0][order], [1 / 3, 1 / 3, 1 / 6, 1 / 6])
    with pytest.raises(ValueError):
        nearest_four_guides(g2[:3], [[0, 0, 0]])


def _four_guides():
    rng = np.random.default_rng(2)
    roots = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [2, 2, 0.0]])
    shapes = rng.normal(size=(4, 6, 3)).cumsum(axis=1)
    shapes -= shapes[:, :1]
    return StrandSet.from_array(roots[:, None] + shapes), roots, shapes


def test_interpolate_children_cases():
    guides, roots, shapes = _four_guides()
    m = nearest_four_guides(roots, [[2, 2, 0]])
    child = interpolate_children(guides, m, [[2, 2, 0]])
    np.testing.assert_allclose(child.points, guides.strand(3), atol=1e-14)
    m = nearest_four_guides(roots, [[1, 1, 0]])
    child = interpolate_children(guides, m, [[1, 1, 0]])
    np.testing.assert_allclose(child.points - [1, 1, 0], shapes.mean(axis=0), atol=1e-14)
    straight = np.outer(np.arange(6.0), [0, 0, 1])
    same = roots[:, None] + straight[None]
    child = interpolate_children(StrandSet.from_array(same), m, [[1, 1, 0]])
    assert abs(child.lengths()[0] - 5.0) < 1e-12


def test_interpolate_children_linear_in_offsets():
    guides, roots, shapes = _four_guides()
    croots = np.array([[0.5, 0.3, 0], [1.7, 1.2, 0]])
    m = nearest_four_guides(roots, croots)
    a = interpolate_children(guides, m, croots).as_array()
    scaled = StrandSet.from_array(roots[:, None] + 2.5 * shapes)
    b = interpolate_children(scaled, m, croots).as_array()
    np.testing.assert_allclose(b - croots[:, None], 2.5 * (a - croots[:, None]), atol=1e-12)


def test_interpolate_children_mismatched_counts():
    g = StrandSet.from_list([np.zeros((3, 3)) + [[0, 0, 0], [0, 0, 1], [0, 0, 2]]] * 3
                            + [[[0, 0, 0], [0, 0, 1]]])
    m = nearest_four_guides(g.roots + np.arange(4)[:, None], [[0, 0, 0]])
    with pytest.raises(StrandError):
        interpolate_children(g, m, [[0, 0, 0]])


def test_synthetic_scene_invariants():
    scene = generate_synthetic_scene("straight", 100, 300, seed=5)
    assert scene.guides.n_strands == 100
    r = np.linalg.norm(scene.guides.points, axis=1)
    roots = scene.guides.roots
    np.testing.assert_allclose(np.linalg.norm(roots, axis=1), scene.head_radius, rtol=1e-12)
    np.testing.assert_allclose(roots, scene.scalp.vertices, atol=1e-9)
    nonroot = np.ones(len(r), bool)
    nonroot[scene.guides.root_index] = False
    assert np.all(r[nonroot] > scene.head_radius)
    scene.head.check_watertight()
    scene.shell.check_watertight()


def test_synthetic_scene_deterministic():
    a = generate_synthetic_scene("wavy", 80, 200, seed=3)
    b = generate_synthetic_scene("wavy", 80, 200, seed=3)
    assert a.children.points.tobytes() == b.children.points.tobytes()
    assert a.guides.points.tobytes() == b.guides.points.tobytes()


def test_curly_turns_more_than_straight():
    c = generate_synthetic_scene("curly", 100, 0, seed=0).guides
    s = generate_synthetic_scene("straight", 100, 0, seed=0).guides
    assert turning_angles(c).mean() > turning_angles(s).mean()


def test_catmull_rom_rows_are_affine():
    W = catmull_rom_matrix(6, 3)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-14)
