import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manifold_joints import assets
from manifold_joints.mesh_core import (
    DEFAULT_JOINT_NAMES,
    Bone,
    Joint,
    Mesh,
    MeshError,
    Skeleton,
    SkeletonError,
    SkinWeights,
    bone_lengths,
    clean_mesh,
    fan_triangulate,
    load_mesh,
    load_skeleton,
    load_skin_weights,
    save_mesh,
    save_skeleton,
    validate_mesh,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# ---------------------------------------------------------------- loading


def test_single_triangle_obj(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.n_vertices == 3 and m.n_faces == 1
    assert m.faces.tolist() == [[0, 1, 2]]


def test_quad_is_fan_triangulated(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_mesh(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    shared = set(m.faces[0]) & set(m.faces[1])
    assert shared == {0, 2}


def test_obj_slash_records_and_negative_indices(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3/1/1 -2/2/1 -1/3/1\n")
    assert load_mesh(p).faces.tolist() == [[0, 1, 2]]


def test_icosphere_ply_face_count(tmp_path, ico4):
    p = tmp_path / "ico.ply"
    save_mesh(ico4, p)
    m = load_mesh(p)
    assert m.n_vertices == 2562
    # genus 0: V - E + F = 2 with E = 3F/2
    assert m.n_faces == 5120 == 2 * (m.n_vertices - 2)
    assert len(m.edges()) == 3 * m.n_faces // 2


def test_ascii_ply_polygon(tmp_path):
    p = tmp_path / "quad.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
    )
    assert load_mesh(p).faces.tolist() == [[0, 1, 2], [0, 2, 3]]


@pytest.mark.parametrize(
    "name,text",
    [
        ("bad.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n"),
        ("bad.stl", "solid x\n"),
        ("bad2.obj", "v 0 0 zero\n"),
    ],
)
def test_load_errors(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(p)


def test_missing_file(tmp_path):
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "nope.obj")


@given(arrays(np.float64, (6, 3), elements=finite))
def test_mesh_round_trip(tmp_path_factory, verts):
    faces = np.array([[0, 1, 2], [3, 4, 5], [0, 2, 4]])
    m = Mesh(verts, faces)
    d = tmp_path_factory.mktemp("rt")
    for ext in ("obj", "ply"):
        save_mesh(m, d / f"m.{ext}")
        back = load_mesh(d / f"m.{ext}")
        assert np.abs(back.vertices - verts).max() <= 1e-6
        assert np.array_equal(back.faces, faces)


def _polygon_area(points):
    # Newell normal: exact area of a planar polygon
    n = np.zeros(3)
    for a, b in zip(points, np.roll(points, -1, axis=0)):
        n += np.cross(a, b)
    return 0.5 * np.linalg.norm(n)


@given(st.integers(3, 12), st.integers(0, 10_000))
def test_fan_triangulation_preserves_area(n, seed):
    rng = np.random.default_rng(seed)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    if np.min(np.diff(np.r_[ang, ang[0] + 2 * np.pi])) < 1e-3:
        return
    poly2 = np.column_stack([np.cos(ang), np.sin(ang)]) * rng.uniform(0.5, 2.0)
    R = random_rotation(rng)
    pts = np.column_stack([poly2, np.zeros(n)]) @ R.T + rng.normal(size=3)
    tris = fan_triangulate(list(range(n)))
    m = Mesh(pts, tris)
    assert m.face_areas().sum() == pytest.approx(_polygon_area(pts), rel=1e-9)


def test_fan_triangulate_rejects_short_polygon():
    with pytest.raises(MeshError):
        fan_triangulate([0, 1])


# ------------------------------------------------------------- validation


def test_validate_closed_icosphere(ico4):
    r = validate_mesh(ico4)
    assert (r.boundary_edges, r.non_manifold_edges, r.components, r.degenerate_faces) == (0, 0, 1, 0)
    assert r.ok


def test_validate_single_triangle():
    r = validate_mesh(Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]))
    assert r.boundary_edges == 3 and r.components == 1


def test_validate_two_triangles_brute_force():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]])
    counts = {}
    for f in m.faces:
        for a, b in itertools.combinations(sorted(f), 2):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    r = validate_mesh(m)
    assert r.boundary_edges == sum(c == 1 for c in counts.values()) == 4
    assert r.interior_edges == sum(c == 2 for c in counts.values()) == 1


def test_validate_non_manifold_and_components():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [5, 5, 5], [6, 5, 5], [5, 6, 5]]
    m = Mesh(v, [[0, 1, 2], [0, 1, 3], [0, 1, 4], [5, 6, 7]])
    r = validate_mesh(m)
    assert r.non_manifold_edges == 1
    assert r.components == 2
    assert not r.ok


def test_degenerate_reported_not_removed():
    m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    r = validate_mesh(m)
    assert r.degenerate_faces == 1
    assert m.n_faces == 2
    assert clean_mesh(m).n_faces == 1


def test_mesh_arrays_are_read_only(ico4):
    with pytest.raises(ValueError):
        ico4.vertices[0, 0] = 1.0


def test_face_index_out_of_range():
    with pytest.raises(MeshError):
        Mesh([[0, 0, 0]], [[0, 1, 2]])


# ---------------------------------------------------------------- weights


def test_skin_weights_must_sum_to_one():
    with pytest.raises(MeshError):
        SkinWeights(("a", "b"), [[0.5, 0.4]])
    with pytest.raises(MeshError):
        SkinWeights(("a", "b"), [[1.5, -0.5]])
    SkinWeights(("a", "b"), [[0.5, 0.5 + 5e-7]])


def test_skin_weights_round_trip_through_skeleton_file(tmp_path):
    sk = Skeleton((Joint("a", [0, 0, 0]), Joint("b", [0, 0, 1], "a")))
    sw = SkinWeights(("a", "b"), [[1.0, 0.0], [0.25, 0.75], [0.0, 1.0]])
    save_skeleton(sk, tmp_path / "s.yaml", sw)
    back = load_skin_weights(tmp_path / "s.yaml", 3)
    assert back.joint_names == ("a", "b")
    assert np.array_equal(back.matrix, sw.matrix)


# --------------------------------------------------------------- skeleton


def test_twelve_joint_skeleton_file(tmp_path):
    sk = assets.quadruped_skeleton()
    save_skeleton(sk, tmp_path / "cow.yaml")
    back = load_skeleton(tmp_path / "cow.yaml")
    assert len(back) == 12
    assert set(back.names) == set(DEFAULT_JOINT_NAMES)
    assert np.array_equal(back.positions, sk.positions)


def test_json_skeleton(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"joints": [{"name": "only", "position": [1, 2, 3]}]}))
    sk = load_skeleton(p)
    assert len(sk) == 1 and sk.bones == ()


@pytest.mark.parametrize(
    "doc",
    [
        {"joints": [{"name": "Hip", "position": [0, 0, 0]}], "bones": [{"name": "b", "joints": ["Hip", "HipQ"]}]},
        {"joints": [{"name": "a", "position": [0, 0, 0]}, {"name": "a", "position": [0, 0, 1]}]},
        {"joints": [{"name": "a", "position": [0, 0, 0], "parent": "ghost"}]},
        {"joints": [{"name": "a"}]},
        {"bones": []},
    ],
)
def test_skeleton_errors(tmp_path, doc):
    p = tmp_path / "s.yaml"
    p.write_text(json.dumps(doc))
    with pytest.raises(SkeletonError):
        load_skeleton(p)


def test_malformed_skeleton_text(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("joints: [unclosed\n")
    with pytest.raises(SkeletonError):
        load_skeleton(p)


@pytest.mark.parametrize(
    "a,b,expected", [((0, 0, 0), (0, 0, 1), 1.0), ((1, 1, 1), (1, 1, 1), 0.0), ((1, 2, 2), (0, 0, 0), 3.0)]
)
def test_bone_lengths_examples(a, b, expected):
    sk = Skeleton((Joint("p", a), Joint("q", b)), (Bone("pq", ("p", "q")),))
    assert bone_lengths(sk) == {"pq": expected}


@given(st.integers(0, 2**32 - 1))
def test_bone_lengths_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    sk = assets.quadruped_skeleton()
    R = random_rotation(rng)
    moved = sk.with_positions(sk.positions @ R.T + rng.normal(0, 5, 3))
    a, b = bone_lengths(sk), bone_lengths(moved)
    for k in a:
        assert abs(a[k] - b[k]) <= 1e-9
