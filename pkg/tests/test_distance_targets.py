import logging
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manifold_joints.distance_targets import (
    LOG_EPS,
    DistanceField,
    FieldFormatError,
    corrupt_field,
    dmax_field,
    euclidean_field,
    invert_target,
    log_target,
    manifold_field,
    read_field,
    write_field,
)
from manifold_joints.geodesics import GeodesicField, build_laplacian, dijkstra_geodesic, heat_geodesic
from manifold_joints.mesh_core import Joint, Mesh, Skeleton
from manifold_joints.synth_scan import CameraRig, ScanCloud, raycast_scan


def field(values, kind="dmax", names=None):
    values = np.asarray(values, dtype=float)
    names = names or tuple(f"j{i}" for i in range(values.shape[1]))
    return DistanceField(values, kind, names)


def one_face_cloud(bary):
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    b = np.atleast_2d(bary)
    A, B, C = mesh.vertices
    pts = b[:, 2:3] * A + b[:, 0:1] * B + b[:, 1:2] * C
    return mesh, ScanCloud(pts, np.zeros(len(b)), b, np.zeros(len(b)))


# -------------------------------------------------------------- Euclidean


def test_euclidean_examples():
    sk = Skeleton((Joint("a", [3, 4, 0]), Joint("b", [0, 0, 0])))
    cloud = ScanCloud([[0, 0, 0]], [0], [[0, 0, 1]], [0])
    f = euclidean_field(cloud, sk)
    assert f.values.tolist() == [[5.0, 0.0]]


def test_euclidean_matches_double_loop():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3))
    sk = Skeleton(tuple(Joint(f"j{i}", p) for i, p in enumerate(rng.normal(size=(5, 3)))))
    f = euclidean_field(ScanCloud(pts, np.zeros(40), np.tile([0, 0, 1.0], (40, 1)), np.zeros(40)), sk)
    for i in range(40):
        for j in range(5):
            ref = math.sqrt(sum((pts[i][c] - sk.positions[j][c]) ** 2 for c in range(3)))
            assert abs(f.values[i, j] - ref) <= 1e-12


# --------------------------------------------------------------- manifold


def test_manifold_vertex_and_constant_fields():
    mesh, cloud = one_face_cloud([[0, 0, 1], [1, 0, 0], [0.2, 0.3, 0.5]])
    g = GeodesicField(np.array([2.0, 5.0, 7.0]), "j", offset=0.1)
    c = GeodesicField(np.array([3.0, 3.0, 3.0]), "k", offset=0.25)
    f = manifold_field(cloud, mesh, [g, c])
    assert f.values[0, 0] == 2.0 + 0.1
    assert f.values[1, 0] == 5.0 + 0.1
    assert np.allclose(f.values[:, 1], 3.25, atol=1e-15)
    assert manifold_field(cloud, mesh, [g], include_offset=False).values[0, 0] == 2.0


def test_manifold_propagates_infinity(caplog):
    mesh, cloud = one_face_cloud([[0, 0, 1], [0.5, 0.5, 0.0]])
    g = GeodesicField(np.array([1.0, np.inf, 2.0]), "j")
    with caplog.at_level(logging.WARNING):
        f = manifold_field(cloud, mesh, [g])
    # zero weight on the infinite corner is still unreachable
    assert np.all(np.isinf(f.values[:, 0]))
    assert "unreachable" in caplog.text


def test_manifold_face_out_of_range():
    mesh, cloud = one_face_cloud([[0, 0, 1]])
    bad = ScanCloud(cloud.points, [3], cloud.bary, [0])
    with pytest.raises(IndexError):
        manifold_field(bad, mesh, [GeodesicField(np.zeros(3), "j")])


def _sphere_scan_gap(ico4, reference):
    op = build_laplacian(ico4)
    pole = int(np.argmax(ico4.vertices[:, 2]))
    g = heat_geodesic(ico4, op, {pole: 1.0})
    cloud = raycast_scan(ico4, CameraRig.ring(center=(0, 0, 0), height=0.8, resolution=(60, 50)))
    mf = manifold_field(cloud, ico4, [g]).values[:, 0]
    if reference == "dijkstra":
        near = np.argmin(np.linalg.norm(cloud.points[:, None] - ico4.vertices[None], axis=2), axis=1)
        ref = dijkstra_geodesic(ico4, pole).distances[near]
    else:
        cos = cloud.points @ ico4.vertices[pole] / np.linalg.norm(cloud.points, axis=1)
        ref = np.arccos(np.clip(cos, -1, 1))
    mask = ref > 2 * ico4.mean_edge_length()
    return np.mean(np.abs(mf - ref)[mask] / ref[mask])


@pytest.mark.xfail(strict=True, reason="edge-graph Dijkstra is about 6% long on the sphere; the gap measures 7.2%")
def test_manifold_vs_snapped_dijkstra(ico4):
    assert _sphere_scan_gap(ico4, "dijkstra") <= 0.06


def test_manifold_vs_great_circle(ico4):
    assert _sphere_scan_gap(ico4, "analytic") <= 0.02


# -------------------------------------------------------------------- max


def test_dmax_examples(caplog):
    m, e = field([[0.7, 0.3, np.inf]], "manifold"), field([[0.3, 0.3, 0.4]], "euclidean")
    with caplog.at_level(logging.WARNING):
        d, replaced = dmax_field(m, e)
    assert d.values.tolist() == [[0.7, 0.3, 0.4]]
    assert replaced == 1
    assert "replaced 1" in caplog.text
    with pytest.raises(ValueError):
        dmax_field(field([[1.0]], "manifold"), field([[1.0, 2.0]], "euclidean"))
    with pytest.raises(ValueError):
        dmax_field(field([[1.0]], "manifold", ("a",)), field([[1.0]], "euclidean", ("b",)))


@given(arrays(np.float64, (20, 4), elements=st.floats(0, 5)), arrays(np.float64, (20, 4), elements=st.floats(0, 5)))
def test_dmax_dominates_exactly(a, b):
    m, e = field(a, "manifold"), field(b, "euclidean")
    d, _ = dmax_field(m, e)
    assert np.all(d.values >= m.values) and np.all(d.values >= e.values)


# -------------------------------------------------------------- log target


def test_log_target_examples():
    L = log_target(field([[1.0, math.exp(-1), 0.0, 2.0]])).values[0]
    assert L[0] == 0.0 and math.copysign(1.0, L[0]) == 1.0
    assert L[1] == pytest.approx(0.1, abs=1e-15)
    assert L[2] == pytest.approx(1.3815510557964274, abs=1e-12)
    assert L[3] < 0  # D > 1 m keeps its negative sign
    with pytest.raises(ValueError):
        log_target(field([[1.0]], "euclidean"))


def test_invert_examples():
    D = invert_target(field([[0.0, 0.1]], "log_target")).values[0]
    assert D[0] == 1.0 and D[1] == pytest.approx(math.exp(-1), rel=1e-15)
    back = invert_target(log_target(field([[0.25]]))).values[0, 0]
    assert back == pytest.approx(0.25, rel=1e-12)
    with pytest.raises(ValueError):
        invert_target(field([[1.0]], "dmax"))


def test_log_target_strictly_decreasing():
    D = np.sort(np.random.default_rng(0).uniform(LOG_EPS, 10, 10_000))
    D = np.unique(D)
    L = log_target(field(D[:, None])).values[:, 0]
    assert np.all(np.diff(L) < 0)


@given(arrays(np.float64, (50, 1), elements=st.floats(LOG_EPS, 100)))
def test_round_trip_property(D):
    back = invert_target(log_target(field(D))).values
    assert np.all(np.abs(back - D) <= 1e-12 * D)


# ------------------------------------------------------------------ noise


def test_corrupt_examples():
    base = field(np.full((1000, 100), 0.5))
    assert np.array_equal(corrupt_field(base, 0.0).values, base.values)
    a, b = corrupt_field(base, 0.01, seed=3), corrupt_field(base, 0.01, seed=3)
    assert np.array_equal(a.values, b.values)
    assert a.kind == "predicted" and "0.01" in a.source
    std = (a.values - base.values).std()
    assert 0.0095 <= std <= 0.0105
    assert np.all(corrupt_field(field(np.zeros((100, 3))), 0.5).values >= 0)
    with pytest.raises(ValueError):
        corrupt_field(base, -1.0)


# ------------------------------------------------------------------- files


@given(
    arrays(np.float64, st.tuples(st.integers(0, 30), st.integers(1, 5)), elements=st.floats(allow_nan=True, allow_infinity=True)),
    st.sampled_from(["log_target", "predicted"]),
    st.text(max_size=20),
)
def test_field_round_trip_bitwise(tmp_path_factory, values, kind, source):
    names = tuple(f"joint é{i}" for i in range(values.shape[1]))
    f = DistanceField(values, kind, names, source)
    p = tmp_path_factory.mktemp("f") / "x.dfld"
    write_field(f, p)
    back = read_field(p)
    assert back.values.tobytes() == f.values.tobytes()
    assert (back.kind, back.joint_names, back.source) == (kind, names, source)


def test_empty_field_file(tmp_path):
    f = field(np.zeros((0, 12)))
    write_field(f, tmp_path / "e.dfld")
    back = read_field(tmp_path / "e.dfld")
    assert back.values.shape == (0, 12)


def test_header_layout(tmp_path):
    write_field(field([[1.0, 2.0]], "dmax", ("a", "b")), tmp_path / "h.dfld")
    data = (tmp_path / "h.dfld").read_bytes()
    assert data[:4] == b"DFLD"
    assert struct.unpack("<HBQH", data[4:17]) == (1, 2, 1, 2)
    assert data[-16:] == struct.pack("<2d", 1.0, 2.0)


def test_corrupt_files(tmp_path):
    p = tmp_path / "f.dfld"
    write_field(field([[1.0, 2.0], [3.0, 4.0]]), p)
    data = p.read_bytes()
    cases = {
        "magic": b"XFLD" + data[4:],
        "truncated": data[:-3],
        "trailing": data + b"\0",
        "version": data[:4] + struct.pack("<H", 9) + data[6:],
        "kind": data[:6] + bytes([77]) + data[7:],
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.dfld"
        bad.write_bytes(blob)
        with pytest.raises(FieldFormatError):
            read_field(bad)


def test_consumer_side_size_check():
    f = field(np.zeros((10, 2)), names=("a", "b"))
    with pytest.raises(FieldFormatError, match="10 rows"):
        f.check_matches(11)
    with pytest.raises(FieldFormatError, match="expected 3 joint columns"):
        f.check_matches(10, ("a", "b", "c"))
    f.check_matches(10, ("a", "b"))


def test_negative_distances_rejected():
    with pytest.raises(ValueError):
        field([[-0.1]], "euclidean")
