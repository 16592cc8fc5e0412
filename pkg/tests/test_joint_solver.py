import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from manifold_joints import assets
from manifold_joints.distance_targets import DistanceField
from manifold_joints.joint_solver import (
    AnchorError,
    AnchorSet,
    BoneStats,
    JointEstimate,
    bone_length_stats,
    joint_errors,
    linear_system,
    multilaterate,
    read_estimates_csv,
    select_area_of_interest,
    solve_all_joints,
    write_estimates_csv,
)
from manifold_joints.mesh_core import Bone, Joint, Skeleton
from manifold_joints.synth_scan import ScanCloud


def hemisphere(rng, k=50, r=0.3):
    v = rng.normal(size=(k, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[:, 2] = np.abs(v[:, 2])
    return r * v


def cloud_of(points):
    n = len(points)
    return ScanCloud(points, np.zeros(n), np.tile([0, 0, 1.0], (n, 1)), np.zeros(n))


def random_config(seed, k):
    rng = np.random.default_rng(seed)
    P = rng.uniform(-1, 1, (k, 3))
    x = rng.uniform(-1, 1, 3)
    return P, x, np.linalg.norm(P - x, axis=1)


# ---------------------------------------------------------- area of interest


def test_select_sorted_distances():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    a = select_area_of_interest(pts, np.arange(10.0), 4)
    assert a.indices.tolist() == [0, 1, 2, 3]
    assert np.array_equal(a.anchor, pts[0])


def test_select_ties_by_index():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    a = select_area_of_interest(pts, np.ones(10), 5)
    assert a.indices.tolist() == [0, 1, 2, 3, 4]


def test_select_whole_cloud_and_anchor_lowest_index():
    pts = np.random.default_rng(0).normal(size=(6, 3))
    a = select_area_of_interest(cloud_of(pts), [5, 4, 3, 2, 1, 0.0], 6)
    assert a.indices.tolist() == list(range(6))
    b = select_area_of_interest(pts, [9, 0, 9, 1, 2, 3.0], 4)
    assert b.indices.tolist() == [1, 3, 4, 5]
    assert np.array_equal(b.anchor, pts[1])
    assert b.distances[0] == 0.0


def test_select_errors():
    pts = np.zeros((3, 3))
    with pytest.raises(AnchorError):
        select_area_of_interest(pts, np.zeros(3), 4)
    with pytest.raises(AnchorError):
        select_area_of_interest(np.zeros((10, 3)), np.zeros(10), 3)
    with pytest.raises(AnchorError):
        select_area_of_interest(np.zeros((10, 3)), np.r_[np.zeros(3), np.full(7, np.inf)], 4)


# ------------------------------------------------------------ multilateration


def test_unit_cube_example():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    d = np.array([math.sqrt(3), math.sqrt(2), math.sqrt(2), math.sqrt(2)])
    est = multilaterate(AnchorSet.from_points(P, d))
    assert np.abs(est.position - 1.0).max() <= 1e-9
    assert est.residual <= 1e-9 and est.flags == ()


def test_unit_cube_linear_system_by_hand():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    d = np.array([math.sqrt(3), math.sqrt(2), math.sqrt(2), math.sqrt(2)])
    H, b = linear_system(AnchorSet.from_points(P, d))
    assert np.array_equal(H, 2 * np.eye(3))
    # 1 - 2 + 3 = 2 per row, and 2x = 2 gives x = 1
    assert np.allclose(b, 2.0)


def test_joint_at_anchor():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(8, 3))
    est = multilaterate(AnchorSet.from_points(P, np.linalg.norm(P - P[0], axis=1)))
    assert np.abs(est.position - P[0]).max() <= 1e-9


@given(st.integers(0, 2**32 - 1), st.integers(4, 60))
def test_exact_recovery(seed, k):
    P, x, d = random_config(seed, k)
    assume(np.linalg.svd(P - P.mean(0), compute_uv=False)[2] > 1e-2)
    est = multilaterate(AnchorSet.from_points(P, d))
    assert np.linalg.norm(est.position - x) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_linearisation_rows(seed):
    P, x, d = random_config(seed, 12)
    a = AnchorSet.from_points(P, d)
    H, b = linear_system(a)
    # anchor-relative sphere i minus anchor sphere, evaluated at the true point
    q, xr = P[1:] - P[0], x - P[0]
    lhs = np.sum((xr - q) ** 2, axis=1) - d[1:] ** 2 - (xr @ xr - d[0] ** 2)
    assert np.abs(H @ xr - b + lhs).max() < 1e-9
    assert np.abs(H @ xr - b).max() < 1e-9


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_translation_equivariance(seed, t):
    rng = np.random.default_rng(seed)
    P = hemisphere(rng, 20)
    x = rng.normal(0, 0.05, 3)
    d = np.abs(np.linalg.norm(P - x, axis=1) + rng.normal(0, 0.01, 20))
    a = multilaterate(AnchorSet.from_points(P, d)).position
    b = multilaterate(AnchorSet.from_points(P + t, d)).position
    assert np.abs(b - (a + t)).max() <= 1e-9


def test_coplanar_anchors_flagged():
    P = np.column_stack([np.random.default_rng(0).normal(size=(10, 2)), np.zeros(10)])
    x = np.array([0.1, 0.2, 0.5])
    a = select_area_of_interest(P, np.linalg.norm(P - x, axis=1), 10)
    assert a.coplanar
    est = multilaterate(a)
    assert "ridge" in est.flags
    assert np.all(np.isfinite(est.position))
    # in-plane components are still recovered
    assert np.abs(est.position[:2] - x[:2]).max() < 1e-6


def test_inconsistent_distances_give_large_residual():
    P = hemisphere(np.random.default_rng(0), 20)
    d = np.random.default_rng(1).uniform(0, 1, 20)
    est = multilaterate(AnchorSet.from_points(P, d))
    assert est.residual > 0.05 and not est.failed


def _mean_error(sigma, seeds=100):
    errs = []
    x = np.array([0.01, -0.02, 0.05])
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        P = hemisphere(rng)
        d = np.maximum(np.linalg.norm(P - x, axis=1) + rng.normal(0, sigma, len(P)), 0)
        errs.append(np.linalg.norm(multilaterate(AnchorSet.from_points(P, d)).position - x))
    return float(np.mean(errs))


def test_hemisphere_noise_example():
    assert _mean_error(0.005) < 0.02


def test_monotone_degradation():
    errs = [_mean_error(s) for s in (0.0, 0.005, 0.01, 0.02)]
    assert errs == sorted(errs)


# --------------------------------------------------------------- all joints


def test_solve_all_isolates_failures():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(60, 3))
    joints = np.array([[0.1, 0, 0], [0, 0.2, 0]])
    D = np.linalg.norm(pts[:, None] - joints[None], axis=2)
    D = np.column_stack([D[:, 0], np.full(60, np.inf), D[:, 1]])
    est = solve_all_joints(cloud_of(pts), DistanceField(D, "dmax", ("a", "dead", "b")), k=20)
    assert [e.name for e in est] == ["a", "dead", "b"]
    assert est[1].failed and np.all(np.isnan(est[1].position))
    assert np.linalg.norm(est[0].position - joints[0]) < 1e-9
    assert np.linalg.norm(est[2].position - joints[1]) < 1e-9


def test_solve_single_joint_and_checks():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    D = np.linalg.norm(pts, axis=1)[:, None]
    est = solve_all_joints(cloud_of(pts), DistanceField(D, "predicted", ("only",)), k=10)
    assert len(est) == 1 and np.linalg.norm(est[0].position) < 1e-9
    with pytest.raises(ValueError):
        solve_all_joints(cloud_of(pts), DistanceField(D, "euclidean", ("only",)))
    with pytest.raises(ValueError):
        solve_all_joints(cloud_of(pts[:20]), DistanceField(D, "dmax", ("only",)))


def test_oracle_all_joints_within_a_millimetre(quadruped_rest):
    _, sk, cloud, fields = quadruped_rest
    est = solve_all_joints(cloud, fields["dmax"], 50)
    errs = joint_errors(est, sk).per_joint
    assert max(errs.values()) <= 1e-3


def test_oracle_trunk_joints_exact(quadruped_rest):
    _, sk, cloud, fields = quadruped_rest
    errs = joint_errors(solve_all_joints(cloud, fields["dmax"], 50), sk).per_joint
    for name in ("Hip joint left", "Hip joint right", "Front spine", "Illium joint"):
        assert errs[name] < 5e-3


def test_oracle_small_area_of_interest_is_exact(quadruped_rest):
    _, sk, cloud, fields = quadruped_rest
    errs = joint_errors(solve_all_joints(cloud, fields["dmax"], 10), sk).per_joint
    assert sum(e < 1e-9 for e in errs.values()) >= 10
    assert max(errs.values()) < 5e-3


# --------------------------------------------------------------- evaluation


def test_joint_error_examples():
    sk = assets.quadruped_skeleton()
    exact = [JointEstimate(j.name, j.position.copy(), 0.0, 50) for j in sk.joints]
    t = joint_errors(exact, sk)
    assert t.mean == 0 and t.std == 0 and set(t.per_joint.values()) == {0.0}
    moved = list(exact)
    moved[3] = JointEstimate(moved[3].name, moved[3].position + [0.03, 0, 0], 0.0, 50)
    t = joint_errors(moved, sk)
    assert t.per_joint[moved[3].name] == pytest.approx(0.03)
    assert t.mean == pytest.approx(0.0025)
    with pytest.raises(KeyError):
        joint_errors([JointEstimate("nope", np.zeros(3), 0.0, 4)], sk)


def test_joint_errors_brute_force():
    sk = assets.quadruped_skeleton()
    rng = np.random.default_rng(4)
    est = [JointEstimate(j.name, j.position + rng.normal(0, 0.05, 3), 0.0, 50) for j in sk.joints]
    t = joint_errors(est, sk)
    errs = [math.dist(e.position, sk.position(e.name)) for e in est]
    mean = sum(errs) / len(errs)
    std = math.sqrt(sum((e - mean) ** 2 for e in errs) / len(errs))
    assert t.mean == pytest.approx(mean, abs=1e-12) and t.std == pytest.approx(std, abs=1e-12)


def _bone_frames(lengths):
    return [Skeleton((Joint("a", [0, 0, 0]), Joint("b", [0, 0, L])), (Bone("ab", ("a", "b")),)) for L in lengths]


def test_bone_stats_examples():
    s = bone_length_stats(_bone_frames([1.0, 1.0, 1.0]), _bone_frames([1])[0].bones)["ab"]
    assert s.std == 0 and s.min == s.max == s.mean == 1.0
    s = bone_length_stats(_bone_frames([1.0, 1.0, 1.3]), _bone_frames([1])[0].bones)["ab"]
    assert (s.mean, s.min, s.max) == pytest.approx((1.1, 1.0, 1.3))
    with pytest.raises(ValueError):
        bone_length_stats([], ())


def test_bone_stats_excludes_missing_frames():
    frames = [{"a": np.zeros(3), "b": np.array([0, 0, 1.0])}, {"a": np.zeros(3)}, {"a": np.zeros(3), "b": np.full(3, np.nan)}]
    s = bone_length_stats(frames, (Bone("ab", ("a", "b")),))["ab"]
    assert s == BoneStats(1.0, 0.0, 1.0, 1.0, 1, 2)


def test_bone_stats_rigid_rotation():
    sk = assets.quadruped_skeleton()
    frames = []
    for i in range(18):
        a = 2 * np.pi * i / 18
        R = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
        frames.append(sk.with_positions(sk.positions @ R.T + [0.1 * i, 0, 0]))
    for s in bone_length_stats(frames, sk.bones).values():
        assert s.std < 1e-9


def test_estimates_csv_round_trip(tmp_path):
    est = [
        JointEstimate("Hip joint left", np.array([0.1, 1 / 3, -2.0]), 1e-4, 50, ("ridge",)),
        JointEstimate("x", np.full(3, np.nan), float("nan"), 50, ("failed: no anchors",)),
    ]
    write_estimates_csv(est, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "joint_name,x,y,z,residual_m,k,flags"
    back = read_estimates_csv(tmp_path / "e.csv")
    assert back[0].position.tobytes() == est[0].position.tobytes()
    assert back[0].flags == ("ridge",) and back[1].failed
