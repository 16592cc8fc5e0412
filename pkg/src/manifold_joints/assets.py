"""Procedural test geometry: icospheres and a capsule-limb quadruped proxy.

The quadruped is a smooth union of capsules around a twelve-joint skeleton,
meshed with marching cubes.  Coordinates: x forward, y to the animal's left,
z up, meters, ground at z = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes

from .mesh_core import Bone, Joint, Mesh, Skeleton, SkinWeights


def icosphere(level: int = 4, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron; level k has 10 * 4**k + 2 vertices."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return Mesh(np.array(v) * radius, np.array(f))


# --------------------------------------------------------------------------
# Quadruped proxy

# name, position, parent
QUADRUPED_JOINTS = (
    ("Illium joint", (-0.62, 0.00, 1.30), None),
    ("Front spine", (0.55, 0.00, 1.22), "Illium joint"),
    ("Hip joint left", (-0.55, 0.17, 1.02), "Illium joint"),
    ("Hip joint right", (-0.55, -0.17, 1.02), "Illium joint"),
    ("Stifle joint left", (-0.45, 0.20, 0.66), "Hip joint left"),
    ("Stifle joint right", (-0.45, -0.20, 0.66), "Hip joint right"),
    ("Tarsal joint left", (-0.60, 0.20, 0.38), "Stifle joint left"),
    ("Tarsal joint right", (-0.60, -0.20, 0.38), "Stifle joint right"),
    ("Elbow joint left", (0.50, 0.19, 0.78), "Front spine"),
    ("Elbow joint right", (0.50, -0.19, 0.78), "Front spine"),
    ("Carpal joint left", (0.52, 0.19, 0.36), "Elbow joint left"),
    ("Carpal joint right", (0.52, -0.19, 0.36), "Elbow joint right"),
)

QUADRUPED_BONES = (
    ("Spine", ("Front spine", "Illium joint")),
    ("Ilium left", ("Illium joint", "Hip joint left")),
    ("Ilium right", ("Illium joint", "Hip joint right")),
    ("Femur left", ("Hip joint left", "Stifle joint left")),
    ("Femur right", ("Hip joint right", "Stifle joint right")),
    ("Tibia left", ("Stifle joint left", "Tarsal joint left")),
    ("Tibia right", ("Stifle joint right", "Tarsal joint right")),
    ("Scapula left", ("Front spine", "Elbow joint left")),
    ("Scapula right", ("Front spine", "Elbow joint right")),
    ("Radius left", ("Elbow joint left", "Carpal joint left")),
    ("Radius right", ("Elbow joint right", "Carpal joint right")),
)


def quadruped_skeleton() -> Skeleton:
    joints = tuple(Joint(n, p, parent) for n, p, parent in QUADRUPED_JOINTS)
    bones = tuple(Bone(n, pair) for n, pair in QUADRUPED_BONES)
    return Skeleton(joints, bones)


@dataclass(frozen=True)
class Capsule:
    start: np.ndarray
    end: np.ndarray
    radius: float
    joint: str  # skinning joint that carries this segment


def _quadruped_capsules(sk: Skeleton) -> list[Capsule]:
    P = sk.position
    caps = []

    def add(a, b, r, joint):
        caps.append(Capsule(np.asarray(a, float), np.asarray(b, float), r, joint))

    # trunk, neck and head hang off the two spine joints
    add((-0.70, 0.0, 1.05), (0.45, 0.0, 1.05), 0.30, "Illium joint")
    add(P("Front spine") + (0.05, 0, -0.07), (0.95, 0.0, 1.30), 0.15, "Front spine")
    add((0.95, 0.0, 1.30), (1.15, 0.0, 1.10), 0.11, "Front spine")
    for side in ("left", "right"):
        hip, stifle, tarsal = P(f"Hip joint {side}"), P(f"Stifle joint {side}"), P(f"Tarsal joint {side}")
        elbow, carpal = P(f"Elbow joint {side}"), P(f"Carpal joint {side}")
        hoof = np.array([0.0, 0.0, 0.04])
        add(hip, stifle, 0.11, f"Hip joint {side}")
        add(stifle, tarsal, 0.065, f"Stifle joint {side}")
        add(tarsal, (tarsal[0] + 0.03, tarsal[1], 0.0) + hoof, 0.05, f"Tarsal joint {side}")
        add(elbow + (0, 0, 0.15), elbow, 0.10, "Front spine")
        add(elbow, carpal, 0.065, f"Elbow joint {side}")
        add(carpal, (carpal[0] + 0.02, carpal[1], 0.0) + hoof, 0.05, f"Carpal joint {side}")
    return caps


def _capsule_distance(points: np.ndarray, cap: Capsule) -> np.ndarray:
    ab = cap.end - cap.start
    t = np.clip(((points - cap.start) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (cap.start + t[:, None] * ab), axis=1) - cap.radius


def _smooth_min(d: np.ndarray, k: float) -> np.ndarray:
    # exponential smooth-min over axis 0
    m = d.min(axis=0)
    return m - k * np.log(np.exp(-(d - m) / k).sum(axis=0))


def quadruped_proxy(
    spacing: float = 0.025, blend: float = 0.02, weight_falloff: float = 0.015, snap: float = 0.1
) -> tuple[Mesh, Skeleton]:
    """Marching-cubes mesh of the capsule quadruped with skinning weights.

    Grid samples within ``snap * spacing`` of the surface are pushed out to
    that distance before contouring.  This keeps vertices off grid corners,
    which otherwise produce zero-area faces and slivers, at the cost of
    moving the surface by at most that much.
    """
    sk = quadruped_skeleton()
    caps = _quadruped_capsules(sk)
    lo = np.array([-1.15, -0.45, -0.05])
    hi = np.array([1.35, 0.45, 1.50])
    axes = [np.arange(lo[i], hi[i] + spacing, spacing) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d = np.stack([_capsule_distance(grid, c) for c in caps])
    sdf = _smooth_min(d, blend).reshape(len(axes[0]), len(axes[1]), len(axes[2]))
    eps = snap * spacing
    near = np.abs(sdf) < eps
    sdf[near] = np.where(sdf[near] < 0, -eps, eps)
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(spacing,) * 3)
    verts = verts.astype(np.float64) + lo
    faces = faces.astype(np.int64)

    joint_names = sk.names
    dv = np.stack([_capsule_distance(verts, c) for c in caps])  # (caps, V)
    w_caps = np.exp(-(dv - dv.min(axis=0)) / weight_falloff)
    w_caps[w_caps < 1e-4] = 0.0
    W = np.zeros((len(verts), len(joint_names)))
    for ci, cap in enumerate(caps):
        W[:, joint_names.index(cap.joint)] += w_caps[ci]
    W /= W.sum(axis=1, keepdims=True)
    return Mesh(verts, faces, SkinWeights(tuple(joint_names), W)), sk


def _rotate_about(points: np.ndarray, pivot: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
    return (points - pivot) @ R.T + pivot


def _descendants(sk: Skeleton, name: str) -> list[str]:
    out = []
    stack = [name]
    while stack:
        cur = stack.pop()
        for c in sk.children(cur):
            out.append(c)
            stack.append(c)
    return out


def walk_pose(sk: Skeleton, phase: float, swing_deg: float = 18.0, knee_deg: float = 15.0) -> Skeleton:
    """Quadruped walking pose at ``phase`` (radians) by rotating leg subtrees about y.

    Diagonal pairs (left hind with right fore) move together.
    """
    pos = {j.name: j.position.copy() for j in sk.joints}
    y = np.array([0.0, 1.0, 0.0])
    legs = [
        ("Hip joint left", "Stifle joint left", 0.0),
        ("Hip joint right", "Stifle joint right", np.pi),
        ("Elbow joint left", None, np.pi),
        ("Elbow joint right", None, 0.0),
    ]
    for root, knee, offset in legs:
        s = np.sin(phase + offset)
        swing = np.deg2rad(swing_deg) * s
        names = _descendants(sk, root)
        pts = np.array([pos[n] for n in names])
        pts = _rotate_about(pts, pos[root], y, swing)
        for n, p in zip(names, pts):
            pos[n] = p
        if knee is not None:
            bend = np.deg2rad(knee_deg) * max(0.0, np.cos(phase + offset))
            names = _descendants(sk, knee)
            pts = _rotate_about(np.array([pos[n] for n in names]), pos[knee], y, -bend)
            for n, p in zip(names, pts):
                pos[n] = p
    return sk.with_positions(np.array([pos[n] for n in sk.names]))


def walk_cycle(sk: Skeleton, n_frames: int = 18, stride: float = 0.05) -> list[Skeleton]:
    """``n_frames`` consecutive poses over one gait cycle, advancing along x."""
    frames = []
    for i in range(n_frames):
        phase = 2 * np.pi * i / n_frames
        posed = walk_pose(sk, phase)
        frames.append(posed.with_positions(posed.positions + np.array([stride * i, 0.0, 0.0])))
    return frames
