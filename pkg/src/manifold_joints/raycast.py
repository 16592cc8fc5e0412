"""BVH-accelerated nearest-hit ray casting against triangle meshes.

Traversal is breadth-first over (ray, node) pairs so whole ray batches are
processed with array operations.  Triangle tests use the watertight
algorithm of Woop, Benthin and Wald, so rays through shared edges never
slip between neighbouring faces; equal-distance hits resolve to the lower
face index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh_core import Mesh

LEAF_SIZE = 4
T_MIN = 1e-12


@dataclass(frozen=True)
class BVH:
    bmin: np.ndarray  # (N, 3)
    bmax: np.ndarray
    left: np.ndarray  # child indices, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into `order`
    count: np.ndarray
    order: np.ndarray  # face indices in leaf order

    @property
    def n_nodes(self) -> int:
        return len(self.left)


def build_bvh(mesh: Mesh, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median-split BVH over face centroids along the widest axis."""
    a, b, c = mesh.corners()
    fmin = np.minimum(np.minimum(a, b), c)
    fmax = np.maximum(np.maximum(a, b), c)
    cent = (a + b + c) / 3.0
    order = np.arange(mesh.n_faces)
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        idx = order[lo:hi]
        bmin.append(fmin[idx].min(axis=0))
        bmax.append(fmax[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(left) - 1

    if mesh.n_faces == 0:
        empty = np.zeros((0, 3))
        z = np.zeros(0, dtype=np.int64)
        return BVH(empty, empty, z, z, z, z, z)

    root = new_node(0, mesh.n_faces)
    stack = [(root, 0, mesh.n_faces)]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= leaf_size:
            continue
        idx = order[lo:hi]
        cc = cent[idx]
        axis = int(np.argmax(cc.max(axis=0) - cc.min(axis=0)))
        mid = (hi - lo) // 2
        # stable tie-breaking on face index keeps the build deterministic
        perm = np.lexsort((idx, cc[:, axis]))
        order[lo:hi] = idx[perm]
        l = new_node(lo, lo + mid)
        r = new_node(lo + mid, hi)
        left[node], right[node] = l, r
        count[node] = 0
        stack.append((r, lo + mid, hi))
        stack.append((l, lo, lo + mid))
    return BVH(
        np.array(bmin), np.array(bmax), np.array(left), np.array(right),
        np.array(start), np.array(count), order,
    )


def intersect_watertight(
    orig: np.ndarray, dirs: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray/triangle tests row by row.

    Returns (hit mask, distance t, weights) where weights are the scaled
    barycentrics of corners (A, B, C) normalised to sum to one.
    """
    kz = np.argmax(np.abs(dirs), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    rows = np.arange(len(dirs))
    dz = dirs[rows, kz]
    swap = dz < 0
    kx, ky = np.where(swap, ky, kx), np.where(swap, kx, ky)
    sx = dirs[rows, kx] / dz
    sy = dirs[rows, ky] / dz
    sz = 1.0 / dz

    def shear(P):
        Q = P - orig
        qz = Q[rows, kz]
        return Q[rows, kx] - sx * qz, Q[rows, ky] - sy * qz, sz * qz

    ax, ay, az = shear(A)
    bx, by, bz = shear(B)
    cx, cy, cz = shear(C)
    U = cx * by - cy * bx
    V = ax * cy - ay * cx
    W = bx * ay - by * ax
    neg = (U < 0) | (V < 0) | (W < 0)
    pos = (U > 0) | (V > 0) | (W > 0)
    det = U + V + W
    hit = ~(neg & pos) & (det != 0)
    safe = np.where(det != 0, det, 1.0)
    t = (U * az + V * bz + W * cz) / safe
    hit &= t > T_MIN
    weights = np.column_stack([U, V, W]) / safe[:, None]
    return hit, t, weights


def _slab(orig, inv, bmin, bmax, tmax):
    with np.errstate(invalid="ignore"):
        t0 = (bmin - orig) * inv
        t1 = (bmax - orig) * inv
    # 0 * inf from axis-parallel rays on a slab plane; treat as inside
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    tn = np.minimum(t0, t1).max(axis=1)
    tf = np.maximum(t0, t1).min(axis=1)
    return (tn <= tf) & (tf >= 0) & (tn <= tmax)


@dataclass(frozen=True)
class RayHits:
    hit: np.ndarray  # bool (R,)
    t: np.ndarray  # (R,), inf where no hit
    face: np.ndarray  # (R,), -1 where no hit
    weights: np.ndarray  # (R, 3) corner weights for (A, B, C)


def cast_rays(
    mesh: Mesh, bvh: BVH, orig: np.ndarray, dirs: np.ndarray, max_range: float | np.ndarray = np.inf
) -> RayHits:
    """Nearest hit per ray within ``max_range`` (ray directions need not be unit)."""
    orig = np.asarray(orig, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(dirs)
    orig = np.broadcast_to(orig, dirs.shape)
    best_t = np.full(R, np.inf)
    limit = np.broadcast_to(np.asarray(max_range, dtype=np.float64), (R,)).copy()
    best_f = np.full(R, -1, dtype=np.int64)
    best_w = np.zeros((R, 3))
    if R == 0 or bvh.n_nodes == 0:
        return RayHits(best_f >= 0, best_t, best_f, best_w)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    faces = mesh.faces
    V = mesh.vertices

    ray = np.arange(R)
    node = np.zeros(R, dtype=np.int64)
    while len(ray):
        tcap = np.minimum(best_t[ray], limit[ray])
        ok = _slab(orig[ray], inv[ray], bvh.bmin[node], bvh.bmax[node], tcap)
        ray, node = ray[ok], node[ok]
        leaf = bvh.left[node] < 0
        lr, ln = ray[leaf], node[leaf]
        if len(lr):
            cnt = bvh.count[ln]
            pr = np.repeat(lr, cnt)
            offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            pf = bvh.order[np.repeat(bvh.start[ln], cnt) + offs]
            tri = faces[pf]
            hit, t, w = intersect_watertight(orig[pr], dirs[pr], V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]])
            hit &= t <= limit[pr]
            pr, pf, t, w = pr[hit], pf[hit], t[hit], w[hit]
            if len(pr):
                srt = np.lexsort((pf, t, pr))
                pr, pf, t, w = pr[srt], pf[srt], t[srt], w[srt]
                first = np.ones(len(pr), dtype=bool)
                first[1:] = pr[1:] != pr[:-1]
                pr, pf, t, w = pr[first], pf[first], t[first], w[first]
                better = (t < best_t[pr]) | ((t == best_t[pr]) & (pf < best_f[pr]))
                pr, pf, t, w = pr[better], pf[better], t[better], w[better]
                best_t[pr], best_f[pr], best_w[pr] = t, pf, w
        inner = ~leaf
        ir, inn = ray[inner], node[inner]
        ray = np.concatenate([ir, ir])
        node = np.concatenate([bvh.left[inn], bvh.right[inn]])
    return RayHits(best_f >= 0, best_t, best_f, best_w)
