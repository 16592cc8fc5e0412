"""Geodesic distance fields on triangle meshes.

The heat method (diffuse, normalise the gradient, Poisson solve) runs on a
cotangent Laplacian built from intrinsically mollified edge lengths, so
sliver triangles from scanned or marching-cubes meshes do not produce
infinite cotangents.  Factorisations are cached on the operator and reused
for every source.

Barycentric convention used everywhere in this package: for a face (A, B, C)
the coordinates are stored as (alpha, beta, gamma) with

    P = gamma * A + alpha * B + beta * C
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla
from scipy.sparse.csgraph import connected_components, dijkstra

from .mesh_core import Mesh, MeshError

logger = logging.getLogger(__name__)

MOLLIFY_DELTA = 1e-6
BARY_DENOM_MIN = 1e-18
NEAREST_TIE_TOL = 1e-9  # rounding noise from rigid motion is ~1e-15
SOURCE_BAND = 0.2  # relative reach of extra joint sources, see joint_surface_source


class GeodesicError(RuntimeError):
    """Raised when a linear solve fails; carries a short mesh diagnostic."""


# --------------------------------------------------------------------------
# Laplace operator


def intrinsic_edge_lengths(mesh: Mesh, delta: float = MOLLIFY_DELTA) -> tuple[np.ndarray, float]:
    """Per-face lengths of the edges opposite corners (A, B, C), mollified.

    Returns the (F, 3) length array and the uniform amount added to every
    edge so each triangle satisfies the triangle inequality with margin
    ``delta * mean_edge``.
    """
    a, b, c = mesh.corners()
    lengths = np.column_stack(
        [np.linalg.norm(b - c, axis=1), np.linalg.norm(c - a, axis=1), np.linalg.norm(a - b, axis=1)]
    )
    eps = delta * mesh.mean_edge_length()
    slack = lengths.sum(axis=1, keepdims=True) - 2.0 * lengths  # l_j + l_k - l_i
    shift = max(0.0, float(np.max(eps - slack))) if len(lengths) else 0.0
    if shift > 0:
        logger.debug("mollifying edge lengths by %.3g", shift)
    return lengths + shift, shift


def _heron(l: np.ndarray) -> np.ndarray:
    # Kahan's ordering keeps the formula accurate for needle triangles.
    s = -np.sort(-l, axis=1)
    x, y, z = s[:, 0], s[:, 1], s[:, 2]
    prod = (x + (y + z)) * (z - (x - y)) * (z + (x - y)) * (x + (y - z))
    return 0.25 * np.sqrt(np.maximum(prod, 0.0))


@dataclass
class LaplaceOperator:
    """Cotangent stiffness (positive semidefinite) and lumped mass matrices."""

    stiffness: sparse.csr_matrix
    mass: sparse.dia_matrix
    mean_edge_length: float
    face_lengths: np.ndarray
    face_areas: np.ndarray
    faces: np.ndarray
    components: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.stiffness.shape[0]

    @property
    def mass_diagonal(self) -> np.ndarray:
        return self.mass.diagonal()

    def heat_step(self) -> float:
        return self.mean_edge_length**2

    def _heat_factor(self):
        if "heat" not in self._cache:
            t = self.heat_step()
            A = (self.mass + t * self.stiffness).tocsc()
            isolated = np.flatnonzero(self.mass_diagonal <= 0)
            if isolated.size:
                fix = np.zeros(self.n_vertices)
                fix[isolated] = 1.0
                A = (A + sparse.diags(fix)).tocsc()
            self._cache["heat"] = _factorize(A, "heat diffusion")
        return self._cache["heat"]

    def _poisson_factor(self):
        if "poisson" not in self._cache:
            n = self.n_vertices
            # pin the lowest-index vertex of every component
            _, pins = np.unique(self.components, return_index=True)
            free = np.setdiff1d(np.arange(n), pins)
            L = self.stiffness.tocsc()
            sub = L[free][:, free].tocsc()
            solver = _factorize(sub, "poisson") if len(free) else None
            self._cache["poisson"] = (free, pins, solver)
        return self._cache["poisson"]


def _factorize(A, what: str):
    try:
        return spla.splu(A)
    except RuntimeError as exc:
        raise GeodesicError(f"{what} system is singular ({A.shape[0]} unknowns): {exc}") from exc


def build_laplacian(mesh: Mesh, delta: float = MOLLIFY_DELTA) -> LaplaceOperator:
    if mesh.n_faces == 0:
        raise MeshError("mesh has no faces")
    lengths, _ = intrinsic_edge_lengths(mesh, delta)
    area = _heron(lengths)
    if area.sum() <= 0:
        raise MeshError("mesh has zero total area")
    safe = np.where(area > 0, area, np.finfo(float).tiny)
    sq = lengths**2
    # cot of the angle at corner i, from the lengths of the opposite edge
    cot = (sq.sum(axis=1, keepdims=True) - 2.0 * sq) / (4.0 * safe[:, None])
    f = mesh.faces
    n = mesh.n_vertices
    # edge opposite corner i joins corners (i+1, i+2)
    I = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    J = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    w = 0.5 * np.concatenate([cot[:, 0], cot[:, 1], cot[:, 2]])
    W = sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([I, J]), np.concatenate([J, I]))), shape=(n, n)).tocsr()
    L = (sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsr()
    mass = np.zeros(n)
    for k in range(3):
        np.add.at(mass, f[:, k], area / 3.0)
    adj = sparse.coo_matrix((np.ones(len(I)), (I, J)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return LaplaceOperator(
        stiffness=L,
        mass=sparse.diags(mass),
        mean_edge_length=mesh.mean_edge_length(),
        face_lengths=lengths,
        face_areas=area,
        faces=f,
        components=labels,
    )


# --------------------------------------------------------------------------
# Geodesic fields


@dataclass(frozen=True)
class GeodesicField:
    """Per-vertex surface distance from a source, plus a joint-to-surface offset.

    ``distances`` is zero at the source; ``offset`` is the straight-line gap
    between the joint and the surface point the source sits on.  Unreachable
    vertices hold ``+inf``.
    """

    distances: np.ndarray
    joint_name: str = ""
    offset: float = 0.0
    source_point: np.ndarray | None = None
    source_weights: Mapping[int, float] = field(default_factory=dict)
    method: str = "heat"
    params: Mapping[str, float] = field(default_factory=dict)

    def total(self) -> np.ndarray:
        return self.distances + self.offset

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex_index", "distance_m"])
            for i, d in enumerate(self.distances):
                w.writerow([i, repr(float(d))])
        meta = {
            "joint_name": self.joint_name,
            "offset_m": self.offset,
            "source_point": None if self.source_point is None else [float(x) for x in self.source_point],
            "source_weights": {str(k): float(v) for k, v in self.source_weights.items()},
            "method": self.method,
            "params": dict(self.params),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load_csv(cls, path: str | Path) -> "GeodesicField":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["vertex_index", "distance_m"]:
            raise ValueError(f"{path}: unexpected header")
        d = np.array([float(r[1]) for r in rows[1:]])
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        sp = meta.get("source_point")
        return cls(
            distances=d,
            joint_name=meta.get("joint_name", ""),
            offset=float(meta.get("offset_m", 0.0)),
            source_point=None if sp is None else np.asarray(sp),
            source_weights={int(k): v for k, v in meta.get("source_weights", {}).items()},
            method=meta.get("method", "heat"),
            params=meta.get("params", {}),
        )


def _source_vector(source: Mapping[int, float] | Sequence[int] | int, n: int) -> np.ndarray:
    u0 = np.zeros(n)
    if isinstance(source, (int, np.integer)):
        source = {int(source): 1.0}
    elif not isinstance(source, Mapping):
        source = {int(v): 1.0 for v in source}
    if not source:
        raise ValueError("empty source set")
    for v, w in source.items():
        if w < 0:
            raise ValueError("source weights must be non-negative")
        if not 0 <= int(v) < n:
            raise ValueError(f"source vertex {v} out of range")
        u0[int(v)] += w
    if not np.any(u0 > 0):
        raise ValueError("source weights are all zero")
    return u0


def _hat_gradients(op: LaplaceOperator) -> np.ndarray:
    """Gradients of the three hat functions per face in an intrinsic 2D layout."""
    if "grads" in op._cache:
        return op._cache["grads"]
    l0, l1, l2 = op.face_lengths.T  # opposite A, B, C
    area = op.face_areas
    safe_l2 = np.where(l2 > 0, l2, 1.0)
    # A at origin, B on the x axis, C above it
    cx = (l2**2 + l1**2 - l0**2) / (2.0 * safe_l2)
    cy = 2.0 * area / safe_l2
    pa = np.zeros((len(area), 2))
    pb = np.column_stack([l2, np.zeros_like(l2)])
    pc = np.column_stack([cx, cy])
    two_a = np.where(area > 0, 2.0 * area, np.inf)[:, None]

    def rot(v):
        return np.column_stack([-v[:, 1], v[:, 0]])

    grads = np.stack([rot(pc - pb), rot(pa - pc), rot(pb - pa)], axis=1) / two_a[:, None]
    op._cache["grads"] = grads
    return grads


def _heat_distances(op: LaplaceOperator, U0: np.ndarray) -> np.ndarray:
    """Heat method for a batch of source columns; returns unshifted potentials."""
    u = op._heat_factor().solve(U0)
    grads = _hat_gradients(op)  # (F, 3, 2)
    f = op.faces
    uf = u[f]  # (F, 3, k)
    gu = np.einsum("fik,fid->fkd", uf, grads)  # (F, k, 2)
    norm = np.linalg.norm(gu, axis=2, keepdims=True)
    X = np.divide(-gu, norm, out=np.zeros_like(gu), where=norm > 0)
    contrib = op.face_areas[:, None, None] * np.einsum("fid,fkd->fik", grads, X)  # (F, 3, k)
    div = np.zeros((op.n_vertices, U0.shape[1]))
    for c in range(3):
        np.add.at(div, f[:, c], contrib[:, c, :])
    free, pins, solver = op._poisson_factor()
    phi = np.zeros_like(div)
    if solver is not None:
        phi[free] = solver.solve(div[free])
    return phi


def heat_geodesic(
    mesh: Mesh,
    op: LaplaceOperator,
    source: Mapping[int, float] | Sequence[int] | int,
    joint_name: str = "",
    offset: float = 0.0,
    source_point: np.ndarray | None = None,
) -> GeodesicField:
    """Geodesic distance from a weighted vertex source by the heat method."""
    return heat_geodesics(mesh, op, [source], [joint_name], [offset], [source_point])[0]


def heat_geodesics(
    mesh: Mesh,
    op: LaplaceOperator,
    sources: Sequence,
    joint_names: Sequence[str] | None = None,
    offsets: Sequence[float] | None = None,
    source_points: Sequence | None = None,
) -> list[GeodesicField]:
    """Batched heat method: one factorisation pair, one solve per stage for all sources."""
    n = mesh.n_vertices
    if op.n_vertices != n:
        raise ValueError("operator was built for a different mesh")
    k = len(sources)
    joint_names = list(joint_names) if joint_names is not None else [""] * k
    offsets = list(offsets) if offsets is not None else [0.0] * k
    source_points = list(source_points) if source_points is not None else [None] * k
    U0 = np.column_stack([_source_vector(s, n) for s in sources]) if k else np.zeros((n, 0))
    phi = _heat_distances(op, U0)
    bound = n * float(op.face_lengths.max())
    out = []
    for j in range(k):
        src = np.flatnonzero(U0[:, j] > 0)
        reach = np.isin(op.components, np.unique(op.components[src]))
        d = np.full(n, np.inf)
        vals = phi[:, j] - phi[src, j].min()
        d[reach] = np.maximum(vals[reach], 0.0)
        if not reach.all():
            logger.warning(
                "%s: %d vertices unreachable from source", joint_names[j] or "field", int((~reach).sum())
            )
        if np.any(d[reach] > bound):
            logger.warning("%s: distances exceed sanity bound %.3g", joint_names[j] or "field", bound)
        out.append(
            GeodesicField(
                distances=d,
                joint_name=joint_names[j],
                offset=float(offsets[j]),
                source_point=None if source_points[j] is None else np.asarray(source_points[j], float),
                source_weights={int(v): float(U0[v, j]) for v in src},
                method="heat",
                params={"t": op.heat_step(), "mollify_delta": MOLLIFY_DELTA},
            )
        )
    return out


def dijkstra_geodesic(mesh: Mesh, source_vertex: int) -> GeodesicField:
    """Shortest edge-path distance; an upper bound oracle for surface geodesics."""
    n = mesh.n_vertices
    if not 0 <= source_vertex < n:
        raise ValueError(f"source vertex {source_vertex} out of range")
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    graph = sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    d = dijkstra(graph, directed=False, indices=source_vertex)
    return GeodesicField(distances=d, source_weights={int(source_vertex): 1.0}, method="dijkstra")


# --------------------------------------------------------------------------
# Barycentric coordinates and interpolation


@dataclass(frozen=True)
class BarycentricCoords:
    alpha: float
    beta: float
    gamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


def barycentric_batch(A: np.ndarray, B: np.ndarray, C: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Vectorised barycentric coordinates; rows are (alpha, beta, gamma)."""
    ab = np.atleast_2d(B - A)
    ac = np.atleast_2d(C - A)
    ap = np.atleast_2d(P - A)
    d_bb = np.einsum("ij,ij->i", ab, ab)
    d_bc = np.einsum("ij,ij->i", ab, ac)
    d_cc = np.einsum("ij,ij->i", ac, ac)
    d_bp = np.einsum("ij,ij->i", ab, ap)
    d_cp = np.einsum("ij,ij->i", ac, ap)
    denom = d_bb * d_cc - d_bc**2
    if np.any(denom <= BARY_DENOM_MIN):
        raise ValueError("degenerate triangle in barycentric computation")
    alpha = (d_cc * d_bp - d_bc * d_cp) / denom
    beta = (d_bb * d_cp - d_bc * d_bp) / denom
    return np.column_stack([alpha, beta, 1.0 - alpha - beta])


def barycentric_coords(triangle, point) -> BarycentricCoords:
    A, B, C = (np.asarray(x, dtype=np.float64) for x in triangle)
    a, b, g = barycentric_batch(A, B, C, np.asarray(point, dtype=np.float64))[0]
    return BarycentricCoords(float(a), float(b), float(g))


def interpolate_distance(values, bary: BarycentricCoords | Sequence[float]) -> float:
    """Blend the field values at corners (A, B, C) with coordinates (alpha, beta, gamma)."""
    da, db, dc = (float(v) for v in values)
    if isinstance(bary, BarycentricCoords):
        alpha, beta, gamma = bary.alpha, bary.beta, bary.gamma
    else:
        alpha, beta, gamma = (float(x) for x in bary)
    return gamma * da + alpha * db + beta * dc


def interpolate_batch(values: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """``values`` is (n, 3, ...) at corners (A, B, C); ``bary`` is (n, 3) as (alpha, beta, gamma)."""
    w = bary[:, [2, 0, 1]]
    return np.einsum("ni,ni...->n...", w, values)


# --------------------------------------------------------------------------
# Nearest surface point for interior joints


def closest_points_on_triangles(P: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Closest point on each triangle to ``P`` (broadcast over rows)."""
    ab, ac, ap = B - A, C - A, P - A
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = P - B
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = P - C
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(A)
    done = np.zeros(len(A), dtype=bool)

    def take(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), A)
        take((d3 >= 0) & (d4 <= d3), B)
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), A + v[:, None] * ab)
        take((d6 >= 0) & (d5 <= d6), C)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), A + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), B + w[:, None] * (C - B))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        take(np.ones(len(A), dtype=bool), A + v[:, None] * ab + w[:, None] * ac)
    return out


def _surface_feet(mesh: Mesh, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closest point on every face to ``point`` and its distance (inf on zero-area faces)."""
    if mesh.n_faces == 0:
        raise MeshError("empty mesh")
    p = np.asarray(point, dtype=np.float64).reshape(3)
    A, B, C = mesh.corners()
    q = closest_points_on_triangles(np.broadcast_to(p, A.shape), A, B, C)
    d = np.linalg.norm(q - p, axis=1)
    # zero-area faces yield nan; their edges are covered by neighbours
    d[np.isnan(d)] = np.inf
    return p, q, d


def _nearest_index(d: np.ndarray) -> int:
    return int(np.flatnonzero(d <= d.min() + NEAREST_TIE_TOL)[0])


def nearest_surface_point(mesh: Mesh, point) -> tuple[int, np.ndarray, float]:
    """Brute-force nearest point on the surface: (face index, point, distance).

    Ties resolve to the lowest face index.  Distances within
    ``NEAREST_TIE_TOL`` metres of the minimum count as ties, so a joint on the
    axis of a symmetric limb picks the same face after any rigid motion.
    """
    _, q, d = _surface_feet(mesh, point)
    fi = _nearest_index(d)
    return fi, q[fi], float(d[fi])


def _strictly_inside(A, B, C, q, tol: float = NEAREST_TIE_TOL) -> np.ndarray:
    """Feet farther than ``tol`` metres from every edge of their face.

    Measured in metres rather than barycentrics so slivers, where a foot
    on an edge can read as slightly inside, classify the same way after a
    rigid motion.
    """
    ab, ac, aq = B - A, C - A, q - A
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    d20 = np.einsum("ij,ij->i", aq, ab)
    d21 = np.einsum("ij,ij->i", aq, ac)
    den = d00 * d11 - d01**2
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = (d11 * d20 - d01 * d21) / den
        gamma = (d00 * d21 - d01 * d20) / den
        alpha = 1.0 - beta - gamma
        area2 = np.sqrt(np.maximum(den, 0.0))
        # barycentric weight times the altitude onto the opposite edge
        to_ac = beta * area2 / np.sqrt(d11)
        to_ab = gamma * area2 / np.sqrt(d00)
        to_bc = alpha * area2 / np.linalg.norm(C - B, axis=1)
    return (den > BARY_DENOM_MIN) & (to_ac > tol) & (to_ab > tol) & (to_bc > tol)


def joint_surface_source(
    mesh: Mesh, joint, band: float = SOURCE_BAND
) -> tuple[dict[int, float], float, np.ndarray]:
    """Heat-method source for an interior joint: (vertex weights, offset, nearest surface point).

    The source always holds the nearest surface point.  With ``band > 0`` it
    also holds every orthogonal foot of the joint (a projection landing
    strictly inside a face) within ``(1 + band)`` times the nearest distance.
    Inside a limb of round cross-section those feet form a ring, so surface
    distances no longer wrap around the limb from one side.  ``band = 0``
    keeps the single nearest point.  Each foot spreads its barycentric
    weights over its face; feet count equally.
    """
    if not np.all(np.isfinite(joint)):
        raise ValueError("joint position must be finite")
    if band < 0:
        raise ValueError("band must be >= 0")
    _, q, d = _surface_feet(mesh, joint)
    fi = _nearest_index(d)
    dist = float(d[fi])
    feet = [fi]
    if band > 0:
        A, B, C = mesh.corners()
        ring = np.flatnonzero(_strictly_inside(A, B, C, q) & (d <= dist * (1.0 + band) + NEAREST_TIE_TOL))
        feet = sorted(set(feet) | set(ring.tolist()))
    weights: dict[int, float] = {}
    for f in feet:
        a, b, c = mesh.faces[f]
        try:
            alpha, beta, gamma = barycentric_batch(*mesh.vertices[[a, b, c]], q[f])[0]
        except ValueError:
            alpha, beta, gamma = 0.0, 0.0, 1.0
        for v, w in ((a, gamma), (b, alpha), (c, beta)):
            w = float(np.clip(w, 0.0, 1.0))
            if w > 0:
                weights[int(v)] = weights.get(int(v), 0.0) + w
    total = sum(weights.values())
    return {v: w / total for v, w in weights.items()}, dist, q[fi]
