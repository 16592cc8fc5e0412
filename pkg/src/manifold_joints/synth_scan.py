"""Shape augmentation, skinning and virtual multi-camera scanning."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from plyfile import PlyData, PlyElement

from .mesh_core import Mesh, MeshError, Skeleton
from .raycast import BVH, build_bvh, cast_rays

logger = logging.getLogger(__name__)


class DeformationError(MeshError):
    """Raised when a deformation flips face orientations."""


# --------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    amplitude: float = 0.0
    kernel_count: int = 0
    kernel_radius: float = 0.15
    scale_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        if len(self.scale) != 3:
            raise ValueError("scale needs three factors")
        lo, hi = self.scale_range
        if not all(lo <= s <= hi for s in self.scale):
            raise ValueError(f"scale factors {self.scale} outside [{lo}, {hi}]")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.kernel_count < 0:
            raise ValueError("kernel_count must be >= 0")
        if self.kernel_radius <= 0:
            raise ValueError("kernel_radius must be > 0")

    @classmethod
    def sample(cls, rng: np.random.Generator, spread: float = 0.1, **kw) -> "AugmentationSpec":
        """Random per-axis scale around 1 and a fresh deformation seed."""
        scale = tuple(float(s) for s in 1.0 + rng.uniform(-spread, spread, 3))
        return cls(scale=scale, seed=int(rng.integers(2**31)), **kw)


def apply_rigid_scale(mesh: Mesh, skeleton: Skeleton, scale: Sequence[float]) -> tuple[Mesh, Skeleton]:
    s = np.asarray(scale, dtype=np.float64).reshape(3)
    if np.any(s <= 0):
        raise ValueError("scale factors must be positive")
    return mesh.with_vertices(mesh.vertices * s), skeleton.with_positions(skeleton.positions * s)


def _sample_surface(mesh: Mesh, rng: np.random.Generator, k: int) -> np.ndarray:
    area = mesh.face_areas()
    fi = rng.choice(mesh.n_faces, size=k, p=area / area.sum())
    r1, r2 = rng.random(k), rng.random(k)
    s = np.sqrt(r1)
    A, B, C = (x[fi] for x in mesh.corners())
    return (1 - s)[:, None] * A + (s * (1 - r2))[:, None] * B + (s * r2)[:, None] * C


def apply_nonrigid_deformation(mesh: Mesh, spec: AugmentationSpec) -> Mesh:
    """Displace vertices along their normals by a sum of seeded Gaussian bumps.

    Each bump has a signed amplitude drawn from [-amplitude, amplitude], so
    no vertex moves more than ``kernel_count * amplitude``.
    """
    if spec.amplitude == 0 or spec.kernel_count == 0:
        return mesh
    rng = np.random.default_rng(spec.seed)
    centers = _sample_surface(mesh, rng, spec.kernel_count)
    amps = rng.uniform(-spec.amplitude, spec.amplitude, spec.kernel_count)
    d2 = ((mesh.vertices[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    disp = np.exp(-d2 / (2 * spec.kernel_radius**2)) @ amps
    out = mesh.with_vertices(mesh.vertices + disp[:, None] * mesh.vertex_normals())
    before, after = mesh.face_normals(), out.face_normals()
    valid = (np.linalg.norm(before, axis=1) > 0) & (np.linalg.norm(after, axis=1) > 0)
    flipped = int(np.count_nonzero(np.einsum("ij,ij->i", before, after)[valid] < 0))
    if flipped:
        raise DeformationError(f"deformation inverted {flipped} faces; lower the amplitude")
    return out


# --------------------------------------------------------------------------
# Linear blend skinning


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(src.T @ dst)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def _align(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest rotation taking direction u onto direction v."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return np.eye(3)
    a, b = u / nu, v / nv
    c = float(a @ b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # half turn about any axis perpendicular to a
        p = np.eye(3)[np.argmin(np.abs(a))]
        axis = np.cross(a, p)
        axis /= np.linalg.norm(axis)
        return 2 * np.outer(axis, axis) - np.eye(3)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]) / s
    return np.eye(3) + s * K + (1 - c) * K @ K


def joint_transforms(rest: Skeleton, posed: Skeleton) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Rest-to-posed rigid transform (R, t) of every joint, x' = R x + t.

    Rotations follow the joint's child offsets (Kabsch for several
    children, the minimal rotation for one); a leaf follows the direction
    from its parent; an isolated joint only translates.
    """
    if set(rest.names) != set(posed.names):
        raise ValueError("rest and posed skeletons have different joints")
    out = {}
    for j in rest.joints:
        p0, p1 = rest.position(j.name), posed.position(j.name)
        kids = rest.children(j.name)
        if len(kids) >= 2:
            src = np.array([rest.position(k) - p0 for k in kids])
            dst = np.array([posed.position(k) - p1 for k in kids])
            if np.linalg.matrix_rank(src, tol=1e-12) >= 2:
                R = _kabsch(src, dst)
            else:
                R = _align(src[0], dst[0])
        elif len(kids) == 1:
            R = _align(rest.position(kids[0]) - p0, posed.position(kids[0]) - p1)
        elif j.parent is not None:
            R = _align(p0 - rest.position(j.parent), p1 - posed.position(j.parent))
        else:
            R = np.eye(3)
        out[j.name] = (R, p1 - R @ p0)
    return out


def skin_pose(mesh: Mesh, skeleton_rest: Skeleton, skeleton_posed: Skeleton) -> Mesh:
    """Linear blend skinning of a weighted mesh between two skeleton poses."""
    if mesh.skin_weights is None:
        raise MeshError("mesh has no skinning weights")
    sw = mesh.skin_weights
    missing = [n for n in sw.joint_names if n not in skeleton_rest or n not in skeleton_posed]
    if missing:
        raise ValueError(f"weights reference joints absent from the skeletons: {missing}")
    xf = joint_transforms(skeleton_rest, skeleton_posed)
    out = np.zeros_like(mesh.vertices)
    for col, name in enumerate(sw.joint_names):
        w = sw.matrix[:, col]
        nz = w > 0
        if not nz.any():
            continue
        R, t = xf[name]
        out[nz] += w[nz, None] * (mesh.vertices[nz] @ R.T + t)
    return mesh.with_vertices(out)


# --------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_deg: tuple[float, float] = (60.0, 45.0)
    resolution: tuple[int, int] = (160, 120)
    max_range_m: float = 10.0

    def __post_init__(self):
        fov = self.fov_deg
        if np.isscalar(fov):
            fov = (float(fov), float(fov))
        object.__setattr__(self, "fov_deg", tuple(float(x) for x in fov))
        object.__setattr__(self, "resolution", tuple(int(x) for x in self.resolution))
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if not all(0 < f < 180 for f in self.fov_deg):
            raise ValueError("field of view must be in (0, 180) degrees")
        if min(self.resolution) < 1:
            raise ValueError("resolution must be at least 1x1")
        if self.max_range_m <= 0:
            raise ValueError("max range must be positive")
        if np.linalg.norm(np.subtract(self.look_at, self.position)) == 0:
            raise ValueError("camera looks at its own position")

    def frame(self) -> np.ndarray:
        """World-from-camera rotation with columns (right, up, forward)."""
        f = np.subtract(self.look_at, self.position)
        f = f / np.linalg.norm(f)
        r = np.cross(f, self.up)
        if np.linalg.norm(r) < 1e-12:
            r = np.cross(f, np.eye(3)[np.argmin(np.abs(f))])
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return np.column_stack([r, u, f])

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions through pixel centres, row-major from the top-left."""
        w, h = self.resolution
        tx = np.tan(np.deg2rad(self.fov_deg[0]) / 2)
        ty = np.tan(np.deg2rad(self.fov_deg[1]) / 2)
        x = ((np.arange(w) + 0.5) / w * 2 - 1) * tx
        y = (1 - (np.arange(h) + 0.5) / h * 2) * ty
        X, Y = np.meshgrid(x, y)
        d = np.column_stack([X.ravel(), Y.ravel(), np.ones(w * h)]) @ self.frame().T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(np.asarray(self.position), d.shape), d


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraRig":
        cams = []
        for c in doc["cameras"]:
            cams.append(
                Camera(
                    position=c["position"],
                    look_at=c["look_at"],
                    up=c.get("up", (0.0, 0.0, 1.0)),
                    fov_deg=c.get("fov_deg", (60.0, 45.0)),
                    resolution=c.get("resolution", (160, 120)),
                    max_range_m=float(c.get("max_range_m", 10.0)),
                )
            )
        return cls(tuple(cams))

    def to_dict(self) -> dict:
        return {
            "cameras": [
                {
                    "position": list(c.position),
                    "look_at": list(c.look_at),
                    "up": list(c.up),
                    "fov_deg": list(c.fov_deg),
                    "resolution": list(c.resolution),
                    "max_range_m": c.max_range_m,
                }
                for c in self.cameras
            ]
        }

    @classmethod
    def load(cls, path: str | Path) -> "CameraRig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    @classmethod
    def ring(
        cls,
        center: Sequence[float] = (0.0, 0.0, 0.8),
        radius: float = 3.5,
        height: float = 1.6,
        n: int = 4,
        fov_deg: tuple[float, float] = (50.0, 40.0),
        resolution: tuple[int, int] = (200, 160),
        max_range_m: float = 10.0,
        phase_deg: float = 45.0,
    ) -> "CameraRig":
        """``n`` cameras evenly spaced on a horizontal circle, aimed at ``center``."""
        cams = []
        c = np.asarray(center, dtype=np.float64)
        for i in range(n):
            a = np.deg2rad(phase_deg) + 2 * np.pi * i / n
            pos = c + np.array([radius * np.cos(a), radius * np.sin(a), height - c[2]])
            cams.append(Camera(tuple(pos), tuple(c), (0, 0, 1), fov_deg, resolution, max_range_m))
        return cls(tuple(cams))


# --------------------------------------------------------------------------
# Scan clouds


def mesh_fingerprint(mesh: Mesh) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class ScanCloud:
    points: np.ndarray
    hit_face: np.ndarray
    bary: np.ndarray  # (n, 3) as (alpha, beta, gamma)
    source_camera: np.ndarray
    mesh_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "hit_face", np.asarray(self.hit_face, dtype=np.int64).reshape(n))
        object.__setattr__(self, "bary", np.asarray(self.bary, dtype=np.float64).reshape(n, 3))
        object.__setattr__(self, "source_camera", np.asarray(self.source_camera, dtype=np.int64).reshape(n))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, mesh_id: str = "") -> "ScanCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0), mesh_id)

    def take(self, idx: np.ndarray) -> "ScanCloud":
        return ScanCloud(self.points[idx], self.hit_face[idx], self.bary[idx], self.source_camera[idx], self.mesh_id)


def raycast_scan(mesh: Mesh, rig: CameraRig, bvh: BVH | None = None) -> ScanCloud:
    """Scan ``mesh`` with every camera and merge the clouds in camera order."""
    bvh = bvh if bvh is not None else build_bvh(mesh)
    mesh_id = mesh_fingerprint(mesh)
    clouds = []
    for ci, cam in enumerate(rig.cameras):
        orig, dirs = cam.rays()
        hits = cast_rays(mesh, bvh, orig, dirs, cam.max_range_m)
        keep = np.flatnonzero(hits.hit)
        face = hits.face[keep]
        w = hits.weights[keep]  # corners (A, B, C)
        bary = np.column_stack([w[:, 1], w[:, 2], 1.0 - w[:, 1] - w[:, 2]])
        A, B, C = (x[face] for x in mesh.corners())
        pts = bary[:, 2:3] * A + bary[:, 0:1] * B + bary[:, 1:2] * C
        clouds.append(ScanCloud(pts, face, bary, np.full(len(keep), ci), mesh_id))
        logger.debug("camera %d: %d of %d rays hit", ci, len(keep), len(dirs))
    return merge_clouds(clouds) if clouds else ScanCloud.empty(mesh_id)


def merge_clouds(clouds: Sequence[ScanCloud]) -> ScanCloud:
    ids = {c.mesh_id for c in clouds if c.mesh_id}
    if len(ids) > 1:
        raise ValueError(f"clouds come from different meshes: {sorted(ids)}")
    mesh_id = ids.pop() if ids else ""
    nonempty = [c for c in clouds if len(c)]
    if not nonempty:
        return ScanCloud.empty(mesh_id)
    return ScanCloud(
        np.concatenate([c.points for c in nonempty]),
        np.concatenate([c.hit_face for c in nonempty]),
        np.concatenate([c.bary for c in nonempty]),
        np.concatenate([c.source_camera for c in nonempty]),
        mesh_id,
    )


def farthest_point_indices(points: np.ndarray, target_n: int, seed_index: int = 0) -> np.ndarray:
    n = len(points)
    if target_n >= n:
        return np.arange(n)
    chosen = np.empty(target_n, dtype=np.int64)
    chosen[0] = seed_index
    # separate contiguous coordinate columns keep the inner loop allocation-free
    x, y, z = (np.ascontiguousarray(points[:, i]) for i in range(3))
    dist = np.full(n, np.inf)
    d, t = np.empty(n), np.empty(n)
    cur = seed_index
    for i in range(1, target_n + 1):
        px, py, pz = x[cur], y[cur], z[cur]
        np.subtract(x, px, out=d)
        np.multiply(d, d, out=d)
        np.subtract(y, py, out=t)
        np.multiply(t, t, out=t)
        d += t
        np.subtract(z, pz, out=t)
        np.multiply(t, t, out=t)
        d += t
        np.minimum(dist, d, out=dist)
        if i == target_n:
            break
        cur = int(np.argmax(dist))
        chosen[i] = cur
    return chosen


def downsample(cloud: ScanCloud, target_n: int) -> ScanCloud:
    """Farthest-point sampling from point 0; survivors keep their original order."""
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    if len(cloud) == 0:
        raise ValueError("cannot downsample an empty cloud")
    if target_n >= len(cloud):
        return cloud
    idx = np.sort(farthest_point_indices(cloud.points, target_n))
    return cloud.take(idx)


_CLOUD_DTYPE = [
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("face_index", "<u4"),
    ("b0", "<f8"), ("b1", "<f8"), ("b2", "<f8"),
    ("camera_id", "<u2"),
]


def write_cloud(cloud: ScanCloud, path: str | Path) -> None:
    arr = np.empty(len(cloud), dtype=_CLOUD_DTYPE)
    arr["x"], arr["y"], arr["z"] = cloud.points.T
    arr["face_index"] = cloud.hit_face
    arr["b0"], arr["b1"], arr["b2"] = cloud.bary.T
    arr["camera_id"] = cloud.source_camera
    comments = [f"mesh_id {cloud.mesh_id}"] if cloud.mesh_id else []
    PlyData([PlyElement.describe(arr, "vertex")], text=False, byte_order="<", comments=comments).write(str(path))


def read_cloud(path: str | Path) -> ScanCloud:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    missing = [name for name, _ in _CLOUD_DTYPE if name not in v.dtype.names]
    if missing:
        raise ValueError(f"{path}: scan cloud lacks properties {missing}")
    mesh_id = ""
    for c in ply.comments:
        if c.startswith("mesh_id "):
            mesh_id = c.split(" ", 1)[1].strip()
    return ScanCloud(
        np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64),
        v["face_index"].astype(np.int64),
        np.column_stack([v["b0"], v["b1"], v["b2"]]).astype(np.float64),
        v["camera_id"].astype(np.int64),
        mesh_id,
    )
