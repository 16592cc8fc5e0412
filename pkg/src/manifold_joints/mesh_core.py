"""Triangle meshes and annotated skeletons.

Meshes are read from OBJ or PLY, fan-triangulated, and kept immutable.
Skeletons come from a small YAML/JSON document (see README for the schema).
All coordinates are meters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from plyfile import PlyData, PlyElement
from scipy import sparse
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
WEIGHT_SUM_TOL = 1e-6

# Order used in the per-joint error plots of the synthetic test set.
DEFAULT_JOINT_NAMES = (
    "Carpal joint left",
    "Elbow joint left",
    "Carpal joint right",
    "Elbow joint right",
    "Tarsal joint left",
    "Stifle joint left",
    "Hip joint left",
    "Tarsal joint right",
    "Stifle joint right",
    "Hip joint right",
    "Front spine",
    "Illium joint",
)


class MeshError(ValueError):
    """Raised for unreadable, malformed or inconsistent mesh input."""


class SkeletonError(ValueError):
    """Raised for malformed skeleton documents or broken references."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SkinWeights:
    """Dense per-vertex skinning weights, one column per joint name."""

    joint_names: tuple[str, ...]
    matrix: np.ndarray  # (V, J)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != len(self.joint_names):
            raise MeshError("skin weight matrix must be (V, len(joint_names))")
        if np.any(m < 0):
            raise MeshError("skin weights must be non-negative")
        sums = m.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > WEIGHT_SUM_TOL)
        if bad.size:
            raise MeshError(
                f"skin weights of {bad.size} vertices do not sum to 1 (first: vertex {bad[0]}, sum {sums[bad[0]]:.6g})"
            )
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def from_sparse(
        cls, weights: Mapping[int, Mapping[str, float]], n_vertices: int
    ) -> "SkinWeights":
        names: list[str] = []
        for w in weights.values():
            for name in w:
                if name not in names:
                    names.append(name)
        m = np.zeros((n_vertices, len(names)))
        col = {n: i for i, n in enumerate(names)}
        for v, w in weights.items():
            v = int(v)
            if not 0 <= v < n_vertices:
                raise MeshError(f"skin weight for vertex {v} out of range")
            for name, value in w.items():
                m[v, col[name]] = float(value)
        return cls(tuple(names), m)

    def to_sparse(self) -> dict[int, dict[str, float]]:
        out = {}
        for v, row in enumerate(self.matrix):
            nz = np.flatnonzero(row)
            out[v] = {self.joint_names[j]: float(row[j]) for j in nz}
        return out


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    skin_weights: SkinWeights | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError("faces must be triangles")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range for {len(v)} vertices")
        if self.skin_weights is not None and self.skin_weights.matrix.shape[0] != len(v):
            raise MeshError("skin weights do not match vertex count")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Positions of the (A, B, C) corners of every face."""
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit face normals; zero rows for degenerate faces."""
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        a, b, c = self.corners()
        fn = np.cross(b - a, c - a)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return np.divide(vn, norm, out=np.zeros_like(vn), where=norm > 0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        if len(e) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.skin_weights)

    def with_weights(self, weights: SkinWeights | None) -> "Mesh":
        return Mesh(self.vertices, self.faces, weights)


@dataclass(frozen=True)
class MeshReport:
    degenerate_faces: int
    non_manifold_edges: int
    boundary_edges: int
    components: int
    interior_edges: int = 0

    @property
    def ok(self) -> bool:
        return self.degenerate_faces == 0 and self.non_manifold_edges == 0


def fan_triangulate(polygon: Sequence[int]) -> list[tuple[int, int, int]]:
    """Split a polygon into triangles sharing its first vertex."""
    if len(polygon) < 3:
        raise MeshError(f"face with {len(polygon)} vertices")
    p0 = polygon[0]
    return [(p0, polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def _parse_obj(path: Path) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    verts: list[list[float]] = []
    tris: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        # OBJ is 1-based; negative indices count back from the end
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    tris.extend(fan_triangulate(idx))
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: malformed record {line.strip()!r}") from exc
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), tris


def _parse_ply(path: Path) -> tuple[np.ndarray, list]:
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:
        raise MeshError(f"{path}: cannot parse PLY ({exc})") from exc
    names = [e.name for e in ply.elements]
    if "vertex" not in names:
        raise MeshError(f"{path}: PLY has no vertex element")
    vdata = ply["vertex"].data
    verts = np.column_stack([vdata["x"], vdata["y"], vdata["z"]]).astype(np.float64)
    tris: list[tuple[int, int, int]] = []
    if "face" in names:
        fdata = ply["face"].data
        key = next((k for k in ("vertex_indices", "vertex_index") if k in fdata.dtype.names), None)
        if key is None:
            raise MeshError(f"{path}: face element lacks vertex_indices")
        polys = fdata[key]
        if len(polys) and all(len(p) == 3 for p in polys):
            tris = np.vstack(polys).astype(np.int64).tolist()
        else:
            for p in polys:
                tris.extend(fan_triangulate([int(i) for i in p]))
    return verts, tris


def load_mesh(path: str | Path) -> Mesh:
    """Read an OBJ or PLY (ASCII or binary) file into a triangulated `Mesh`."""
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, tris = _parse_obj(path)
    elif suffix == ".ply":
        verts, tris = _parse_ply(path)
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r}")
    faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range for {len(verts)} vertices")
    return Mesh(verts, faces)


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        with open(path, "w") as fh:
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for a, b, c in mesh.faces + 1:
                fh.write(f"f {a} {b} {c}\n")
    elif suffix == ".ply":
        vert = np.empty(mesh.n_vertices, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
        vert["x"], vert["y"], vert["z"] = mesh.vertices.T
        face = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
        face["vertex_indices"] = mesh.faces
        PlyData(
            [PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
            text=False,
            byte_order="<",
        ).write(str(path))
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r}")


def validate_mesh(mesh: Mesh) -> MeshReport:
    """Count degenerate faces, boundary/non-manifold edges and components."""
    degenerate = int(np.count_nonzero(mesh.face_areas() < DEGENERATE_AREA))
    if mesh.n_faces == 0:
        return MeshReport(degenerate, 0, 0, 0, 0)
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    used = np.unique(mesh.faces)
    n = mesh.n_vertices
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return MeshReport(
        degenerate_faces=degenerate,
        non_manifold_edges=int(np.count_nonzero(counts > 2)),
        boundary_edges=int(np.count_nonzero(counts == 1)),
        components=int(len(np.unique(labels[used]))),
        interior_edges=int(np.count_nonzero(counts == 2)),
    )


def clean_mesh(mesh: Mesh) -> Mesh:
    """Drop faces with area below the degeneracy threshold."""
    keep = mesh.face_areas() >= DEGENERATE_AREA
    if keep.all():
        return mesh
    logger.info("removing %d degenerate faces", int((~keep).sum()))
    return Mesh(mesh.vertices, mesh.faces[keep], mesh.skin_weights)


@dataclass(frozen=True)
class Joint:
    name: str
    position: np.ndarray
    parent: str | None = None

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "position", _frozen(p))


@dataclass(frozen=True)
class Bone:
    name: str
    joints: tuple[str, str]


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[Joint, ...]
    bones: tuple[Bone, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "bones", tuple(Bone(b.name, tuple(b.joints)) for b in self.bones))
        index: dict[str, int] = {}
        for i, j in enumerate(self.joints):
            if j.name in index:
                raise SkeletonError(f"duplicate joint name {j.name!r}")
            index[j.name] = i
        for j in self.joints:
            if j.parent is not None and j.parent not in index:
                raise SkeletonError(f"joint {j.name!r} has unknown parent {j.parent!r}")
        bone_names = set()
        for b in self.bones:
            if b.name in bone_names:
                raise SkeletonError(f"duplicate bone name {b.name!r}")
            bone_names.add(b.name)
            if len(b.joints) != 2:
                raise SkeletonError(f"bone {b.name!r} must reference two joints")
            for jn in b.joints:
                if jn not in index:
                    raise SkeletonError(f"bone {b.name!r} references missing joint {jn!r}")
        object.__setattr__(self, "_index", index)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def positions(self) -> np.ndarray:
        if not self.joints:
            return np.zeros((0, 3))
        return np.stack([j.position for j in self.joints])

    def __len__(self) -> int:
        return len(self.joints)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        return self._index[name]

    def position(self, name: str) -> np.ndarray:
        return self.joints[self._index[name]].position

    def children(self, name: str) -> list[str]:
        return [j.name for j in self.joints if j.parent == name]

    def with_positions(self, positions: np.ndarray) -> "Skeleton":
        positions = np.asarray(positions, dtype=np.float64).reshape(len(self.joints), 3)
        joints = tuple(Joint(j.name, p, j.parent) for j, p in zip(self.joints, positions))
        return Skeleton(joints, self.bones)

    def subset(self, names: Iterable[str]) -> "Skeleton":
        """Skeleton restricted to `names`; parents and bones outside the set are dropped."""
        keep = set(names)
        joints = tuple(
            Joint(j.name, j.position, j.parent if j.parent in keep else None)
            for j in self.joints
            if j.name in keep
        )
        bones = tuple(b for b in self.bones if set(b.joints) <= keep)
        return Skeleton(joints, bones)

    def to_dict(self) -> dict:
        joints = []
        for j in self.joints:
            d = {"name": j.name, "position": [float(x) for x in j.position]}
            if j.parent is not None:
                d["parent"] = j.parent
            joints.append(d)
        return {
            "joints": joints,
            "bones": [{"name": b.name, "joints": list(b.joints)} for b in self.bones],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Skeleton":
        if not isinstance(doc, Mapping) or "joints" not in doc:
            raise SkeletonError("skeleton document needs a 'joints' list")
        try:
            joints = tuple(
                Joint(str(j["name"]), j["position"], j.get("parent")) for j in doc["joints"]
            )
            bones = tuple(
                Bone(str(b["name"]), tuple(str(x) for x in b["joints"]))
                for b in doc.get("bones") or ()
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SkeletonError(f"malformed skeleton document: {exc}") from exc
        return cls(joints, bones)


def _read_document(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise SkeletonError(f"{path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SkeletonError(f"{path}: malformed document ({exc})") from exc
    if not isinstance(doc, dict):
        raise SkeletonError(f"{path}: expected a mapping at top level")
    return doc


def load_skeleton(path: str | Path) -> Skeleton:
    """Load a skeleton from YAML or JSON."""
    return Skeleton.from_dict(_read_document(Path(path)))


def load_skin_weights(path: str | Path, n_vertices: int) -> SkinWeights | None:
    """Read the optional ``skin_weights`` block of a skeleton document."""
    doc = _read_document(Path(path))
    sw = doc.get("skin_weights")
    if not sw:
        return None
    return SkinWeights.from_sparse({int(k): v for k, v in sw.items()}, n_vertices)


def save_skeleton(
    skeleton: Skeleton, path: str | Path, skin_weights: SkinWeights | None = None
) -> None:
    doc = skeleton.to_dict()
    if skin_weights is not None:
        doc["skin_weights"] = skin_weights.to_sparse()
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(doc, indent=1))
    else:
        path.write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=None))


def bone_lengths(skeleton: Skeleton) -> dict[str, float]:
    return {
        b.name: float(np.linalg.norm(skeleton.position(b.joints[0]) - skeleton.position(b.joints[1])))
        for b in skeleton.bones
    }
