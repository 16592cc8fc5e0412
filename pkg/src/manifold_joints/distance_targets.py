"""Per-point, per-joint distance fields and the DFLD file format.

A field is an (n, m) matrix: one row per scan point, one column per joint.
The supervision target is built in three steps: Euclidean distance to the
joint, surface distance interpolated from per-vertex geodesic fields, and
their elementwise maximum, which is then log-compressed.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geodesics import GeodesicField, interpolate_batch
from .mesh_core import Mesh, Skeleton
from .synth_scan import ScanCloud

logger = logging.getLogger(__name__)

LOG_EPS = 1e-6
LOG_SCALE = 10.0

KINDS = ("euclidean", "manifold", "dmax", "log_target", "predicted")
MAGIC = b"DFLD"
VERSION = 1


class FieldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceField:
    values: np.ndarray
    kind: str
    joint_names: tuple[str, ...]
    source: str = "oracle"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            v = v.reshape(-1, len(self.joint_names))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if self.kind not in KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if v.shape[1] != len(self.joint_names):
            raise ValueError(f"{v.shape[1]} columns but {len(self.joint_names)} joint names")
        if self.kind in ("euclidean", "manifold", "dmax") and np.any(v < 0):
            raise ValueError(f"{self.kind} field has negative entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.joint_names.index(name)]

    def check_matches(self, n: int, joint_names: Sequence[str] | None = None) -> None:
        """Consumer-side validation against a cloud size and joint list."""
        if self.n != n:
            raise FieldFormatError(f"field has {self.n} rows but the cloud has {n} points")
        if joint_names is not None and tuple(joint_names) != self.joint_names:
            raise FieldFormatError(
                f"expected {len(joint_names)} joint columns {list(joint_names)}, "
                f"found {self.m} {list(self.joint_names)}"
            )


def euclidean_field(cloud: ScanCloud, skeleton: Skeleton) -> DistanceField:
    P = skeleton.positions
    d = np.linalg.norm(cloud.points[:, None, :] - P[None, :, :], axis=2)
    return DistanceField(d, "euclidean", tuple(skeleton.names))


def manifold_field(
    cloud: ScanCloud,
    mesh: Mesh,
    fields: Sequence[GeodesicField],
    include_offset: bool = True,
) -> DistanceField:
    """Interpolate per-vertex geodesic fields at every scan point's hit location."""
    if len(cloud) and (cloud.hit_face.min() < 0 or cloud.hit_face.max() >= mesh.n_faces):
        raise IndexError("scan cloud references faces outside the mesh")
    names = tuple(f.joint_name for f in fields)
    if not fields:
        return DistanceField(np.zeros((len(cloud), 0)), "manifold", names)
    D = np.column_stack([f.distances for f in fields])  # (V, m)
    corner = D[mesh.faces[cloud.hit_face]]  # (n, 3, m)
    with np.errstate(invalid="ignore"):
        vals = interpolate_batch(corner, cloud.bary)
    # an inf corner makes the blend inf (or nan when its weight is exactly 0)
    vals[~np.isfinite(vals)] = np.inf
    if include_offset:
        vals = vals + np.array([f.offset for f in fields])
    n_inf = int(np.count_nonzero(np.isinf(vals)))
    if n_inf:
        logger.warning("manifold field has %d unreachable entries", n_inf)
    return DistanceField(vals, "manifold", names)


def dmax_field(manifold: DistanceField, euclidean: DistanceField) -> tuple[DistanceField, int]:
    """Elementwise maximum; unreachable manifold entries fall back to Euclidean.

    Returns the field and the number of replaced entries.
    """
    if manifold.values.shape != euclidean.values.shape:
        raise ValueError(f"shape mismatch {manifold.values.shape} vs {euclidean.values.shape}")
    if manifold.joint_names != euclidean.joint_names:
        raise ValueError("joint labels differ between fields")
    man = manifold.values
    bad = ~np.isfinite(man)
    out = np.maximum(np.where(bad, euclidean.values, man), euclidean.values)
    replaced = int(bad.sum())
    if replaced:
        logger.warning("replaced %d non-finite manifold entries by Euclidean distance", replaced)
    return DistanceField(out, "dmax", manifold.joint_names, manifold.source), replaced


def log_target(dmax: DistanceField) -> DistanceField:
    """L = -ln(max(D, eps)) / 10."""
    if dmax.kind != "dmax":
        raise ValueError(f"log target needs a dmax field, got {dmax.kind}")
    # adding 0.0 turns -0.0 (from D = 1) into +0.0
    L = -np.log(np.maximum(dmax.values, LOG_EPS)) / LOG_SCALE + 0.0
    return DistanceField(L, "log_target", dmax.joint_names, dmax.source)


def invert_target(log_field: DistanceField) -> DistanceField:
    if log_field.kind not in ("log_target", "predicted"):
        raise ValueError(f"cannot invert a {log_field.kind} field")
    return DistanceField(np.exp(-LOG_SCALE * log_field.values), "dmax", log_field.joint_names, log_field.source)


def corrupt_field(field: DistanceField, sigma: float, seed: int = 0) -> DistanceField:
    """Gaussian noise in distance space, clamped at zero; stands in for a predictor."""
    if field.kind != "dmax":
        raise ValueError("noise is applied to dmax fields")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    noisy = np.maximum(field.values + rng.normal(0.0, sigma, field.values.shape), 0.0) if sigma > 0 else field.values.copy()
    return DistanceField(noisy, "predicted", field.joint_names, f"oracle+noise({sigma:g})")


# --------------------------------------------------------------------------
# DFLD files


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError("string too long for DFLD header")
    return struct.pack("<H", len(b)) + b


def write_field(field: DistanceField, path: str | Path) -> None:
    if field.m > 0xFFFF:
        raise ValueError("too many joints for DFLD")
    parts = [MAGIC, struct.pack("<HBQH", VERSION, KINDS.index(field.kind), field.n, field.m)]
    parts += [_pack_str(n) for n in field.joint_names]
    parts.append(_pack_str(field.source))
    parts.append(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FieldFormatError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def string(self) -> str:
        (ln,) = struct.unpack("<H", self.take(2))
        return self.take(ln).decode("utf-8")


def read_field(path: str | Path) -> DistanceField:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FieldFormatError(f"{path}: not a DFLD file")
    version, kind, n, m = struct.unpack("<HBQH", r.take(13))
    if version != VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    if kind >= len(KINDS):
        raise FieldFormatError(f"{path}: unknown kind code {kind}")
    names = tuple(r.string() for _ in range(m))
    source = r.string()
    payload = r.take(8 * n * m)
    if r.pos != len(data):
        raise FieldFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    values = np.frombuffer(payload, dtype="<f8").reshape(n, m).astype(np.float64)
    return DistanceField(values, KINDS[kind], names, source)
