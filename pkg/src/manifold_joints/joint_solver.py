"""Joint recovery by anchor-based linear least-squares multilateration.

For each joint the k scan points with the smallest predicted distance form
the area of interest.  The member with the lowest point index is the
anchor; every point is translated so the anchor sits at the origin, which
makes the linear system

    2 q_i . x = |q_i|^2 - d_i^2 + d_1^2,    i = 2..k

exact (q_i are anchor-relative positions).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .distance_targets import DistanceField
from .mesh_core import Bone, Joint, Skeleton
from .synth_scan import ScanCloud

logger = logging.getLogger(__name__)

DEFAULT_K = 50
COPLANAR_TOL = 1e-9
RIDGE = 1e-9


class AnchorError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    anchor: np.ndarray  # (3,)
    others: np.ndarray  # (k-1, 3)
    distances: np.ndarray  # (k,), anchor first
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    coplanar: bool = False

    def __post_init__(self):
        if len(self.distances) < 4 or len(self.others) != len(self.distances) - 1:
            raise AnchorError("need at least 4 anchors with one distance each")
        if np.any(np.asarray(self.distances) < 0):
            raise AnchorError("distances must be non-negative")

    @property
    def k(self) -> int:
        return len(self.distances)

    @property
    def points(self) -> np.ndarray:
        return np.vstack([self.anchor, self.others])

    @classmethod
    def from_points(cls, points: np.ndarray, distances: np.ndarray, indices=None) -> "AnchorSet":
        pts = np.asarray(points, dtype=np.float64)
        idx = np.arange(len(pts)) if indices is None else np.asarray(indices)
        return cls(pts[0], pts[1:], np.asarray(distances, dtype=np.float64), idx, is_coplanar(pts))


@dataclass(frozen=True)
class JointEstimate:
    name: str
    position: np.ndarray
    residual: float
    k: int
    flags: tuple[str, ...] = ()

    @property
    def failed(self) -> bool:
        return any(f.startswith("failed") for f in self.flags)


def is_coplanar(points: np.ndarray, tol: float = COPLANAR_TOL) -> bool:
    q = points - points.mean(axis=0)
    s = np.linalg.svd(q, compute_uv=False)
    return bool(len(s) < 3 or s[2] <= tol * max(1.0, np.sqrt(len(points))))


def select_area_of_interest(points: np.ndarray | ScanCloud, column: np.ndarray, k: int = DEFAULT_K) -> AnchorSet:
    """The k points with the smallest predicted distance; anchor = lowest point index."""
    pts = points.points if isinstance(points, ScanCloud) else np.asarray(points, dtype=np.float64)
    col = np.asarray(column, dtype=np.float64)
    if k < 4:
        raise AnchorError("area of interest needs k >= 4")
    if len(col) != len(pts):
        raise AnchorError(f"{len(col)} distances for {len(pts)} points")
    finite = np.flatnonzero(np.isfinite(col))
    if len(finite) < k:
        raise AnchorError(f"only {len(finite)} usable points for k={k}")
    order = finite[np.lexsort((finite, col[finite]))]
    chosen = np.sort(order[:k])
    sel = pts[chosen]
    flat = is_coplanar(sel)
    if flat:
        logger.info("area of interest is coplanar; ridge fallback will be used")
    return AnchorSet(sel[0], sel[1:], col[chosen], chosen, flat)


def linear_system(anchors: AnchorSet) -> tuple[np.ndarray, np.ndarray]:
    """H and b for anchor-relative coordinates."""
    q = anchors.others - anchors.anchor
    d = anchors.distances
    H = 2.0 * q
    b = np.einsum("ij,ij->i", q, q) - d[1:] ** 2 + d[0] ** 2
    return H, b


def multilaterate(anchors: AnchorSet, name: str = "", ridge: float = RIDGE) -> JointEstimate:
    H, b = linear_system(anchors)
    flags = []
    rank = np.linalg.matrix_rank(H)
    if rank < 3 or anchors.coplanar:
        # coplanar anchors: damped solve, flagged for the caller
        Ha = np.vstack([H, np.sqrt(ridge) * np.eye(3)])
        ba = np.concatenate([b, np.zeros(3)])
        x, *_ = np.linalg.lstsq(Ha, ba, rcond=None)
        flags.append("ridge")
    else:
        Q, R = np.linalg.qr(H)
        x = np.linalg.solve(R, Q.T @ b)
    pos = x + anchors.anchor
    r = np.linalg.norm(anchors.points - pos, axis=1) - anchors.distances
    return JointEstimate(name, pos, float(np.sqrt(np.mean(r**2))), anchors.k, tuple(flags))


def failed_estimate(name: str, reason: str, k: int = 0) -> JointEstimate:
    return JointEstimate(name, np.full(3, np.nan), float("nan"), k, (f"failed: {reason}",))


def solve_all_joints(cloud: ScanCloud, field: DistanceField, k: int = DEFAULT_K) -> list[JointEstimate]:
    if field.kind not in ("dmax", "predicted"):
        raise ValueError(f"solver needs distances, got a {field.kind} field")
    field.check_matches(len(cloud))
    out = []
    for j, name in enumerate(field.joint_names):
        try:
            aoi = select_area_of_interest(cloud, field.values[:, j], k)
            out.append(multilaterate(aoi, name))
        except (AnchorError, np.linalg.LinAlgError) as exc:
            logger.warning("%s: %s", name, exc)
            out.append(failed_estimate(name, str(exc), k))
    return out


# --------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class ErrorTable:
    per_joint: dict[str, float]
    mean: float
    std: float


def joint_errors(estimates: Sequence[JointEstimate], truth: Skeleton) -> ErrorTable:
    names = [e.name for e in estimates]
    missing = [n for n in names if n not in truth]
    if missing:
        raise KeyError(f"joints absent from ground truth: {missing}")
    per = {e.name: float(np.linalg.norm(e.position - truth.position(e.name))) for e in estimates}
    vals = np.array([v for v in per.values() if np.isfinite(v)])
    if len(vals) == 0:
        return ErrorTable(per, float("nan"), float("nan"))
    return ErrorTable(per, float(vals.mean()), float(vals.std()))


@dataclass(frozen=True)
class BoneStats:
    mean: float
    std: float
    min: float
    max: float
    frames: int
    excluded: int = 0


def bone_length_stats(
    frames: Sequence[Skeleton | Mapping[str, np.ndarray]], bones: Sequence[Bone]
) -> dict[str, BoneStats]:
    """Length statistics of each bone across frames.

    A frame lacking either endpoint (or holding a non-finite position) is
    skipped for that bone and counted in ``excluded``.
    """
    if not frames:
        raise ValueError("need at least one frame")
    out = {}
    for bone in bones:
        a, b = bone.joints
        lengths = []
        excluded = 0
        for fr in frames:
            get = fr.position if isinstance(fr, Skeleton) else fr.__getitem__
            has = (a in fr and b in fr)
            if has:
                pa, pb = np.asarray(get(a)), np.asarray(get(b))
                has = bool(np.all(np.isfinite(pa)) and np.all(np.isfinite(pb)))
            if not has:
                excluded += 1
                continue
            lengths.append(float(np.linalg.norm(pa - pb)))
        if lengths:
            L = np.array(lengths)
            out[bone.name] = BoneStats(float(L.mean()), float(L.std()), float(L.min()), float(L.max()), len(L), excluded)
        else:
            nan = float("nan")
            out[bone.name] = BoneStats(nan, nan, nan, nan, 0, excluded)
    return out


def estimates_to_skeleton(estimates: Sequence[JointEstimate], template: Skeleton | None = None) -> Skeleton:
    """Wrap estimates as a skeleton; parents and bones come from ``template``."""
    parent = {j.name: j.parent for j in template.joints} if template is not None else {}
    names = {e.name for e in estimates}
    joints = tuple(
        Joint(e.name, e.position, parent.get(e.name) if parent.get(e.name) in names else None)
        for e in estimates
    )
    bones = tuple(b for b in template.bones if set(b.joints) <= names) if template is not None else ()
    return Skeleton(joints, bones)


ESTIMATE_HEADER = ["joint_name", "x", "y", "z", "residual_m", "k", "flags"]


def write_estimates_csv(estimates: Sequence[JointEstimate], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ESTIMATE_HEADER)
        for e in estimates:
            w.writerow([e.name, *(repr(float(c)) for c in e.position), repr(e.residual), e.k, ";".join(e.flags)])


def read_estimates_csv(path: str | Path) -> list[JointEstimate]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ESTIMATE_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for r in rows[1:]:
        flags = tuple(f for f in r[6].split(";") if f)
        out.append(JointEstimate(r[0], np.array([float(x) for x in r[1:4]]), float(r[4]), int(r[5]), flags))
    return out
