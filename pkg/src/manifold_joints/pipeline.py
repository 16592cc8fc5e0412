"""Dataset generation, distance fields, joint solving and evaluation over frames.

A dataset directory looks like::

    manifest.json
    frames/frame_000/mesh.ply        posed, augmented mesh
    frames/frame_000/cloud.ply       downsampled merged scan
    frames/frame_000/skeleton.yaml   ground-truth joints
    frames/frame_000/{euclidean,manifold,dmax,log_target}.dfld
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import assets
from .distance_targets import (
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
from .geodesics import SOURCE_BAND, build_laplacian, heat_geodesics, joint_surface_source
from .joint_solver import (
    DEFAULT_K,
    bone_length_stats,
    estimates_to_skeleton,
    joint_errors,
    read_estimates_csv,
    solve_all_joints,
    write_estimates_csv,
)
from .mesh_core import (
    Mesh,
    Skeleton,
    load_mesh,
    load_skeleton,
    load_skin_weights,
    save_mesh,
    save_skeleton,
)
from .regress_hip import HipRegressor, TrainConfig, leave_one_out, read_dataset
from .synth_scan import (
    AugmentationSpec,
    CameraRig,
    apply_nonrigid_deformation,
    apply_rigid_scale,
    downsample,
    mesh_fingerprint,
    raycast_scan,
    read_cloud,
    skin_pose,
    write_cloud,
)

logger = logging.getLogger(__name__)

FIELD_KINDS = ("euclidean", "manifold", "dmax", "log_target")
BUILTIN_QUADRUPED = "builtin:quadruped"


class FrameFailure(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    mesh: str = BUILTIN_QUADRUPED
    skeleton: str | None = None
    frames: list[dict] = field(default_factory=list)  # explicit {mesh, skeleton} pairs
    animation: dict = field(default_factory=lambda: {"type": "rest", "n_frames": 1})
    augmentation: dict = field(default_factory=dict)
    rig: Any = None  # path, inline dict, or None for the default 4-camera ring
    downsample_n: int = 4096
    k: int = DEFAULT_K
    sigma: float = 0.01
    include_offset: bool = False
    source_band: float = SOURCE_BAND  # 0 gives the single nearest-point joint source
    out: str = "dataset"
    seed: int = 0
    workers: int = 1
    hip: dict = field(default_factory=dict)  # TrainConfig overrides

    def __post_init__(self):
        if self.k < 4:
            raise ValueError("k must be >= 4")
        if self.downsample_n < self.k:
            raise ValueError("downsample_n must be >= k")
        if self.source_band < 0:
            raise ValueError("source_band must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "PipelineConfig":
        doc = {}
        if path is not None:
            doc = yaml.safe_load(Path(path).read_text()) or {}
            base = Path(path).parent
            for key in ("mesh", "skeleton"):
                if isinstance(doc.get(key), str) and not doc[key].startswith("builtin:"):
                    doc[key] = str((base / doc[key]).resolve())
            if isinstance(doc.get("rig"), str):
                doc["rig"] = str((base / doc["rig"]).resolve())
            for fr in doc.get("frames") or []:
                for key in ("mesh", "skeleton"):
                    fr[key] = str((base / fr[key]).resolve())
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.hip})


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _run(fn: Callable, jobs: Sequence, workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


# --------------------------------------------------------------------------
# gen


def load_model(cfg: PipelineConfig) -> tuple[Mesh, Skeleton]:
    if cfg.mesh == BUILTIN_QUADRUPED:
        return assets.quadruped_proxy()
    mesh = load_mesh(cfg.mesh)
    if cfg.skeleton is None:
        raise ValueError("config needs a skeleton path for a mesh file")
    sk = load_skeleton(cfg.skeleton)
    weights = load_skin_weights(cfg.skeleton, mesh.n_vertices)
    return mesh.with_weights(weights), sk


def load_rig(cfg: PipelineConfig, mesh: Mesh) -> CameraRig:
    """Explicit rig from the config, or a camera ring aimed at the rest mesh's bounding-box centre."""
    if cfg.rig is None or (isinstance(cfg.rig, dict) and "ring" in cfg.rig):
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        opts = {"center": tuple((lo + hi) / 2), **((cfg.rig or {}).get("ring") or {})}
        return CameraRig.ring(**opts)
    if isinstance(cfg.rig, dict):
        return CameraRig.from_dict(cfg.rig)
    return CameraRig.load(cfg.rig)


def augmentation_spec(cfg: PipelineConfig) -> AugmentationSpec:
    aug = dict(cfg.augmentation)
    spread = float(aug.pop("scale_spread", 0.0))
    if "scale" not in aug and spread > 0:
        rng = np.random.default_rng(cfg.seed)
        aug["scale"] = tuple(float(s) for s in 1.0 + rng.uniform(-spread, spread, 3))
    aug.setdefault("seed", cfg.seed)
    return AugmentationSpec(**aug)


def posed_skeletons(cfg: PipelineConfig, rest: Skeleton) -> list[Skeleton]:
    anim = dict(cfg.animation)
    kind = anim.pop("type", "rest")
    n = int(anim.pop("n_frames", 1))
    if kind == "rest":
        return [rest] * n
    if kind == "walk":
        return assets.walk_cycle(rest, n, **anim)
    raise ValueError(f"unknown animation type {kind!r}")


@dataclass(frozen=True)
class _GenJob:
    index: int
    cfg: PipelineConfig
    out: str


def _frame_id(i: int) -> str:
    return f"frame_{i:03d}"


def _gen_frame(job: _GenJob) -> dict:
    cfg = job.cfg
    fid = _frame_id(job.index)
    fdir = Path(job.out) / "frames" / fid
    fdir.mkdir(parents=True, exist_ok=True)
    if cfg.frames:
        pair = cfg.frames[job.index]
        mesh, sk = load_mesh(pair["mesh"]), load_skeleton(pair["skeleton"])
        rig = load_rig(cfg, mesh)
    else:
        rest_mesh, rest_sk = load_model(cfg)
        rig = load_rig(cfg, rest_mesh)
        spec = augmentation_spec(cfg)
        mesh, rest_sk = apply_rigid_scale(rest_mesh, rest_sk, spec.scale)
        mesh = apply_nonrigid_deformation(mesh, spec)
        sk = posed_skeletons(cfg, rest_sk)[job.index]
        if sk is not rest_sk:
            mesh = skin_pose(mesh, rest_sk, sk)
    raw = raycast_scan(mesh, rig)
    cloud = downsample(raw, cfg.downsample_n) if len(raw) else raw
    if len(raw) == 0:
        logger.warning("%s: scan produced no points", fid)
    save_mesh(Mesh(mesh.vertices, mesh.faces), fdir / "mesh.ply")
    write_cloud(cloud, fdir / "cloud.ply")
    save_skeleton(sk, fdir / "skeleton.yaml")
    logger.info("%s: %d scan points, %d kept", fid, len(raw), len(cloud))
    return {
        "id": fid,
        "dir": f"frames/{fid}",
        "raw_points": len(raw),
        "n_points": len(cloud),
        "mesh_id": mesh_fingerprint(Mesh(mesh.vertices, mesh.faces)),
        "seed": cfg.seed,
    }


def n_frames(cfg: PipelineConfig) -> int:
    if cfg.frames:
        return len(cfg.frames)
    return int(cfg.animation.get("n_frames", 1))


def cmd_gen(cfg: PipelineConfig, out: str | Path | None = None) -> Path:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [_GenJob(i, cfg, str(out)) for i in range(n_frames(cfg))]
    frames = _run(_gen_frame, jobs, cfg.workers)
    cfg_doc = asdict(cfg)
    cfg_doc.pop("out")
    cfg_doc.pop("workers")
    _json_dump({"config": cfg_doc, "frames": frames}, out / "manifest.json")
    return out


def read_manifest(dataset: str | Path) -> dict:
    path = Path(dataset) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{dataset}: no manifest.json; run `gen` first")
    return json.loads(path.read_text())


# --------------------------------------------------------------------------
# distfield


def oracle_fields(
    mesh: Mesh, skeleton: Skeleton, cloud, include_offset: bool = False, source_band: float = SOURCE_BAND
) -> dict[str, DistanceField]:
    """Euclidean, manifold, dmax and log-target fields for one frame."""
    eu = euclidean_field(cloud, skeleton)
    if len(cloud) == 0:
        empty = {k: DistanceField(np.zeros((0, len(skeleton))), k, tuple(skeleton.names)) for k in FIELD_KINDS}
        return empty
    op = build_laplacian(mesh)
    sources = [joint_surface_source(mesh, p, source_band) for p in skeleton.positions]
    geo = heat_geodesics(
        mesh, op, [s[0] for s in sources], skeleton.names, [s[1] for s in sources], [s[2] for s in sources]
    )
    man = manifold_field(cloud, mesh, geo, include_offset=include_offset)
    dm, _ = dmax_field(man, eu)
    return {"euclidean": eu, "manifold": man, "dmax": dm, "log_target": log_target(dm)}


@dataclass(frozen=True)
class _FrameJob:
    dataset: str
    frame: dict
    cfg: PipelineConfig
    extra: Any = None


def _distfield_frame(job: _FrameJob) -> dict:
    fdir = Path(job.dataset) / job.frame["dir"]
    mesh = load_mesh(fdir / "mesh.ply")
    cloud = read_cloud(fdir / "cloud.ply")
    sk = load_skeleton(fdir / "skeleton.yaml")
    if cloud.mesh_id and cloud.mesh_id != mesh_fingerprint(mesh):
        raise FrameFailure(f"{job.frame['id']}: scan cloud was not produced from mesh.ply")
    if len(cloud) == 0:
        logger.warning("%s: empty frame, writing empty fields", job.frame["id"])
    fields_ = oracle_fields(mesh, sk, cloud, job.cfg.include_offset, job.cfg.source_band)
    for kind, f in fields_.items():
        write_field(f, fdir / f"{kind}.dfld")
    # re-read and recheck the bound the max guarantees
    dm, eu = read_field(fdir / "dmax.dfld"), read_field(fdir / "euclidean.dfld")
    if np.any(dm.values < eu.values):
        raise FrameFailure(f"{job.frame['id']}: dmax below euclidean after reload")
    return {"id": job.frame["id"], "n": dm.n, "m": dm.m}


def cmd_distfield(cfg: PipelineConfig, dataset: str | Path) -> list[dict]:
    man = read_manifest(dataset)
    jobs = [_FrameJob(str(dataset), fr, cfg) for fr in man["frames"]]
    return _run(_distfield_frame, jobs, cfg.workers)


# --------------------------------------------------------------------------
# solve


def field_for_frame(dataset: Path, frame: dict, source: str, cfg: PipelineConfig, index: int) -> DistanceField:
    fdir = dataset / frame["dir"]
    if source == "oracle":
        return read_field(fdir / "dmax.dfld")
    if source == "noise":
        return corrupt_field(read_field(fdir / "dmax.dfld"), cfg.sigma, cfg.seed + index)
    ext = Path(source)
    path = ext / f"{frame['id']}.dfld" if ext.is_dir() else ext
    f = read_field(path)
    if f.kind == "log_target":
        f = invert_target(f)
    return f


def _solve_frame(job: _FrameJob) -> dict:
    source, out, index = job.extra
    dataset = Path(job.dataset)
    fdir = dataset / job.frame["dir"]
    cloud = read_cloud(fdir / "cloud.ply")
    truth = load_skeleton(fdir / "skeleton.yaml")
    try:
        f = field_for_frame(dataset, job.frame, source, job.cfg, index)
        f.check_matches(len(cloud), truth.names)
    except (FieldFormatError, FileNotFoundError, ValueError) as exc:
        return {"id": job.frame["id"], "error": str(exc)}
    est = solve_all_joints(cloud, f, job.cfg.k)
    write_estimates_csv(est, Path(out) / f"{job.frame['id']}.csv")
    return {
        "id": job.frame["id"],
        "residuals": [(e.name, e.residual, ";".join(e.flags)) for e in est],
        "failed": [e.name for e in est if e.failed],
    }


def cmd_solve(cfg: PipelineConfig, dataset: str | Path, source: str = "oracle", out: str | Path | None = None) -> tuple[Path, list[str]]:
    """Solve every frame; returns the estimates dir and a list of failure messages."""
    dataset = Path(dataset)
    out = Path(out) if out is not None else dataset / "estimates"
    out.mkdir(parents=True, exist_ok=True)
    man = read_manifest(dataset)
    jobs = [_FrameJob(str(dataset), fr, cfg, (source, str(out), i)) for i, fr in enumerate(man["frames"])]
    results = _run(_solve_frame, jobs, cfg.workers)
    failures = []
    with open(out / "residuals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint_name", "residual_m", "flags"])
        for r in results:
            if "error" in r:
                failures.append(f"{r['id']}: {r['error']}")
                continue
            for name, res, flags in r["residuals"]:
                w.writerow([r["id"], name, repr(res), flags])
            failures += [f"{r['id']}: joint {n!r} failed" for n in r["failed"]]
    _json_dump({"source": source, "k": cfg.k, "frames": [r["id"] for r in results], "failures": failures}, out / "solve.json")
    return out, failures


# --------------------------------------------------------------------------
# eval


def cmd_eval(dataset: str | Path, estimates: str | Path, out: str | Path | None = None) -> dict:
    dataset, estimates = Path(dataset), Path(estimates)
    out = Path(out) if out is not None else estimates / "eval"
    out.mkdir(parents=True, exist_ok=True)
    man = read_manifest(dataset)
    frames = man["frames"]
    est_files = sorted(estimates.glob("frame_*.csv"))
    if len(est_files) != len(frames):
        raise FrameFailure(f"{len(frames)} frames in the dataset but {len(est_files)} estimate files")
    rows, est_skeletons, template = [], [], None
    for fr in frames:
        truth = load_skeleton(dataset / fr["dir"] / "skeleton.yaml")
        template = template or truth
        est = read_estimates_csv(estimates / f"{fr['id']}.csv")
        table = joint_errors(est, truth)
        rows += [(fr["id"], name, err) for name, err in table.per_joint.items()]
        est_skeletons.append(estimates_to_skeleton(est, truth))
    with open(out / "joint_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint_name", "error_m"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2])])
    names = list(dict.fromkeys(r[1] for r in rows))
    with open(out / "joint_errors_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["joint_name", "mean_m", "std_m", "min_m", "max_m"])
        for n in names:
            e = np.array([r[2] for r in rows if r[1] == n])
            e = e[np.isfinite(e)]
            stats = (e.mean(), e.std(), e.min(), e.max()) if len(e) else (np.nan,) * 4
            w.writerow([n, *(repr(float(s)) for s in stats)])
    bstats = bone_length_stats(est_skeletons, template.bones)
    truth_lengths = bone_length_stats([load_skeleton(dataset / fr["dir"] / "skeleton.yaml") for fr in frames], template.bones)
    with open(out / "bone_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bone", "mean_m", "std_m", "min_m", "max_m", "frames", "excluded", "true_mean_m"])
        for name, s in bstats.items():
            w.writerow([name, repr(s.mean), repr(s.std), repr(s.min), repr(s.max), s.frames, s.excluded, repr(truth_lengths[name].mean)])
    errs = np.array([r[2] for r in rows])
    finite = errs[np.isfinite(errs)]
    summary = {
        "frames": len(frames),
        "joints": len(names),
        "mean_error_m": float(finite.mean()) if len(finite) else None,
        "std_error_m": float(finite.std()) if len(finite) else None,
        "failed_estimates": int((~np.isfinite(errs)).sum()),
        "max_bone_std_m": max((s.std for s in bstats.values() if np.isfinite(s.std)), default=None),
    }
    _json_dump(summary, out / "summary.json")
    return summary


# --------------------------------------------------------------------------
# hip


def cmd_hip(dataset_csv: str | Path, cfg: PipelineConfig, out: str | Path | None = None, margin: float = 3.0) -> dict:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ids, X, y = read_dataset(dataset_csv)
    tc = cfg.train_config()
    res = leave_one_out(X, y, tc, workers=cfg.workers)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "actual", "predicted"])
        for sid, a, p in zip(ids, y, res.predictions):
            w.writerow([sid, repr(float(a)), repr(float(p))])
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "actual", "predicted", "ideal", "margin_low", "margin_high", "within_margin"])
        for sid, a, p in zip(ids, y, res.predictions):
            w.writerow([sid, repr(float(a)), repr(float(p)), repr(float(a)), repr(float(a - margin)), repr(float(a + margin)), int(abs(p - a) <= margin)])
    HipRegressor.fit(X, y, tc).save(out / "model.json")
    summary = {"n": len(y), "r2": res.r2, "rmse": res.rmse, "margin": margin, "within_margin": int(np.sum(np.abs(res.predictions - y) <= margin))}
    _json_dump(summary, out / "summary.json")
    return summary
