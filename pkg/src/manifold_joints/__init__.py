"""Joint localisation on scanned quadrupeds from per-point distance fields."""

from .distance_targets import DistanceField, read_field, write_field
from .geodesics import GeodesicField, build_laplacian, heat_geodesic, heat_geodesics
from .joint_solver import JointEstimate, multilaterate, select_area_of_interest, solve_all_joints
from .mesh_core import Mesh, Skeleton, load_mesh, load_skeleton
from .pipeline import PipelineConfig
from .regress_hip import HipRegressor, leave_one_out
from .synth_scan import CameraRig, ScanCloud, raycast_scan, read_cloud, write_cloud

__version__ = "0.1.0"

__all__ = [
    "DistanceField",
    "read_field",
    "write_field",
    "GeodesicField",
    "build_laplacian",
    "heat_geodesic",
    "heat_geodesics",
    "JointEstimate",
    "multilaterate",
    "select_area_of_interest",
    "solve_all_joints",
    "Mesh",
    "Skeleton",
    "load_mesh",
    "load_skeleton",
    "PipelineConfig",
    "HipRegressor",
    "leave_one_out",
    "CameraRig",
    "ScanCloud",
    "raycast_scan",
    "read_cloud",
    "write_cloud",
]
