import pytest
import yaml
from hypothesis import settings

from manifold_joints import assets
from manifold_joints.mesh_core import Mesh, save_mesh
from manifold_joints.pipeline import PipelineConfig, cmd_gen, load_rig, oracle_fields
from manifold_joints.synth_scan import downsample, raycast_scan

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def quadruped_oracle(mesh: Mesh, skeleton, n: int = 4096, rig=None):
    """Scan, downsample and build oracle fields for one pose of a mesh."""
    rig = rig if rig is not None else load_rig(PipelineConfig(), mesh)
    cloud = downsample(raycast_scan(mesh, rig), n)
    return cloud, oracle_fields(mesh, skeleton, cloud)


@pytest.fixture(scope="session")
def ico4():
    return assets.icosphere(4)


@pytest.fixture(scope="session")
def quadruped():
    return assets.quadruped_proxy()


@pytest.fixture(scope="session")
def quadruped_rest(quadruped):
    mesh, sk = quadruped
    cloud, fields = quadruped_oracle(mesh, sk)
    return mesh, sk, cloud, fields


@pytest.fixture(scope="session")
def walking_dataset(tmp_path_factory):
    """18-frame walking sequence of the quadruped, generated once per session."""
    out = tmp_path_factory.mktemp("walk")
    cfg = PipelineConfig(animation={"type": "walk", "n_frames": 18})
    return cmd_gen(cfg, out / "ds"), cfg


@pytest.fixture(scope="session")
def blob_model(tmp_path_factory):
    """Small, fast asset for CLI tests: a sphere with two interior joints."""
    d = tmp_path_factory.mktemp("blob")
    mesh = assets.icosphere(3, radius=0.5)
    mesh = Mesh(mesh.vertices + [0.0, 0.0, 0.6], mesh.faces)
    save_mesh(mesh, d / "mesh.ply")
    doc = {
        "joints": [
            {"name": "upper", "position": [0.0, 0.0, 0.8]},
            {"name": "lower", "position": [0.0, 0.0, 0.4], "parent": "upper"},
        ],
        "bones": [{"name": "core", "joints": ["upper", "lower"]}],
    }
    (d / "skeleton.yaml").write_text(yaml.safe_dump(doc))
    cfg = {
        "mesh": "mesh.ply",
        "skeleton": "skeleton.yaml",
        "rig": {"ring": {"radius": 3.0, "height": 0.6, "resolution": [48, 40], "fov_deg": [30, 30]}},
        "downsample_n": 400,
        "k": 20,
    }
    (d / "config.yaml").write_text(yaml.safe_dump(cfg))
    return d


@pytest.fixture(scope="session")
def walking_solved(walking_dataset):
    """The walking dataset with oracle fields and oracle-source estimates."""
    from manifold_joints.pipeline import cmd_distfield, cmd_solve

    ds, cfg = walking_dataset
    cmd_distfield(cfg, ds)
    est, failures = cmd_solve(cfg, ds, "oracle", ds / "est_oracle")
    assert not failures
    return ds, cfg, est
