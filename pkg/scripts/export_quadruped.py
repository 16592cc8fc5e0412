"""Write the built-in quadruped proxy as mesh.ply + skeleton.yaml (with skin weights)."""

import argparse
from pathlib import Path

from manifold_joints import assets
from manifold_joints.mesh_core import save_mesh, save_skeleton


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="quadruped")
    ap.add_argument("--spacing", type=float, default=0.025, help="marching-cubes grid spacing (m)")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh, sk = assets.quadruped_proxy(spacing=args.spacing)
    save_mesh(mesh, out / "mesh.ply")
    save_skeleton(sk, out / "skeleton.yaml", mesh.skin_weights)
    print(f"{out}: {mesh.n_vertices} vertices, {len(mesh.faces)} faces, {len(sk.joints)} joints")


if __name__ == "__main__":
    main()
