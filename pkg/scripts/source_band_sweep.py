"""Oracle joint error on the rest quadruped as a function of the joint source band."""

import argparse

import numpy as np

from manifold_joints import assets
from manifold_joints.joint_solver import joint_errors, solve_all_joints
from manifold_joints.pipeline import PipelineConfig, load_rig, oracle_fields
from manifold_joints.synth_scan import downsample, raycast_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bands", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.3])
    ap.add_argument("--k", type=int, default=50)
    args = ap.parse_args()

    mesh, sk = assets.quadruped_proxy()
    cloud = downsample(raycast_scan(mesh, load_rig(PipelineConfig(), mesh)), 4096)
    print("band   mean_mm   max_mm  worst joint")
    for band in args.bands:
        dmax = oracle_fields(mesh, sk, cloud, source_band=band)["dmax"]
        per = joint_errors(solve_all_joints(cloud, dmax, args.k), sk).per_joint
        worst = max(per, key=per.get)
        print(f"{band:4.2f}  {1e3 * np.mean(list(per.values())):8.2f}  {1e3 * per[worst]:7.2f}  {worst}")


if __name__ == "__main__":
    main()
