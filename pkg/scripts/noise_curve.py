"""Mean joint error of the multilateration solver against distance noise on the rest quadruped."""

import argparse

import numpy as np

from manifold_joints import assets
from manifold_joints.distance_targets import corrupt_field
from manifold_joints.joint_solver import joint_errors, solve_all_joints
from manifold_joints.pipeline import PipelineConfig, load_rig, oracle_fields
from manifold_joints.synth_scan import downsample, raycast_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.0025, 0.005, 0.01, 0.02, 0.04])
    ap.add_argument("--k", type=int, default=50)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    mesh, sk = assets.quadruped_proxy()
    cloud = downsample(raycast_scan(mesh, load_rig(PipelineConfig(), mesh)), 4096)
    dmax = oracle_fields(mesh, sk, cloud)["dmax"]
    print("sigma_m  mean_err_mm  max_err_mm")
    for s in args.sigmas:
        means, maxes = [], []
        for seed in range(args.seeds):
            est = solve_all_joints(cloud, corrupt_field(dmax, s, seed), args.k)
            e = np.array(list(joint_errors(est, sk).per_joint.values()))
            means.append(e.mean())
            maxes.append(e.max())
        print(f"{s:7.4f}  {1e3 * np.mean(means):11.2f}  {1e3 * np.max(maxes):10.2f}")


if __name__ == "__main__":
    main()
