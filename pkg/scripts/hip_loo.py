"""Leave-one-out hip-height regression on a synthetic allometric population."""

import argparse
from pathlib import Path

from manifold_joints.pipeline import PipelineConfig, cmd_hip
from manifold_joints.regress_hip import synthetic_allometric_dataset, write_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="hip_run")
    ap.add_argument("--n", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X, y = synthetic_allometric_dataset(args.n, seed=args.seed)
    write_dataset(out / "features.csv", X, y, [f"s{i:03d}" for i in range(args.n)])
    cfg = PipelineConfig(seed=args.seed, workers=args.workers, hip={"epochs": args.epochs, "lr": args.lr})
    s = cmd_hip(out / "features.csv", cfg, out)
    print(f"n={s['n']}  R2={s['r2']:.3f}  RMSE={s['rmse']:.2f} cm  within 3 cm: {s['within_margin']}/{s['n']}")


if __name__ == "__main__":
    main()
