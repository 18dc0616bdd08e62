"""Write train/eval CSVs for the synthetic two-Gaussians and XOR problems.

    python scripts/make_data.py --out data
"""

import argparse
from pathlib import Path

from autoensemble.data import two_gaussians, write_csv, xor_blobs


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="data")
    p.add_argument("--m", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(two_gaussians(args.m, seed=args.seed), out / "gaussians_train.csv")
    write_csv(two_gaussians(args.m, seed=args.seed + 1, split_tag="eval"), out / "gaussians_eval.csv")
    write_csv(xor_blobs(args.m, seed=args.seed), out / "xor_train.csv")
    write_csv(xor_blobs(args.m, seed=args.seed + 1, split_tag="eval"), out / "xor_eval.csv")
    print(f"wrote 4 files to {out}")


if __name__ == "__main__":
    main()
