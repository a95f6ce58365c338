"""Paired scans with and without re-identification using a trained checkpoint.

    python scripts/run_ab.py --checkpoint runs/ablation/dopus4_seed0.npz --out runs/ab [--trials 10]
"""

import argparse
import json
from pathlib import Path

from dopus.experiments import run_ab
from dopus.segnet import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=100, help="first scenario seed")
    args = ap.parse_args()
    model, header = load_checkpoint(args.checkpoint)
    s = run_ab(model, header["resolution"], trials=args.trials, base_seed=args.seed, out_dir=args.out)
    print(json.dumps(s, indent=1))


if __name__ == "__main__":
    main()
