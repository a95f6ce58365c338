"""Train UNet-B, UNet-BD and DopUS-4 on the phantom dataset and report held-out dice.

    python scripts/run_ablation.py --out runs/ablation [--seeds 0 1 2] [--budget 150]

Writes ablation.json and one checkpoint per (variant, seed).
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from dopus.experiments import ABLATION_VARIANTS, ExperimentConfig, phantom_arrays, run_ablation
from dopus.segnet import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--budget", type=float, default=150.0, help="training seconds per model")
    ap.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("dopus.segnet.train").setLevel(logging.WARNING)

    cfg = dataclasses.replace(ExperimentConfig(), time_budget_s=args.budget)
    arrays = phantom_arrays(cfg)
    res = run_ablation(arrays, seeds=tuple(args.seeds), variants=tuple(args.variants), cfg=cfg, keep_models=True)
    args.out.mkdir(parents=True, exist_ok=True)
    for (v, s), model in res["models"].items():
        save_checkpoint(model, args.out / f"{v}_seed{s}.npz", cfg.resolution, {"seed": s, "fold": s % cfg.n_folds})
    summary = {"per_seed": res["per_seed"], "mean": res["mean"], "seconds": round(res["seconds"], 1)}
    (args.out / "ablation.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
