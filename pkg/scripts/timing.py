"""Per-stage latency of the closed loop at 320x320 with the classical segmenter.

    python scripts/timing.py [--length 100] [--seed 11]
"""

import argparse
import json

from dopus.pipeline import PipelineConfig, ScenarioConfig, run_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=float, default=100.0)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()
    sc = ScenarioConfig(seed=args.seed, length_mm=args.length, dropout=[[30.0, 60.0, 0.15]], n_decoys=2)
    rep = run_scan(PipelineConfig(scenario=sc, write_outputs=False))
    print(json.dumps({"frames": rep.n_frames, **rep.timing}, indent=1))


if __name__ == "__main__":
    main()
