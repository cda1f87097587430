#!/usr/bin/env python3
"""Generate a synthetic trajectory CSV plus a ready-to-run fit config.

Usage:
    python scripts/make_example_data.py --n 1000 --out train.csv
    ivdtr fit --config fit_config.json
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ivdtr.data import save_csv
from ivdtr.sim import SimConfig, generate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=1000)
    parser.add_argument("--c1", type=float, default=4.0)
    parser.add_argument("--xi", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("train.csv"))
    args = parser.parse_args()

    config = SimConfig(c1=args.c1, xi=args.xi)
    dataset, _ = generate(config, args.n, np.random.default_rng(args.seed))
    save_csv(dataset, args.out)

    fit_config = {
        "data": str(args.out),
        "reward_bounds": [[0.0, 1.0], [0.0, 1.0]],
        "lambda": "m",
        "depth": 2,
        "crossfit": 0,
        "seed": args.seed,
        "out": "policy.json",
        "report": "report.json",
    }
    config_path = args.out.with_name("fit_config.json")
    config_path.write_text(json.dumps(fit_config, indent=2) + "\n")
    print(f"wrote {args.out} ({args.n} trajectories) and {config_path}")


if __name__ == "__main__":
    main()
