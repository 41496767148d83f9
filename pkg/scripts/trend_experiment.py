"""Distilled vs undistilled student on desk-scale Navier-Stokes, over three student seeds.

    python scripts/trend_experiment.py --config configs/desk.yaml --out-dir runs/trend
"""

import argparse
import logging
import time

from sdkd.config import apply_overrides, load_config
from sdkd.pipeline import run_trend


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--out-dir", default="runs/trend")
    p.add_argument("--seeds", type=int, nargs="+", default=[42, 43, 44])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = apply_overrides(load_config(args.config), args.set)
    t0 = time.time()
    s = run_trend(cfg, args.out_dir, args.seeds)
    print(f"teacher test mse: {', '.join(f'{v:.4f}' for v in s['teacher_mse'])}")
    for r in s["rows"]:
        print(
            f"seed {r['seed']}: baseline mse {r['baseline_mse']:.5f} high {r['baseline_high']:.3f} | "
            f"distilled mse {r['distilled_mse']:.5f} high {r['distilled_high']:.3f}"
        )
    print(
        f"median: baseline mse {s['baseline_mse']:.5f} high {s['baseline_high']:.3f} | "
        f"distilled mse {s['distilled_mse']:.5f} high {s['distilled_high']:.3f}  ({time.time() - t0:.0f}s)"
    )


if __name__ == "__main__":
    main()
