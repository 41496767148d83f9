"""Run every stage (data, teachers, baseline, distilled student, reports) once.

    python scripts/run_pipeline.py --config configs/smoke.yaml --out-dir runs/smoke
"""

import argparse
import logging
import time

from sdkd.config import apply_overrides, load_config
from sdkd.pipeline import run_pipeline


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--out-dir", default="runs/pipeline")
    p.add_argument("--no-bench", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = apply_overrides(load_config(args.config), args.set)
    t0 = time.time()
    result = run_pipeline(cfg, args.out_dir, bench=not args.no_bench)
    print(f"{'model':24s} {'mse':>10s} {'psnr':>8s} {'ssim':>7s} {'low_err':>10s} {'high_err':>10s}")
    for name, r in result["reports"].items():
        print(f"{name:24s} {r.mse:10.5f} {r.psnr:8.2f} {r.ssim:7.4f} {r.low_band_err:10.3f} {r.high_band_err:10.3f}")
    for t in result.get("timing", []):
        print(f"{t.model}: {t.mean_forward_s * 1e3:.2f} ms/pass, {t.flops} MACs, {t.params} params, speedup {t.speedup:.2f}x")
    print(f"outputs in {result['out_dir']} ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
