"""Run the synthetic ablation (full objective vs. one term removed) and print a table."""

import argparse
import logging
import time

from endowave.benchmark import VARIANTS, benchmark_dataset, run_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--out", default=None, help="directory for per-variant checkpoints and CSVs")
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    dataset, _ = benchmark_dataset()
    print(f"{'variant':<12} {'psnr':>8} {'ssim':>7} {'epe':>8} {'prims':>6} {'sec':>6}")
    for name in args.variants:
        t0 = time.time()
        out = f"{args.out}/{name}" if args.out else None
        res = run_variant(name, args.iters, out, dataset)
        f = res.final
        print(f"{name:<12} {f['psnr_holdout']:8.3f} {f['ssim_holdout']:7.4f} "
              f"{f['epe_holdout']:8.4f} {res.scene.count:6d} {time.time() - t0:6.0f}", flush=True)


if __name__ == "__main__":
    main()
