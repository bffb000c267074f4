"""Every method variant on the synthetic covariate-shift benchmark.

    python3 scripts/synthetic_benchmark.py --seeds 5 --out runs/synthetic
"""
import argparse
import logging

from densify import harness as H

VARIANTS = ["mlp", "mixup", "mixup_oe", "manifold_mixup", "manifold_mixup_bilevel", "ours", "ours_settransformer"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--shift", type=float, default=3.0)
    ap.add_argument("--variants", nargs="*", default=VARIANTS)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/synthetic")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = H.DatasetSpec(synthetic={"shift": args.shift})
    results = []
    for v in args.variants:
        cfg = H.make_config(v, seeds=list(range(args.seeds)), dataset=data)
        res = H.run_experiment(cfg, workers=args.workers)
        H.save_run(res, cfg, f"{args.out}/{v}")
        print(f"{v:<24} {res.mean:.3f} ± {res.stderr:.3f}  ({res.wall_time:.0f}s)")
        results.append(res)
    print()
    print(H.report(results, out_dir=args.out, references=False))


if __name__ == "__main__":
    main()
