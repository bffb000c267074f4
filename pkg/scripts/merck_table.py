"""Merck benchmark table: variants x {HIVPROT, DPP4, NK1} x {count, bit}.

Needs the Merck activity CSVs (``<SET>_training*.csv``, ``<SET>_test*.csv``)
in one directory:

    python3 scripts/merck_table.py /data/merck --variants mlp ours --seeds 10
"""
import argparse
import logging

from densify import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root")
    ap.add_argument("--sets", nargs="*", default=["HIVPROT", "DPP4", "NK1"])
    ap.add_argument("--encodings", nargs="*", default=["count", "bit"])
    ap.add_argument("--variants", nargs="*", default=["mlp", "mixup", "mixup_oe", "manifold_mixup",
                                                       "manifold_mixup_bilevel", "ours", "ours_settransformer"])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/merck")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    results = []
    for target in args.sets:
        for enc in args.encodings:
            data = H.merck_dataset(args.root, target, enc)
            for v in args.variants:
                cfg = H.make_config(v, seeds=list(range(args.seeds)), dataset=data)
                res = H.run_experiment(cfg, workers=args.workers)
                H.save_run(res, cfg, f"{args.out}/{target}_{enc}/{v}")
                results.append(res)
                ref = H.PUBLISHED_MSE.get((v, target, enc))
                note = "" if ref is None else f"  (published {ref[0]:.3f} ± {ref[1]:.3f})"
                print(f"{target} {enc} {v}: {res.mean:.3f} ± {res.stderr:.3f}{note}")
    print(H.report(results, out_dir=args.out))


if __name__ == "__main__":
    main()
