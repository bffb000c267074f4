"""Full method against the context-free, single-level ablation on the synthetic benchmark.

Prints per-seed OOD test MSE, medians and the ablation's interquartile range,
plus a plain MLP for scale.

    python3 scripts/efficacy_check.py --seeds 5
"""
import argparse

import numpy as np

from densify import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--shift", type=float, default=3.0)
    ap.add_argument("--M", type=int, default=8)
    ap.add_argument("--K", type=int, default=8)
    ap.add_argument("--rounds", type=int, default=1)
    args = ap.parse_args()

    data = H.DatasetSpec(synthetic={"D": 32, "n_train": 200, "shift": args.shift})
    base = H.make_config("ours", seeds=list(range(args.seeds)), dataset=data, M=args.M, K=args.K)
    base = base.replace(train=H.BilevelConfig(outer_rounds=args.rounds))
    (abl2,) = [c for m, *_, c in H.ablation_configs(base) if m == "mlp"]
    runs = {
        "full": base,
        "ablation (2)": abl2,
        "mlp": H.make_config("mlp", seeds=base.seeds, dataset=data, train=base.train),
    }
    med = {}
    for name, cfg in runs.items():
        res = H.run_experiment(cfg)
        med[name] = float(np.median(res.mse))
        print(f"{name:<14} median {med[name]:.3f}  per-seed {np.round(res.mse, 3).tolist()}")
        if name == "ablation (2)":
            q1, q3 = np.percentile(res.mse, [25, 75])
            iqr = q3 - q1
    gap = med["ablation (2)"] - med["full"]
    print(f"gap {gap:+.3f} vs IQR {iqr:.3f}: {'met' if gap > iqr else 'not met'}")


if __name__ == "__main__":
    main()
