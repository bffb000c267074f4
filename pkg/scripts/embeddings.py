"""Penultimate-layer embeddings of three context-using methods, for t-SNE or similar.

    python3 scripts/embeddings.py --out runs/embeddings            # synthetic
    python3 scripts/embeddings.py --merck /data/merck --target DPP4 --encoding bit --ood NK1
"""
import argparse

import numpy as np

from densify import harness as H

METHODS = ("ours", "mixup_oe", "manifold_mixup_bilevel")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--merck")
    ap.add_argument("--target", default="DPP4")
    ap.add_argument("--encoding", default="bit")
    ap.add_argument("--ood", default="NK1")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/embeddings")
    args = ap.parse_args()

    data = H.merck_dataset(args.merck, args.target, args.encoding, args.ood) if args.merck else H.DatasetSpec()
    for method in METHODS:
        cfg = H.make_config(method, seeds=[args.seed], dataset=data)
        model, bundle, test, _, _ = H.fit_seed(cfg, args.seed)
        path = f"{args.out}/{method}.csv"
        df = H.export_embeddings(model, bundle, path, np.random.default_rng(args.seed))
        sizes = df.groupby("block").size().to_dict()
        print(f"{method}: test MSE {test:.3f}, blocks {sizes} -> {path}")


if __name__ == "__main__":
    main()
