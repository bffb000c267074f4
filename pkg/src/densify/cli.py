"""Command-line entry point: ``densify {run,ablate,search,embed,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import harness as H
from .errors import ConfigError
from .nets import MIXER_KINDS, save_checkpoint


def _dataset(args) -> H.DatasetSpec | None:
    if args.dataset is None:
        return None
    if args.dataset == "synthetic":
        return H.DatasetSpec()
    path = Path(args.dataset)
    if path.is_dir():
        if not args.target:
            raise ConfigError("--target is required when --dataset is a directory")
        return H.merck_dataset(path, args.target, args.encoding, args.ood)
    if not path.exists():
        raise ConfigError(f"dataset path {path} does not exist")
    return H.DatasetSpec(
        source="files", name=path.name.split(".")[0], encoding=args.encoding, train=str(path),
        test=args.test, unlabeled=args.unlabeled or [], ood=args.ood,
    )  # fmt: skip


def build_config(args) -> H.ExperimentConfig:
    cfg = H.load_config(args.config) if args.config else H.make_config(args.variant)
    if args.config and args.variant:
        # preset flags win; everything else comes from the file
        cfg = H.ExperimentConfig(**{**cfg.to_dict(), **H.PRESETS[args.variant], "variant": args.variant})
    changes = {}
    ds = _dataset(args)
    if ds is not None:
        changes["dataset"] = ds
    for flag, key in (("mixer", "mixer"), ("M", "M"), ("K", "K"), ("mvalid_mode", "mvalid_mode")):
        if getattr(args, flag) is not None:
            changes[key] = getattr(args, flag)
    if args.seed_count is not None:
        changes["seeds"] = list(range(args.seed_count))
    train = {k: getattr(args, k) for k in ("outer_steps", "outer_rounds") if getattr(args, k) is not None}
    if train:
        changes["train"] = dataclasses.replace(cfg.train, **train)
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = build_config(args)
    res = H.run_experiment(cfg, workers=args.workers)
    out = H.save_run(res, cfg, args.out_dir)
    print(H.report([res], out_dir=out))
    print(f"wall time {res.wall_time:.1f}s; results in {out}")
    return 1 if not res.mse else 0


def cmd_ablate(args) -> int:
    base = build_config(args)
    rows = H.run_ablation_grid(base, workers=args.workers)
    out = Path(args.out_dir)
    for r in rows:
        cfg = [c for *_, c in H.ablation_configs(base) if c.variant == r.result.variant][0]
        H.save_run(r.result, cfg, out / r.result.variant)
    text = H.render_ablation(rows)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "results.json").write_text(json.dumps([r.result.to_json() for r in rows], indent=2, sort_keys=True))
    print(text)
    return 0


def cmd_search(args) -> int:
    cfg = build_config(args)
    res = H.hyperparam_search(cfg, workers=args.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    board = pd.DataFrame([{k: v for k, v in r.items() if k != "result"} for r in res.leaderboard])
    board.to_csv(out / "leaderboard.csv", index=False, float_format="%.17g")
    (out / "best_config.json").write_text(json.dumps(res.best.to_dict(), indent=2, sort_keys=True))
    print(board.to_string(index=False))
    print(f"best: M={res.best.M} K={res.best.K}")
    return 0


def cmd_embed(args) -> int:
    cfg = build_config(args)
    seed = cfg.seeds[0]
    model, bundle, test, _, _ = H.fit_seed(cfg, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    bundle.write_manifest(out / "manifest.json")
    df = H.export_embeddings(model, bundle, out / "embeddings.csv", np.random.default_rng(seed))
    print(df.groupby("block").size().to_string())
    print(f"seed {seed} test MSE {test:.4f}; embeddings in {out / 'embeddings.csv'}")
    return 0


def cmd_report(args) -> int:
    results = []
    for p in args.results:
        data = json.loads(Path(p).read_text())
        for d in data if isinstance(data, list) else [data]:
            results.append(H.RunResult.from_json(d))
    print(H.report(results, out_dir=args.out_dir, references=not args.no_references))
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densify", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="ExperimentConfig JSON")
        s.add_argument("--variant", choices=sorted(H.PRESETS))
        s.add_argument("--mixer", choices=MIXER_KINDS)
        s.add_argument("--M", type=int)
        s.add_argument("--K", type=int)
        s.add_argument("--mvalid-mode", dest="mvalid_mode", choices=H.MVALID_MODES)
        s.add_argument("--seed-count", type=int)
        s.add_argument("--dataset", help="'synthetic', a Merck directory, or a train CSV")
        s.add_argument("--target", help="Merck set name when --dataset is a directory")
        s.add_argument("--encoding", choices=("count", "bit"), default="count")
        s.add_argument("--test", help="test CSV (train CSV mode)")
        s.add_argument("--unlabeled", nargs="*", help="pool CSVs (train CSV mode)")
        s.add_argument("--ood", help="OOD CSV, or Merck set name in directory mode")
        s.add_argument("--outer-steps", type=int)
        s.add_argument("--outer-rounds", type=int)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out-dir", default=f"runs/{name}")
        s.set_defaults(fn=fn)

    experiment("run", cmd_run, "train and evaluate one configuration over its seeds")
    experiment("ablate", cmd_ablate, "run the context / bilevel / mvalid-label ablation grid")
    experiment("search", cmd_search, "grid search over M and K on a train holdout")
    experiment("embed", cmd_embed, "train one seed and export penultimate-layer embeddings")

    r = sub.add_parser("report", help="render result JSON files as a table")
    r.add_argument("results", nargs="+")
    r.add_argument("--out-dir")
    r.add_argument("--no-references", action="store_true")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "variant", "x") is None and getattr(args, "config", None) is None:
        args.variant = "ours"
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"densify: config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
