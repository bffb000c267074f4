"""Experiment configs, seeded runs, the ablation grid, hyperparameter search,
embedding export and reporting.

Every method variant is a set of flags on ``ExperimentConfig``; the only
branch on them is ``train_variant``, which picks the bilevel or the joint
trainer.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .bilevel import BilevelConfig, Sampling, train_bilevel, train_joint
from .data import (
    DataBundle,
    binarize,
    bundle_from_tables,
    holdout,
    load_table,
    make_synthetic_shift,
    split_table,
    standardize,
)
from .errors import (
    ConfigError,
    DivergenceError,
    HypergradientError,
    ParameterError,
    SeriesDivergenceError,
)
from .nets import MIXER_KINDS, REDUCE_KINDS, ComposedModel, build_model

log = logging.getLogger(__name__)

MVALID_MODES = ("pseudo", "oracle")

# Flag presets per method. Anything not listed keeps the ExperimentConfig default.
PRESETS = {
    "ours": dict(mixer="deepsets", l_mix=2, use_context=True, bilevel=True),
    "ours_settransformer": dict(mixer="settransformer", l_mix=2, use_context=True, bilevel=True),
    "ours_joint": dict(mixer="deepsets", l_mix=2, use_context=True, bilevel=False),
    "mlp": dict(mixer="none", use_context=False, bilevel=False, M=0, K=0),
    "mlp_oe": dict(mixer="none", use_context=False, bilevel=False, M=0),
    "mixup": dict(mixer="linear", l_mix=1, use_context=True, bilevel=False, K=0),
    "mixup_oe": dict(mixer="linear", l_mix=1, use_context=True, bilevel=False),
    "manifold_mixup": dict(mixer="linear", l_mix=2, use_context=True, bilevel=False, K=0),
    "manifold_mixup_bilevel": dict(
        mixer="linear", l_mix=2, learnable_linear=True, use_context=True, bilevel=True
    ),
}

MERCK_SETS = (
    "3A4", "CB1", "DPP4", "HIVINT", "HIVPROT", "LOGD", "METAB", "NK1",
    "OX1", "OX2", "PGP", "PPB", "RAT_F", "TDI", "THROMBIN",
)  # fmt: skip

# Published Merck results (mean, stderr over 10 runs) keyed by (method, set, encoding).
# The first four rows are cited as-is in reports and are not re-implemented.
_PUBLISHED = {
    "L1-Regression": [(1.137, 0.0), (0.714, 0.0), (1.611, 0.0), (1.130, 0.0), (0.482, 0.0), (0.442, 0.0)],
    "L2-Regression": [(0.999, 0.0), (0.723, 0.0), (1.495, 0.0), (1.143, 0.0), (0.498, 0.0), (0.436, 0.0)],
    "Random Forest": [(0.815, 0.009), (0.834, 0.010), (1.473, 0.008), (1.461, 0.012), (0.458, 0.002), (0.438, 0.002)],
    "Q-SAVI": [(0.682, 0.019), (0.664, 0.028), (1.332, 0.017), (1.028, 0.027), (0.436, 0.007), (0.387, 0.012)],
    "mlp": [(0.768, 0.014), (2.118, 0.015), (1.393, 0.024), (1.094, 0.029), (0.443, 0.007), (0.399, 0.006)],
    "mixup": [(0.764, 0.008), (0.691, 0.022), (1.439, 0.021), (1.212, 0.012), (0.481, 0.002), (0.479, 0.003)],
    "mixup_oe": [(0.748, 0.01), (0.677, 0.015), (1.384, 0.012), (1.224, 0.016), (0.442, 0.005), (0.443, 0.005)],
    "manifold_mixup": [(0.88, 0.023), (0.898, 0.022), (1.414, 0.021), (1.367, 0.04), (0.432, 0.005), (0.499, 0.013)],
    "manifold_mixup_bilevel": [(0.484, 0.011), (0.804, 0.086), (1.19, 0.05), (1.217, 0.068), (0.43, 0.013), (0.536, 0.039)],
    "ours": [(0.555, 0.096), (0.364, 0.018), (0.984, 0.018), (0.963, 0.017), (0.455, 0.016), (0.376, 0.008)],
    "ours_settransformer": [(0.39, 0.011), (0.726, 0.159), (1.121, 0.037), (0.986, 0.021), (0.429, 0.01), (0.397, 0.015)],
}  # fmt: skip
_CELLS = [(s, e) for s in ("HIVPROT", "DPP4", "NK1") for e in ("count", "bit")]
PUBLISHED_MSE = {
    (method, s, e): v for method, vals in _PUBLISHED.items() for (s, e), v in zip(_CELLS, vals)
}
CITED_ONLY = ("L1-Regression", "L2-Regression", "Random Forest", "Q-SAVI")


# ---------------------------------------------------------------- configs


@dataclass
class DatasetSpec:
    """Where a bundle comes from: the synthetic generator or descriptor CSVs.

    For files, ``test`` may be omitted, in which case ``train`` is split with
    ``test_fraction`` under ``split_seed`` (the same split for every run seed).
    """

    source: str = "synthetic"
    name: str = "synthetic"
    encoding: str = "count"
    train: str | None = None
    test: str | None = None
    unlabeled: list = field(default_factory=list)
    ood: str | None = None
    test_fraction: float = 0.2
    split_seed: int = 0
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"dataset source must be 'synthetic' or 'files', got {self.source!r}")
        if self.encoding not in ("count", "bit"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if self.source == "files" and not self.train:
            raise ConfigError("file datasets need a train path")
        self.unlabeled = [str(p) for p in self.unlabeled]


@dataclass
class ExperimentConfig:
    variant: str = "ours"
    mixer: str = "deepsets"
    l_mix: int = 2
    reduce: str = "max"
    learnable_linear: bool = False
    heads: int = 4
    hidden: int = 64
    n_layers: int = 3
    dropout: float = 0.5
    use_context: bool = True
    bilevel: bool = True
    M: int = 8
    K: int = 8
    mvalid_mode: str = "pseudo"
    B: int = 32
    train: BilevelConfig = field(default_factory=BilevelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: list = field(default_factory=lambda: list(range(10)))
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = _from_fields(BilevelConfig, self.train, "train")
        if isinstance(self.dataset, dict):
            self.dataset = _from_fields(DatasetSpec, self.dataset, "dataset")
        self.seeds = [int(s) for s in self.seeds]
        if not self.use_context:
            self.M = 0  # no effect without context; keeps the hash canonical
        self.validate()

    def validate(self) -> None:
        if self.mixer not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.reduce not in REDUCE_KINDS:
            raise ConfigError(f"unknown reduce {self.reduce!r}")
        if self.mvalid_mode not in MVALID_MODES:
            raise ConfigError(f"mvalid_mode must be one of {MVALID_MODES}")
        if not 1 <= self.l_mix <= self.n_layers - 1:
            raise ConfigError(f"l_mix must be in 1..{self.n_layers - 1}")
        if self.M < 0 or self.K < 0 or self.B < 1:
            raise ConfigError("M and K must be >= 0 and B >= 1")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.use_context and self.mixer == "none":
            raise ConfigError("context needs a mixer; use mixer='none' only without context")
        if self.mvalid_mode == "oracle" and self.K == 0:
            raise ConfigError("oracle mvalid labels need K >= 1")
        if self.bilevel:
            if self.mixer == "linear" and self.l_mix == 1 and not self.learnable_linear:
                raise ConfigError("input-space Mixup has no mixer parameters, so it cannot be bilevel")
            if self.mixer == "none" or (self.mixer == "linear" and not self.learnable_linear):
                raise ConfigError("bilevel training needs a mixer with parameters")
            if self.K < 1:
                raise ConfigError("bilevel training needs K >= 1")

    @property
    def sampling(self) -> Sampling:
        return Sampling(self.B, self.M if self.use_context else 0, self.K, self.mvalid_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_fields(cls, d, "config")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Digest of every field that affects results; the variant label is excluded."""
        d = self.to_dict()
        d.pop("variant")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _from_fields(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ParameterError) as e:
        raise ConfigError(f"bad {where}: {e}") from e


def make_config(variant: str = "ours", **overrides) -> ExperimentConfig:
    """Config for a named method preset; keyword overrides win over the preset."""
    if variant not in PRESETS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(variant=variant, **{**PRESETS[variant], **overrides})


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def merck_dataset(root, target: str, encoding: str = "count", ood: str | None = None) -> DatasetSpec:
    """Dataset spec for a directory of Merck activity CSVs.

    Expects ``<SET>_training*.csv[.gz]`` and ``<SET>_test*.csv[.gz]`` files.
    The target's training file is D_train, its test file D_test, and the
    other training files form the unlabeled pool.
    """
    root = Path(root)

    def find(name, part):
        hits = sorted(p for p in root.iterdir() if p.name.upper().startswith(f"{name}_{part}".upper()))
        return str(hits[0]) if hits else None

    train, test = find(target, "training"), find(target, "test")
    if train is None or test is None:
        raise ConfigError(f"no {target} training/test CSVs under {root}")
    pool = [find(s, "training") for s in MERCK_SETS if s not in (target, ood)]
    pool = [p for p in pool if p is not None]
    ood_path = find(ood, "training") if ood else None
    return DatasetSpec(
        source="files", name=target, encoding=encoding, train=train, test=test,
        unlabeled=pool, ood=ood_path,
    )  # fmt: skip


# ---------------------------------------------------------------- data and models


@lru_cache(maxsize=32)
def _table(path: str, encoding: str):
    t = load_table(path, "count")
    return binarize(t) if encoding == "bit" else t


def build_bundle(spec: DatasetSpec, seed: int, keep_oracle: bool = False) -> DataBundle:
    if spec.source == "synthetic":
        return make_synthetic_shift(seed, **spec.synthetic)
    enc = spec.encoding
    train = _table(spec.train, enc)
    if spec.test:
        test = _table(spec.test, enc)
    else:
        train, test = split_table(train, spec.test_fraction, spec.split_seed)
    pool = [_table(p, enc) for p in spec.unlabeled]
    ood = _table(spec.ood, enc) if spec.ood else None
    meta = {"source": "files", "name": spec.name, "encoding": enc, "train": spec.train,
            "test": spec.test, "unlabeled": list(spec.unlabeled), "ood": spec.ood}  # fmt: skip
    return standardize(bundle_from_tables(train, test, pool, ood, keep_oracle, meta))


def build_from_config(config: ExperimentConfig, in_dim: int, rng) -> ComposedModel:
    return build_model(
        in_dim,
        mixer=config.mixer,
        hidden=config.hidden,
        n_layers=config.n_layers,
        dropout=config.dropout,
        l_mix=config.l_mix,
        reduce=config.reduce,
        learnable_linear=config.learnable_linear,
        heads=config.heads,
        rng=rng,
    )


def train_variant(model, bundle, config: ExperimentConfig, rng):
    trainer = train_bilevel if config.bilevel else train_joint
    return trainer(model, bundle, config.train, config.sampling, rng, config.eval_every)


def _mse(model, X, y) -> float:
    return float(np.mean((model.predict(X) - y) ** 2))


def fit_seed(config: ExperimentConfig, seed: int, holdout_fraction: float = 0.0):
    """Train one seed. Returns (model, bundle, test MSE, validation MSE or None, History)."""
    init_ss, train_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    bundle = build_bundle(config.dataset, seed, keep_oracle=config.mvalid_mode == "oracle")
    X_val = y_val = None
    if holdout_fraction > 0:
        bundle, X_val, y_val = holdout(bundle, holdout_fraction, np.random.default_rng(split_ss))
    model = build_from_config(config, bundle.D, np.random.default_rng(init_ss))
    model, hist = train_variant(model, bundle, config, np.random.default_rng(train_ss))
    test = _mse(model, bundle.X_test, bundle.y_test)
    val = None if X_val is None else _mse(model, X_val, y_val)
    return model, bundle, test, val, hist


# ---------------------------------------------------------------- results


def _stderr(values) -> float:
    n = len(values)
    return float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0


@dataclass
class RunResult:
    variant: str
    dataset: str
    encoding: str
    config_hash: str
    seeds: list
    mse: list
    val_mse: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    histories: dict = field(default_factory=dict, repr=False)
    wall_time: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def stderr(self) -> float:
        return _stderr(self.mse)

    @property
    def val_mean(self) -> float:
        return float(np.mean(self.val_mse)) if self.val_mse else float("inf")

    @property
    def incomplete(self) -> bool:
        return bool(self.failures)

    def to_json(self) -> dict:
        """Machine-readable record. Wall time and histories stay out so reruns match bitwise."""
        return {
            "variant": self.variant,
            "dataset": self.dataset,
            "encoding": self.encoding,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "mse": list(self.mse),
            "val_mse": list(self.val_mse),
            "failures": list(self.failures),
            "mean": self.mean,
            "stderr": self.stderr,
            "incomplete": self.incomplete,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        keep = ("variant", "dataset", "encoding", "config_hash", "seeds", "mse", "val_mse", "failures")
        return cls(**{k: d[k] for k in keep})


def _seed_job(args):
    config, seed, holdout_fraction = args
    try:
        _, _, test, val, hist = fit_seed(config, seed, holdout_fraction)
    except (DivergenceError, HypergradientError, SeriesDivergenceError, FloatingPointError) as e:
        return seed, None, None, None, f"{type(e).__name__}: {e}"
    if not math.isfinite(test):
        return seed, None, None, None, "non-finite test MSE"
    return seed, test, val, hist, None


def run_experiment(config: ExperimentConfig, workers: int = 1, holdout_fraction: float = 0.0) -> RunResult:
    """Train and evaluate every seed of ``config``; diverged seeds are recorded, not dropped."""
    t0 = time.perf_counter()
    jobs = [(config, s, holdout_fraction) for s in config.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_seed_job, jobs))
    else:
        outs = [_seed_job(j) for j in jobs]
    outs = {o[0]: o for o in outs}
    result = RunResult(
        variant=config.variant,
        dataset=config.dataset.name,
        encoding=config.dataset.encoding,
        config_hash=config.config_hash(),
        seeds=[],
        mse=[],
    )
    for seed in config.seeds:
        _, test, val, hist, err = outs[seed]
        if err is not None:
            log.warning("%s seed %d failed: %s", config.variant, seed, err)
            result.failures.append({"seed": seed, "reason": err})
            continue
        result.seeds.append(seed)
        result.mse.append(test)
        if val is not None:
            result.val_mse.append(val)
        result.histories[seed] = hist
    if result.incomplete:
        log.warning("%s: %d/%d seeds failed; aggregates use the rest",
                    config.variant, len(result.failures), len(config.seeds))  # fmt: skip
    result.wall_time = time.perf_counter() - t0
    return result


def save_run(result: RunResult, config: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    pd.DataFrame({"seed": result.seeds, "test_mse": result.mse}).to_csv(out / "per_seed.csv", index=False)
    for seed, hist in result.histories.items():
        hist.to_csv(out / f"history_seed{seed}.csv")
    return out


# ---------------------------------------------------------------- ablations


@dataclass
class AblationRow:
    model: str
    context: bool
    bilevel: bool
    mvalid: str
    result: RunResult


def ablation_configs(base: ExperimentConfig, mixers: Sequence[str] = ("deepsets", "settransformer")):
    """The seven ablation cells: per mixer (ctx, joint), (ctx, bilevel, oracle), (ctx, bilevel, pseudo),
    plus one context-free MLP trained jointly with pseudo mvalid."""
    K = max(base.K, 1)
    cells = []

    def cell(model, variant, **flags):
        cfg = base.replace(variant=variant, K=K, **flags)
        cells.append((model, cfg.use_context, cfg.bilevel, cfg.mvalid_mode, cfg))

    for mx in mixers:
        cell(mx, f"{mx}_joint", mixer=mx, use_context=True, bilevel=False, mvalid_mode="pseudo")
    cell("mlp", "mlp_oe", mixer="none", use_context=False, bilevel=False, mvalid_mode="pseudo")
    for mx in mixers:
        cell(mx, f"{mx}_oracle", mixer=mx, use_context=True, bilevel=True, mvalid_mode="oracle")
    for mx in mixers:
        cell(mx, f"{mx}_full", mixer=mx, use_context=True, bilevel=True, mvalid_mode="pseudo")
    return cells


def run_ablation_grid(base: ExperimentConfig, mixers=("deepsets", "settransformer"), workers: int = 1):
    rows = []
    for model, ctx, bil, mode, cfg in ablation_configs(base, mixers):
        log.info("ablation cell %s", cfg.variant)
        rows.append(AblationRow(model, ctx, bil, "real" if mode == "oracle" else "rand",
                                run_experiment(cfg, workers)))  # fmt: skip
    return rows


def render_ablation(rows: Sequence[AblationRow]) -> str:
    head = f"{'model':<16}{'ctx':>5}{'bilevel':>9}{'y_mvalid':>10}   MSE"
    lines = [head, "-" * len(head)]
    mark = {True: "yes", False: "no"}
    for r in rows:
        res = r.result
        lines.append(
            f"{r.model:<16}{mark[r.context]:>5}{mark[r.bilevel]:>9}{r.mvalid:>10}   "
            f"{res.mean:.3f} ± {res.stderr:.3f}" + (" (incomplete)" if res.incomplete else "")
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- search


@dataclass
class SearchResult:
    best: ExperimentConfig
    leaderboard: list  # dicts sorted best-first


def hyperparam_search(
    config: ExperimentConfig,
    grid: dict | None = None,
    holdout_fraction: float = 0.1,
    workers: int = 1,
) -> SearchResult:
    """Grid search over M and K, scored on a labeled holdout carved from the train split.

    Methods without mvalid points (K = 0) search M only and context-free
    methods search K only. Ties go to the
    smaller M, then the smaller K.
    """
    grid = dict(grid or {"M": [1, 4, 8], "K": [1, 6, 8]})
    Ms = sorted(grid.get("M", [config.M])) if config.use_context else [0]
    Ks = sorted(grid.get("K", [config.K])) if config.K > 0 else [0]
    if not Ms or not Ks:
        raise ConfigError("search grid is empty")
    board = []
    for M in Ms:
        for K in Ks:
            cfg = config.replace(M=M, K=K)
            res = run_experiment(cfg, workers, holdout_fraction)
            board.append({"M": M, "K": K, "val_mse": res.val_mean, "test_mse": res.mean,
                          "failures": len(res.failures), "result": res})  # fmt: skip
    board.sort(key=lambda r: (r["val_mse"], r["M"], r["K"]))
    return SearchResult(config.replace(M=board[0]["M"], K=board[0]["K"]), board)


# ---------------------------------------------------------------- embeddings

BLOCKS = ("Z_joint", "Z_input", "Z_context", "Z_ood")


def export_embeddings(model: ComposedModel, bundle: DataBundle, out_path, rng=None, n_context: int = 100):
    """Write penultimate-layer features for four views of the data as one CSV.

    Z_joint mixes each train row with ``n_context`` pool rows, Z_input is the
    train row alone, Z_context passes each sampled pool row on its own and
    Z_ood passes OOD rows alone. Columns: block, row_id, z0..z{H-1}.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    X = bundle.X_train
    parts = []

    def add(block, ids, Z):
        df = pd.DataFrame(Z, columns=[f"z{j}" for j in range(Z.shape[1])])
        df.insert(0, "row_id", np.asarray(ids, dtype=np.int64))
        df.insert(0, "block", block)
        parts.append(df)

    idx = rng.integers(0, len(bundle.X_unlabeled), size=(len(X), n_context))
    add("Z_joint", np.arange(len(X)), model.embed(X, bundle.X_unlabeled[idx], rng=rng))
    add("Z_input", np.arange(len(X)), model.embed(X))
    used = np.unique(idx)
    add("Z_context", used, model.embed(bundle.X_unlabeled[used]))
    if bundle.X_ood is None or len(bundle.X_ood) == 0:
        warnings.warn("bundle has no OOD rows; writing three embedding blocks", stacklevel=2)
    else:
        add("Z_ood", np.arange(len(bundle.X_ood)), model.embed(bundle.X_ood))
    out = pd.concat(parts, ignore_index=True)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(out_path, index=False, float_format="%.17g")
    return out


def read_embeddings(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"block": str}, float_precision="round_trip")


# ---------------------------------------------------------------- reporting


def report(results: Sequence[RunResult], out_dir=None, references: bool = True) -> str:
    """Methods as rows, (dataset, encoding) as columns, cells ``mean ± stderr``.

    With ``out_dir`` the same numbers are also written as results.csv and
    results.json. Published baselines are appended for Merck sets.
    """
    rows = [
        {"method": r.variant, "dataset": r.dataset, "encoding": r.encoding, "mean": r.mean,
         "stderr": r.stderr, "n": len(r.mse), "failed": len(r.failures), "source": "run"}
        for r in results
    ]  # fmt: skip
    cols = list(dict.fromkeys((r["dataset"], r["encoding"]) for r in rows))
    if references:
        for method in CITED_ONLY:
            for ds, enc in cols:
                if (method, ds, enc) in PUBLISHED_MSE:
                    m, s = PUBLISHED_MSE[(method, ds, enc)]
                    rows.append({"method": method, "dataset": ds, "encoding": enc, "mean": m,
                                 "stderr": s, "n": 10, "failed": 0, "source": "cited"})  # fmt: skip
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["method"], r["dataset"], r["encoding"]): r for r in rows}
    width = max([len(m) for m in methods] + [6]) + 2
    head = "method".ljust(width) + "".join(f"{d + ' ' + e:>22}" for d, e in cols)
    lines = [head, "-" * len(head)]
    for m in methods:
        line = m.ljust(width)
        for d, e in cols:
            r = cell.get((m, d, e))
            txt = "" if r is None else f"{r['mean']:.3f} ± {r['stderr']:.3f}"
            if r is not None and r["source"] == "cited":
                txt += "*"
            elif r is not None and r["failed"]:
                txt += "!"
            line += f"{txt:>22}"
        lines.append(line)
    if any(r["source"] == "cited" for r in rows):
        lines.append("* published value, not re-run")
    if any(r["failed"] for r in rows):
        lines.append("! some seeds failed; aggregate over the completed ones")
    text = "\n".join(lines)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows).to_csv(out / "results.csv", index=False, float_format="%.17g")
        (out / "results.json").write_text(
            json.dumps([r.to_json() for r in results], indent=2, sort_keys=True)
        )
        (out / "results.txt").write_text(text + "\n")
    return text
