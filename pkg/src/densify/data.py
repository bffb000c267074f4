"""Descriptor tables, dataset bundles, minibatch sampling and a synthetic shift benchmark."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    AlignmentError,
    DegenerateDataError,
    MissingLabelError,
    ParameterError,
    ParseError,
    ValidationError,
)

LABEL_COLUMN = "Act"
ENCODINGS = ("bit", "count")


@dataclass(frozen=True)
class DescriptorTable:
    name: str
    ids: np.ndarray
    columns: tuple
    X: np.ndarray
    y: np.ndarray | None
    encoding: str

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def labeled(self) -> bool:
        return self.y is not None


def _validate_encoding(X: np.ndarray, encoding: str, name: str) -> None:
    if encoding not in ENCODINGS:
        raise ValidationError(f"{name}: unknown encoding {encoding!r}")
    if encoding == "bit":
        bad = ~np.isin(X, (0.0, 1.0))
        what = "0/1"
    else:
        bad = (X < 0) | (X != np.round(X))
        what = "non-negative integer"
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValidationError(
            f"{name}: {encoding} encoding expects {what} values; row {r + 1}, "
            f"descriptor {c + 1} holds {X[r, c]!r}"
        )


def load_table(path, encoding: str, name: str | None = None) -> DescriptorTable:
    """Read a descriptor CSV: id column first, optional ``Act`` label, numeric descriptors.

    Gzip-compressed files are detected from the extension.
    """
    path = Path(path)
    name = name or path.name.split(".")[0]
    df = pd.read_csv(path, compression="infer", dtype={0: str})
    if df.shape[1] < 2:
        raise ParseError(f"{path}: need an id column and at least one descriptor")
    ids = df.iloc[:, 0].to_numpy(dtype=str)
    y = None
    desc = df.iloc[:, 1:]
    if LABEL_COLUMN in desc.columns:
        y = pd.to_numeric(desc[LABEL_COLUMN], errors="coerce").to_numpy(dtype=np.float64)
        if np.isnan(y).any():
            r = int(np.flatnonzero(np.isnan(y))[0])
            raise ParseError(f"{path}: row {r + 1}, column {LABEL_COLUMN!r} is not numeric")
        desc = desc.drop(columns=[LABEL_COLUMN])
    if desc.shape[1] == 0:
        raise ParseError(f"{path}: no descriptor columns")
    numeric = desc.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ParseError(
            f"{path}: row {r + 1}, column {desc.columns[c]!r}: "
            f"{desc.iat[r, c]!r} is not a number"
        )
    X = numeric.to_numpy(dtype=np.float64)
    _validate_encoding(X, encoding, str(path))
    return DescriptorTable(name, ids, tuple(map(str, desc.columns)), X, y, encoding)


def align_features(
    train: DescriptorTable, others: Sequence[DescriptorTable]
) -> list[DescriptorTable]:
    """Re-express ``others`` in ``train``'s descriptor columns.

    Shared columns are copied by name, columns missing from a table are
    zero-filled and extra columns are dropped.
    """
    ref = train.columns
    out = []
    for t in others:
        pos = {c: j for j, c in enumerate(t.columns)}
        src = np.array([pos.get(c, -1) for c in ref])
        present = src >= 0
        if not present.any():
            raise AlignmentError(f"{t.name} shares no descriptor columns with {train.name}")
        X = np.zeros((t.n, len(ref)))
        X[:, present] = t.X[:, src[present]]
        out.append(dataclasses.replace(t, columns=tuple(ref), X=X))
    return out


def binarize(table: DescriptorTable) -> DescriptorTable:
    """Bit-vector view of a count table (presence of each substructure)."""
    return dataclasses.replace(table, X=(table.X > 0).astype(np.float64), encoding="bit")


class OracleLabels:
    """Labels of the unlabeled pool, reachable only through this explicit view.

    Only the oracle mvalid ablation reads from it; the pool itself is stored
    label-free on the bundle.
    """

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.float64)
        self.reads = 0

    def __len__(self):
        return len(self._labels)

    def take(self, idx) -> np.ndarray:
        self.reads += 1
        return self._labels[idx].copy()

    def transformed(self, fn) -> "OracleLabels":
        return OracleLabels(fn(self._labels))


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DataBundle:
    X_train: np.ndarray
    y_train: np.ndarray
    X_unlabeled: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    X_ood: np.ndarray | None = None
    oracle: OracleLabels | None = field(default=None, repr=False, compare=False)
    y_mean: float = 0.0
    y_std: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("X_train", "y_train", "X_unlabeled", "X_test", "y_test", "X_ood"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        D = self.X_train.shape[1]
        for name in ("X_unlabeled", "X_test", "X_ood"):
            a = getattr(self, name)
            if a is not None and (a.ndim != 2 or a.shape[1] != D):
                raise AlignmentError(f"{name} has shape {a.shape}, expected (*, {D})")
        if len(self.y_train) != len(self.X_train) or len(self.y_test) != len(self.X_test):
            raise ValidationError("label and feature row counts differ")
        if self.oracle is not None and len(self.oracle) != len(self.X_unlabeled):
            raise ValidationError("oracle labels do not match the unlabeled pool")

    @property
    def D(self) -> int:
        return self.X_train.shape[1]

    def inverse_labels(self, y) -> np.ndarray:
        return np.asarray(y) * self.y_std + self.y_mean

    def manifest(self) -> dict:
        return {
            **self.meta,
            "rows": {
                "train": int(len(self.X_train)),
                "unlabeled": int(len(self.X_unlabeled)),
                "test": int(len(self.X_test)),
                "ood": 0 if self.X_ood is None else int(len(self.X_ood)),
            },
            "D": self.D,
            "label_mean": float(self.y_mean),
            "label_std": float(self.y_std),
            "oracle_labels": self.oracle is not None,
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


def bundle_from_tables(
    train: DescriptorTable,
    test: DescriptorTable,
    unlabeled: Sequence[DescriptorTable],
    ood: DescriptorTable | None = None,
    keep_oracle: bool = False,
    meta: dict | None = None,
) -> DataBundle:
    """Align every table to ``train`` and assemble a bundle; pool labels are stripped."""
    if not train.labeled or not test.labeled:
        raise MissingLabelError("train and test tables need an Act column")
    aligned = align_features(train, [test, *unlabeled] + ([ood] if ood is not None else []))
    test_a, pool = aligned[0], aligned[1 : 1 + len(unlabeled)]
    ood_a = aligned[-1] if ood is not None else None
    X_pool = np.concatenate([t.X for t in pool]) if pool else np.zeros((0, train.X.shape[1]))
    oracle = None
    if keep_oracle and pool and all(t.labeled for t in pool):
        oracle = OracleLabels(np.concatenate([t.y for t in pool]))
    return DataBundle(
        X_train=train.X,
        y_train=train.y,
        X_unlabeled=X_pool,
        X_test=test_a.X,
        y_test=test_a.y,
        X_ood=None if ood_a is None else ood_a.X,
        oracle=oracle,
        meta=dict(meta or {}),
    )


def split_table(table: DescriptorTable, test_fraction: float, seed: int):
    """Seeded random split into (train, test) when no explicit test file is given."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(table.n)
    n_test = max(1, int(round(test_fraction * table.n)))
    te, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    def take(idx):
        y = None if table.y is None else table.y[idx]
        return dataclasses.replace(table, ids=table.ids[idx], X=table.X[idx], y=y)

    return take(tr), take(te)


def standardize(bundle: DataBundle) -> DataBundle:
    """Map labels to zero mean / unit variance using train statistics only."""
    mu = float(np.mean(bundle.y_train))
    sd = float(np.std(bundle.y_train))
    if not sd > 0.0:
        raise DegenerateDataError("train labels have zero variance")

    def tf(y):
        return (y - mu) / sd

    return dataclasses.replace(
        bundle,
        y_train=tf(bundle.y_train),
        y_test=tf(bundle.y_test),
        oracle=None if bundle.oracle is None else bundle.oracle.transformed(tf),
        y_mean=bundle.y_mean + bundle.y_std * mu,
        y_std=bundle.y_std * sd,
    )


def holdout(bundle: DataBundle, fraction: float, rng: np.random.Generator):
    """Carve a labeled validation slice out of the train split.

    Returns (bundle with reduced train set, X_val, y_val).
    """
    n = len(bundle.X_train)
    n_val = max(1, int(round(fraction * n)))
    perm = rng.permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    reduced = dataclasses.replace(bundle, X_train=bundle.X_train[tr], y_train=bundle.y_train[tr])
    return reduced, bundle.X_train[val].copy(), bundle.y_train[val].copy()


@dataclass
class MiniBatch:
    x: np.ndarray  # [B, 1, D]
    y: np.ndarray  # [B]
    C: np.ndarray  # [B, m, D]
    m: int
    X_mvalid: np.ndarray  # [K, D]
    y_mvalid: np.ndarray  # [K]
    anchor_idx: np.ndarray

    @property
    def K(self) -> int:
        return len(self.y_mvalid)


def sample_batch(
    bundle: DataBundle,
    B: int,
    M: int,
    K: int,
    mode: str = "pseudo",
    rng: np.random.Generator | None = None,
) -> MiniBatch:
    """Draw anchors, a shared context size m ~ U{0..M}, context rows and K mvalid points.

    Anchors come without replacement from the train split; context rows come
    with replacement from the unlabeled pool. Pseudo mode labels mvalid points
    with N(0, 1) draws and never reads the pool's oracle labels.
    """
    if mode not in ("pseudo", "oracle"):
        raise ParameterError(f"mvalid mode must be 'pseudo' or 'oracle', got {mode!r}")
    n = len(bundle.X_train)
    if not 1 <= B <= n:
        raise ParameterError(f"batch size {B} with {n} training rows")
    if M < 0 or K < 0:
        raise ParameterError("M and K must be non-negative")
    rng = rng if rng is not None else np.random.default_rng()
    pool = bundle.X_unlabeled
    idx = rng.choice(n, size=B, replace=False)
    m = int(rng.integers(0, M + 1))
    if m > 0 and len(pool) == 0:
        raise ParameterError("context requested but the unlabeled pool is empty")
    C = pool[rng.integers(0, len(pool), size=(B, m))] if m > 0 else np.zeros((B, 0, bundle.D))
    X_mv = np.zeros((0, bundle.D))
    y_mv = np.zeros(0)
    if K > 0:
        if len(pool) == 0:
            raise ParameterError("mvalid points requested but the unlabeled pool is empty")
        if mode == "oracle" and bundle.oracle is None:
            raise MissingLabelError("oracle mvalid labels requested but the pool is unlabeled")
        kidx = rng.choice(len(pool), size=K, replace=K > len(pool))
        X_mv = pool[kidx]
        y_mv = rng.standard_normal(K) if mode == "pseudo" else bundle.oracle.take(kidx)
    return MiniBatch(
        x=bundle.X_train[idx][:, None, :],
        y=bundle.y_train[idx].copy(),
        C=np.array(C),
        m=m,
        X_mvalid=np.array(X_mv),
        y_mvalid=np.asarray(y_mv, dtype=np.float64),
        anchor_idx=idx,
    )


def make_synthetic_shift(
    seed: int,
    n_train: int = 200,
    n_unlabeled: int = 2000,
    n_test: int = 500,
    D: int = 32,
    shift: float = 3.0,
    n_ood: int = 500,
    noise: float = 0.1,
    standardized: bool = True,
) -> DataBundle:
    """Covariate-shift regression problem with a fixed random two-layer target.

    Train inputs sit in a tight cluster; test inputs are the same cluster moved
    ``shift`` units along a random direction u. The target's first layer is
    projected off u, so the move changes the inputs but not the labeling
    rule (pure covariate shift). The unlabeled pool is spread along u from
    before the train region to past the test region, with a broader
    covariance, so it covers both. OOD inputs form a third cluster displaced
    along a direction orthogonal to u. Oracle labels of the pool are kept
    behind ``bundle.oracle``.
    """
    if shift < 0:
        raise ParameterError("shift must be non-negative")
    if D < 2:
        raise ParameterError("D must be at least 2")
    rng = np.random.default_rng(seed)
    width = 32
    W1 = rng.normal(size=(D, width)) / np.sqrt(D)
    b1 = rng.normal(scale=0.5, size=width)
    w2 = rng.normal(size=width) / np.sqrt(width)

    basis, _ = np.linalg.qr(rng.normal(size=(D, 2)))
    u, v = basis[:, 0], basis[:, 1]
    W1 -= np.outer(u, u @ W1)

    def target(X):
        return np.tanh(X @ W1 + b1) @ w2

    sigma = 0.5

    def cluster(n, centre, scale):
        return centre + scale * rng.normal(size=(n, D))

    X_train = cluster(n_train, 0.0, sigma)
    X_test = cluster(n_test, shift * u, sigma)
    where = rng.uniform(-0.5, 1.5, size=n_unlabeled)
    X_pool = where[:, None] * shift * u + 2 * sigma * rng.normal(size=(n_unlabeled, D))
    X_ood = cluster(n_ood, max(shift, 1.0) * v, sigma)

    def label(X):
        return target(X) + noise * rng.normal(size=len(X))

    bundle = DataBundle(
        X_train=X_train,
        y_train=label(X_train),
        X_unlabeled=X_pool,
        X_test=X_test,
        y_test=label(X_test),
        X_ood=X_ood,
        oracle=OracleLabels(label(X_pool)),
        meta={
            "source": "synthetic",
            "seed": seed,
            "shift": shift,
            "noise": noise,
        },
    )
    return standardize(bundle) if standardized else bundle
