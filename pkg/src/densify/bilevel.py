"""Inner/outer training of the learner and mixer.

The inner loop fits the learner parameters on the mixed training loss with the
mixer frozen. The outer loop moves the mixer parameters along the implicit
hypergradient of the meta-validation loss, whose inverse-Hessian factor is
approximated with a truncated Neumann series. ``train_joint`` is the
single-optimizer alternative used by the ablations and the Mixup baselines.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ndtensor as nd
from .data import DataBundle, MiniBatch, sample_batch
from .errors import (
    DivergenceError,
    HypergradientError,
    ParameterError,
    SeriesDivergenceError,
)
from .ndtensor import Tensor
from .nets import ComposedModel

OPTIMIZERS = ("adam", "sgd", "schedulefree")


@dataclass
class BilevelConfig:
    inner_steps: int = 10
    outer_steps: int = 50
    lr_theta: float = 1e-3
    lr_lambda: float = 1e-5
    neumann_terms: int = 3
    neumann_scale: float = 0.1
    inner_optimizer: str = "adam"
    outer_optimizer: str = "adam"
    outer_rounds: int = 1
    warm_start: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.inner_steps < 1 or self.outer_steps < 1 or self.outer_rounds < 1:
            raise ParameterError("inner_steps, outer_steps and outer_rounds must be >= 1")
        if self.neumann_terms < 0:
            raise ParameterError("neumann_terms must be >= 0")
        if not self.neumann_scale > 0:
            raise ParameterError("neumann_scale must be > 0")
        for kind in (self.inner_optimizer, self.outer_optimizer):
            if kind not in OPTIMIZERS:
                raise ParameterError(f"unknown optimizer {kind!r}")


@dataclass
class Sampling:
    """Minibatch protocol: batch size, max context size, mvalid count and label mode."""

    B: int = 32
    M: int = 8
    K: int = 8
    mode: str = "pseudo"


# ---------------------------------------------------------------- optimizers


def _lrs(params, lr):
    if np.isscalar(lr):
        return [float(lr)] * len(params)
    lr = [float(v) for v in lr]
    if len(lr) != len(params):
        raise ParameterError("one learning rate per parameter tensor expected")
    return lr


class SGD:
    def __init__(self, params: Sequence[Tensor], lr, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = _lrs(self.params, lr)
        self.weight_decay = weight_decay

    def step(self, grads):
        for p, g, lr in zip(self.params, grads, self.lr):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data = p.data - lr * g

    def train(self):
        pass

    def eval(self):
        pass


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = _lrs(self.params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data = p.data - self.lr[i] * upd

    def train(self):
        pass

    def eval(self):
        pass


class ScheduleFreeAdamW:
    """Schedule-free AdamW (no warmup): gradients are taken at an interpolation
    of the base iterate z and its running average x.

    Parameters hold the interpolation point while training; call ``eval()``
    to swap in the averaged iterate and ``train()`` to swap back.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = _lrs(self.params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.z = [p.data.copy() for p in self.params]
        self.x = [p.data.copy() for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.training = True

    def step(self, grads):
        if not self.training:
            raise RuntimeError("schedule-free optimizer stepped in eval mode")
        self.t += 1
        c2 = 1.0 - self.b2**self.t
        ck = 1.0 / self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            y = p.data
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            upd = g / (np.sqrt(self.v[i] / c2) + self.eps) + self.weight_decay * y
            self.z[i] = self.z[i] - self.lr[i] * upd
            self.x[i] = (1.0 - ck) * self.x[i] + ck * self.z[i]
            p.data = (1.0 - self.b1) * self.z[i] + self.b1 * self.x[i]

    def eval(self):
        if self.training:
            for p, x in zip(self.params, self.x):
                p.data = x.copy()
            self.training = False

    def train(self):
        if not self.training:
            for i, p in enumerate(self.params):
                p.data = (1.0 - self.b1) * self.z[i] + self.b1 * self.x[i]
            self.training = True


def make_optimizer(kind: str, params, lr, weight_decay: float = 0.0):
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr, weight_decay=weight_decay)
    if kind == "schedulefree":
        return ScheduleFreeAdamW(params, lr, weight_decay=weight_decay)
    raise ParameterError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- losses


def train_loss(model: ComposedModel, batch: MiniBatch, rng, train: bool = True) -> Tensor:
    pred, _ = model.forward_train(Tensor(batch.x), Tensor(batch.C), rng=rng, train=train)
    return nd.mse(pred, Tensor(batch.y))


def mvalid_loss(model: ComposedModel, batch: MiniBatch) -> Tensor | None:
    """Meta-validation loss on the singleton path (dropout off); None when K = 0."""
    if batch.K == 0:
        return None
    pred, _ = model.forward_test(Tensor(batch.X_mvalid[:, None, :]))
    return nd.mse(pred, Tensor(batch.y_mvalid))


def _finite(t: Tensor) -> bool:
    return t.is_finite()


# ---------------------------------------------------------------- loop pieces


def inner_step(model: ComposedModel, opt, batch: MiniBatch, rng, step: int = 0) -> float:
    """One optimizer step on the mixed training loss, learner parameters only."""
    loss = train_loss(model, batch, rng, train=True)
    if not _finite(loss):
        raise DivergenceError("inner", step)
    grads = nd.grad(loss, model.theta())
    opt.step([g.data for g in grads])
    return loss.item()


def neumann_ihvp(hvp_fn: Callable, v, J: int, eta: float) -> np.ndarray:
    """eta * sum_{j=0..J} (I - eta H)^j v, an approximation of H^{-1} v."""
    if J < 0:
        raise ParameterError("J must be >= 0")
    if not eta > 0:
        raise ParameterError("eta must be > 0")
    v = np.asarray(v, dtype=np.float64)
    term = v.copy()
    total = v.copy()
    for j in range(J):
        with np.errstate(over="ignore", invalid="ignore"):
            term = term - eta * hvp_fn(term)
        if not np.all(np.isfinite(term)):
            raise SeriesDivergenceError(f"Neumann term {j + 1} is not finite; reduce eta")
        total = total + term
    return eta * total


def implicit_hypergradient(
    loss_train: Callable[[], Tensor],
    loss_val: Callable[[], Tensor],
    theta: Sequence[Tensor],
    lam: Sequence[Tensor],
    J: int,
    eta: float,
) -> list:
    """dL_V/dlam = dL_V/dlam (direct) - d/dlam < dL_T/dtheta, H^{-1} dL_V/dtheta >.

    The loss callables rebuild their graphs from the current parameter values.
    Returns one array per tensor in ``lam``.
    """
    theta, lam = list(theta), list(lam)
    L_V = loss_val()
    if not _finite(L_V):
        raise HypergradientError("L_V")
    gV = nd.grad(L_V, theta + lam, allow_unused=True)
    v1 = nd.flatten(gV[: len(theta)])
    direct = [g.data for g in gV[len(theta) :]]
    if not np.all(np.isfinite(v1)):
        raise HypergradientError("dL_V/dtheta")
    if not all(np.all(np.isfinite(d)) for d in direct):
        raise HypergradientError("dL_V/dlambda")
    if not np.any(v1):
        return direct

    L_T = loss_train()
    if not _finite(L_T):
        raise HypergradientError("L_T")
    gT = nd.grad(L_T, theta, keep_graph=True)
    try:
        v2 = neumann_ihvp(lambda v: nd.hvp_from_grads(gT, theta, v), v1, J, eta)
    except SeriesDivergenceError as exc:
        raise HypergradientError("inverse-Hessian-vector product") from exc
    parts = nd.unflatten(v2, theta)
    live = [(g, Tensor(p)) for g, p in zip(gT, parts) if g.requires_grad]
    if live:
        contraction = nd.dot([g for g, _ in live], [p for _, p in live])
        v3 = [g.data for g in nd.grad(contraction, lam, allow_unused=True)]
    else:
        v3 = [np.zeros_like(p.data) for p in lam]
    if not all(np.all(np.isfinite(t)) for t in v3):
        raise HypergradientError("mixed partial d2L_T/dtheta dlambda")
    return [d - t for d, t in zip(direct, v3)]


def hypergradient(
    model: ComposedModel,
    train_batch: MiniBatch,
    mvalid_batch: MiniBatch,
    J: int,
    eta: float,
    rng=None,
) -> list:
    """Hypergradient of the mvalid loss w.r.t. the mixer at the current learner.

    Both losses are evaluated with dropout off so the second-order terms come
    from one deterministic objective.
    """
    def loss_t():
        return train_loss(model, train_batch, rng, train=False)

    def loss_v():
        return mvalid_loss(model, mvalid_batch)

    return implicit_hypergradient(loss_t, loss_v, model.theta(), model.lam(), J, eta)


def outer_step(model: ComposedModel, opt, hypergrad: Sequence[np.ndarray]) -> None:
    """One optimizer step on the mixer parameters; learner parameters untouched."""
    for g in hypergrad:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("outer", getattr(opt, "t", 0), "hypergradient")
    opt.step(list(hypergrad))


# ---------------------------------------------------------------- history


HISTORY_COLUMNS = ("round", "outer_iter", "inner_iter", "L_T", "L_V", "test_mse")


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, round_, outer, inner, L_T=None, L_V=None, test_mse=None):
        self.rows.append(
            {
                "round": round_,
                "outer_iter": outer,
                "inner_iter": inner,
                "L_T": L_T,
                "L_V": L_V,
                "test_mse": test_mse,
            }
        )

    @property
    def train_losses(self) -> list:
        return [r["L_T"] for r in self.rows if r["L_T"] is not None]

    @property
    def mvalid_losses(self) -> list:
        return [r["L_V"] for r in self.rows if r["L_V"] is not None]

    @property
    def test_mses(self) -> list:
        return [r["test_mse"] for r in self.rows if r["test_mse"] is not None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in HISTORY_COLUMNS})

    @classmethod
    def from_csv(cls, path) -> "History":
        h = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                h.rows.append(
                    {
                        k: (None if r[k] == "" else (int(r[k]) if k in HISTORY_COLUMNS[:3] else float(r[k])))
                        for k in HISTORY_COLUMNS
                    }
                )
        return h


def _evaluate(model, bundle, optimizers) -> float:
    for o in optimizers:
        o.eval()
    pred = model.predict(bundle.X_test)
    for o in optimizers:
        o.train()
    return float(np.mean((pred - bundle.y_test) ** 2))


# ---------------------------------------------------------------- trainers


def train_bilevel(
    model: ComposedModel,
    bundle: DataBundle,
    config: BilevelConfig,
    sampling: Sampling,
    rng: np.random.Generator,
    eval_every: int = 0,
):
    """Alternate ``inner_steps`` learner updates with one hypergradient mixer update.

    Runs ``outer_steps`` outer iterations per round for ``outer_rounds``
    rounds. Returns (model, History); on return the parameters hold the
    evaluation iterate of the optimizers.
    """
    if sampling.K < 1:
        raise ParameterError("bilevel training needs K >= 1 mvalid points")
    theta, lam = model.theta(), model.lam()
    if not lam:
        raise ParameterError("bilevel training needs a mixer with parameters")
    opt_t = make_optimizer(config.inner_optimizer, theta, config.lr_theta, config.weight_decay)
    opt_l = make_optimizer(config.outer_optimizer, lam, config.lr_lambda, config.weight_decay)
    theta0 = [p.data.copy() for p in theta]
    hist = History()
    step = 0
    for r in range(config.outer_rounds):
        for o in range(config.outer_steps):
            if not config.warm_start:
                for p, init in zip(theta, theta0):
                    p.data = init.copy()
                opt_t = make_optimizer(
                    config.inner_optimizer, theta, config.lr_theta, config.weight_decay
                )
            for i in range(config.inner_steps):
                batch = sample_batch(bundle, sampling.B, sampling.M, 0, sampling.mode, rng)
                loss = inner_step(model, opt_t, batch, rng, step)
                hist.add(r, o, i, L_T=loss)
                step += 1
            batch = sample_batch(bundle, sampling.B, sampling.M, sampling.K, sampling.mode, rng)
            with nd.no_grad():
                L_V = mvalid_loss(model, batch).item()
            if not math.isfinite(L_V):
                raise DivergenceError("outer", r * config.outer_steps + o, "L_V")
            hg = hypergradient(
                model, batch, batch, config.neumann_terms, config.neumann_scale, rng
            )
            outer_step(model, opt_l, hg)
            test = None
            if eval_every and (o + 1) % eval_every == 0:
                test = _evaluate(model, bundle, (opt_t, opt_l))
            hist.add(r, o, None, L_V=L_V, test_mse=test)
    opt_t.eval()
    opt_l.eval()
    return model, hist


def train_joint(
    model: ComposedModel,
    bundle: DataBundle,
    config: BilevelConfig,
    sampling: Sampling,
    rng: np.random.Generator,
    eval_every: int = 0,
):
    """Single optimizer over learner and mixer on L_T + L_V (L_V dropped when K = 0).

    Uses the same number of learner updates as ``train_bilevel``; learner and
    mixer keep their own learning rates.
    """
    theta, lam = model.theta(), model.lam()
    params = theta + lam
    lrs = [config.lr_theta] * len(theta) + [config.lr_lambda] * len(lam)
    opt = make_optimizer(config.inner_optimizer, params, lrs, config.weight_decay)
    hist = History()
    per_outer = config.inner_steps
    step = 0
    for r in range(config.outer_rounds):
        for o in range(config.outer_steps):
            for i in range(per_outer):
                batch = sample_batch(bundle, sampling.B, sampling.M, sampling.K, sampling.mode, rng)
                L_T = train_loss(model, batch, rng, train=True)
                L_V = mvalid_loss(model, batch)
                total = L_T if L_V is None else L_T + L_V
                if not _finite(total):
                    raise DivergenceError("joint", step)
                grads = nd.grad(total, params, allow_unused=True)
                opt.step([g.data for g in grads])
                test = None
                if eval_every and i == per_outer - 1 and (o + 1) % eval_every == 0:
                    test = _evaluate(model, bundle, (opt,))
                hist.add(r, o, i, L_T=L_T.item(), L_V=None if L_V is None else L_V.item(), test_mse=test)
                step += 1
    opt.eval()
    return model, hist
