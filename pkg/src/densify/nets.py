"""Task learner, set mixers and the composed densification model.

Layer convention: the learner has ``n_layers`` linear maps. The mixer sits in
front of layer ``l_mix`` (1-based), so with ``l_mix=1`` the anchor and its
context are mixed in input space and with ``l_mix=2`` after one hidden layer.
The mixer preserves width, so every learner layer is used on both the training
path and the singleton test path.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .errors import DimensionError, ParameterError
from .ndtensor import Tensor

MIXER_KINDS = ("deepsets", "settransformer", "linear", "none")
REDUCE_KINDS = ("mean", "sum", "max")


class Linear:
    """x @ W + b. Default init is U(+-1/sqrt(fan_in)) for W and b; ``he=True``
    uses U(+-sqrt(6/fan_in)) weights and zero bias, which keeps activation
    scale through stacks of ReLU layers that train slowly or not at all."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, he: bool = False):
        if he:
            bound = np.sqrt(6.0 / fan_in)
            self.W = Tensor.param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.b = Tensor.param(np.zeros(fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            self.W = Tensor.param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.b = Tensor.param(rng.uniform(-bound, bound, size=(fan_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def named_parameters(self, prefix: str):
        return [(prefix + ".W", self.W), (prefix + ".b", self.b)]


class TaskLearner:
    """ReLU MLP: in_dim -> hidden -> ... -> hidden -> 1, dropout after each hidden layer."""

    def __init__(
        self,
        in_dim: int,
        hidden: int = 64,
        n_layers: int = 3,
        dropout: float = 0.5,
        rng: np.random.Generator | None = None,
    ):
        if n_layers < 2:
            raise ParameterError("the learner needs at least two layers")
        if not 0.0 <= dropout < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {dropout}")
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim] + [hidden] * (n_layers - 1) + [1]
        self.in_dim = in_dim
        self.hidden = hidden
        self.dropout = dropout
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def block(self, index: int, h: Tensor, rng, train: bool) -> Tensor:
        """Apply layer ``index`` (0-based); hidden layers add ReLU and dropout."""
        h = self.layers[index](h)
        if index < self.n_layers - 1:
            h = nd.dropout(nd.relu(h), self.dropout, rng, train)
        return h

    def forward(self, x: Tensor, rng=None, train: bool = False):
        """Plain MLP forward; returns (prediction [B], penultimate features)."""
        h = x
        for i in range(self.n_layers - 1):
            h = self.block(i, h, rng, train)
        pred = self.layers[-1](h)
        return nd.reshape(pred, (pred.shape[0],)), h

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"theta.{i}")
        return out


def _set_of(x: Tensor, C: Tensor | None) -> Tensor:
    if C is None or C.shape[1] == 0:
        return x
    return nd.concat([x, C], axis=1)


class SetMixer:
    """Base class. Maps an anchor [B,1,W] and context [B,m,W] to [B,1,W]."""

    width: int

    def __call__(self, x: Tensor, C: Tensor | None, rng=None, train: bool = False) -> Tensor:
        raise NotImplementedError

    def named_parameters(self):
        return []

    def _check(self, x, C):
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.width:
            raise DimensionError(f"mixer of width {self.width} got anchor {x.shape}")
        if C is not None and (C.ndim != 3 or C.shape[0] != x.shape[0] or C.shape[2] != x.shape[2]):
            raise DimensionError(f"anchor {x.shape} and context {C.shape} disagree")


class DeepSetsMixer(SetMixer):
    """rho(sum_j phi(s_j)) over the set {x} U C."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.width = width
        self.phi = [Linear(width, hidden, rng, he=True), Linear(hidden, hidden, rng, he=True)]
        self.rho = [Linear(hidden, hidden, rng, he=True), Linear(hidden, width, rng, he=True)]

    def encode(self, s: Tensor) -> Tensor:
        return self.phi[1](nd.relu(self.phi[0](s)))

    def decode(self, pooled: Tensor) -> Tensor:
        return self.rho[1](nd.relu(self.rho[0](pooled)))

    def __call__(self, x, C, rng=None, train=False):
        self._check(x, C)
        pooled = nd.sum_(self.encode(_set_of(x, C)), axis=1, keepdims=True)
        return self.decode(pooled)

    def named_parameters(self):
        return (
            self.phi[0].named_parameters("lambda.phi.0")
            + self.phi[1].named_parameters("lambda.phi.1")
            + self.rho[0].named_parameters("lambda.rho.0")
            + self.rho[1].named_parameters("lambda.rho.1")
        )


class _MAB:
    """Multi-head attention block: O = Q' + softmax(Q'K'^T/sqrt(d))V'; O + relu(O W + b)."""

    def __init__(self, width: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.o = Linear(width, width, rng)

    def _split(self, t: Tensor) -> Tensor:
        B, n, w = t.shape
        return nd.transpose(nd.reshape(t, (B, n, self.heads, w // self.heads)), (0, 2, 1, 3))

    def _merge(self, t: Tensor) -> Tensor:
        B, h, n, d = t.shape
        return nd.reshape(nd.transpose(t, (0, 2, 1, 3)), (B, n, h * d))

    def __call__(self, Q: Tensor, K: Tensor) -> Tensor:
        q, k, v = self._split(self.q(Q)), self._split(self.k(K)), self._split(self.v(K))
        scale = 1.0 / np.sqrt(q.shape[-1])
        att = nd.softmax(nd.matmul(q, nd.swap_last(k)) * scale, axis=-1)
        out = self._merge(q + nd.matmul(att, v))
        return out + nd.relu(self.o(out))

    def named_parameters(self, prefix):
        out = []
        for name in ("q", "k", "v", "o"):
            out += getattr(self, name).named_parameters(f"{prefix}.{name}")
        return out


class SetTransformerMixer(SetMixer):
    """One self-attention block, attention pooling onto a single seed, linear head."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if heads < 1 or width % heads:
            raise ParameterError(f"{heads} heads do not divide width {width}")
        self.width = width
        self.sab = _MAB(width, heads, rng)
        self.pma = _MAB(width, heads, rng)
        bound = 1.0 / np.sqrt(width)
        self.seed = Tensor.param(rng.uniform(-bound, bound, size=(1, 1, width)))
        self.head = Linear(width, width, rng)

    def __call__(self, x, C, rng=None, train=False):
        self._check(x, C)
        s = _set_of(x, C)
        enc = self.sab(s, s)
        seed = nd.broadcast_to(self.seed, (x.shape[0], 1, self.width))
        return self.head(self.pma(seed, enc))

    def named_parameters(self):
        return (
            self.sab.named_parameters("lambda.sab")
            + self.pma.named_parameters("lambda.pma")
            + [("lambda.seed", self.seed)]
            + self.head.named_parameters("lambda.head")
        )


class LinearReduceMixer(SetMixer):
    """Mixup-style interpolation of the anchor with each context element, then a set reduction.

    Output is reduce_j(alpha*x + (1-alpha)*c_j) with alpha ~ U(0, 1) per batch
    row. Because x is common to every element and alpha is in [0, 1], this
    equals alpha*x + (1-alpha)*reduce(C) for mean and max (and m*alpha*x +
    (1-alpha)*sum(C) for sum); that form is used so the alpha endpoints are exact.
    With no context the set is {x} and the output is x.

    ``learnable=True`` appends an identity-initialised linear map, giving the
    mixer parameters an outer loop can tune.
    """

    def __init__(self, width: int, reduce: str = "max", learnable: bool = False, rng=None):
        if reduce not in REDUCE_KINDS:
            raise ParameterError(f"unknown reduction {reduce!r}")
        self.width = width
        self.reduce = reduce
        self.learnable = learnable
        self.fixed_alpha: float | None = None
        self.proj = None
        if learnable:
            self.proj = Linear(width, width, rng or np.random.default_rng(0))
            self.proj.W.data = np.eye(width)
            self.proj.b.data = np.zeros(width)

    def draw_alpha(self, batch: int, rng) -> np.ndarray:
        if self.fixed_alpha is not None:
            return np.full((batch, 1, 1), float(self.fixed_alpha))
        if rng is None:
            raise ParameterError("linear mixing with context needs an rng for alpha")
        return rng.uniform(0.0, 1.0, size=(batch, 1, 1))

    def __call__(self, x, C, rng=None, train=False):
        self._check(x, C)
        if C is None or C.shape[1] == 0:
            out = x
        else:
            alpha = self.draw_alpha(x.shape[0], rng)
            pooled = nd.reduce(C, axis=1, kind=self.reduce, keepdims=True)
            a = alpha * C.shape[1] if self.reduce == "sum" else alpha
            out = x * Tensor(a) + pooled * Tensor(1.0 - alpha)
        return self.proj(out) if self.proj is not None else out

    def named_parameters(self):
        return self.proj.named_parameters("lambda.proj") if self.proj is not None else []


class ComposedModel:
    """Learner layers before ``l_mix``, then the mixer, then the remaining layers."""

    def __init__(self, learner: TaskLearner, mixer: SetMixer | None, l_mix: int = 2):
        if not 1 <= l_mix <= learner.n_layers - 1:
            raise ParameterError(f"l_mix must be in 1..{learner.n_layers - 1}, got {l_mix}")
        width = learner.in_dim if l_mix == 1 else learner.hidden
        if mixer is not None and mixer.width != width:
            raise DimensionError(f"mixer width {mixer.width} but layer {l_mix} takes {width}")
        self.learner = learner
        self.mixer = mixer
        self.l_mix = l_mix

    def theta(self) -> list:
        return [p for _, p in self.learner.named_parameters()]

    def lam(self) -> list:
        return [p for _, p in self.mixer.named_parameters()] if self.mixer is not None else []

    def named_parameters(self):
        mixer = self.mixer.named_parameters() if self.mixer is not None else []
        return self.learner.named_parameters() + mixer

    def forward_train(self, x, C=None, rng=None, train: bool = True):
        """Mixed forward pass. Returns (pred [B], penultimate z [B,1,H])."""
        x = nd.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.learner.in_dim:
            raise DimensionError(f"anchors must be [B,1,{self.learner.in_dim}], got {x.shape}")
        if C is not None:
            C = nd.as_tensor(C)
            if C.ndim != 3 or C.shape[0] != x.shape[0] or C.shape[2] != x.shape[2]:
                raise DimensionError(f"context {C.shape} does not match anchors {x.shape}")
            if C.shape[1] == 0:
                C = None
        h = x
        for i in range(self.l_mix - 1):
            h = self.learner.block(i, h, rng, train)
            if C is not None:
                C = self.learner.block(i, C, rng, train)
        if self.mixer is not None:
            h = self.mixer(h, C, rng, train)
        for i in range(self.l_mix - 1, self.learner.n_layers - 1):
            h = self.learner.block(i, h, rng, train)
        pred = self.learner.layers[-1](h)
        return nd.reshape(pred, (pred.shape[0],)), h

    def forward_test(self, x):
        """Singleton path: no context, dropout off."""
        return self.forward_train(x, None, rng=None, train=False)

    def predict(self, X: np.ndarray) -> np.ndarray:
        with nd.no_grad():
            pred, _ = self.forward_test(Tensor(np.asarray(X)[:, None, :]))
        return pred.data.copy()

    def embed(self, X: np.ndarray, C: np.ndarray | None = None, rng=None) -> np.ndarray:
        """Penultimate features in eval mode, optionally mixed with context [B,m,D]."""
        with nd.no_grad():
            _, z = self.forward_train(Tensor(np.asarray(X)[:, None, :]), C, rng=rng, train=False)
        return z.data[:, 0, :].copy()


def build_model(
    in_dim: int,
    mixer: str = "deepsets",
    hidden: int = 64,
    n_layers: int = 3,
    dropout: float = 0.5,
    l_mix: int = 2,
    reduce: str = "max",
    learnable_linear: bool = False,
    heads: int = 4,
    rng: np.random.Generator | None = None,
) -> ComposedModel:
    if mixer not in MIXER_KINDS:
        raise ParameterError(f"unknown mixer {mixer!r}; expected one of {MIXER_KINDS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    learner = TaskLearner(in_dim, hidden, n_layers, dropout, rng)
    width = in_dim if l_mix == 1 else hidden
    if mixer == "deepsets":
        mix = DeepSetsMixer(width, hidden, rng)
    elif mixer == "settransformer":
        mix = SetTransformerMixer(width, heads, rng)
    elif mixer == "linear":
        mix = LinearReduceMixer(width, reduce, learnable_linear, rng)
    else:
        mix = None
    return ComposedModel(learner, mix, l_mix)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DNSCKPT1"


def save_checkpoint(model: ComposedModel, path) -> None:
    """JSON header (names, shapes, offsets) followed by little-endian float64 payload."""
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"dtype": "float64", "params": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    payload = raw[16 + hlen :]
    out = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=int))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out


def load_checkpoint(model: ComposedModel, path) -> None:
    arrays = read_checkpoint(path)
    named = dict(model.named_parameters())
    if set(arrays) != set(named):
        raise DimensionError(f"checkpoint names {sorted(set(arrays) ^ set(named))} do not match model")
    for name, p in named.items():
        if arrays[name].shape != p.shape:
            raise DimensionError(f"{name}: checkpoint {arrays[name].shape} vs model {p.shape}")
        p.data = arrays[name]
