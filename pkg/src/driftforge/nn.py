"""
Small dense-network engine with hand-written backward passes.

Every network in the package (classifier, generators, discriminators) is an
``MlpModel`` built from four layer kinds: dense, batchnorm, selu and dropout.
Batches are 2-D float64 arrays of shape (n_samples, n_features).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError, StaleTraceError

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
BN_EPS = 1e-8

LAYER_KINDS = ("dense", "batchnorm", "selu", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} layer must preserve dimension")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")

    @classmethod
    def dense(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls("dense", in_dim, out_dim)

    @classmethod
    def batchnorm(cls, dim: int, momentum: float = 0.9) -> "LayerSpec":
        return cls("batchnorm", dim, dim, bn_momentum=momentum)

    @classmethod
    def selu(cls, dim: int) -> "LayerSpec":
        return cls("selu", dim, dim)

    @classmethod
    def dropout(cls, dim: int, rate: float) -> "LayerSpec":
        return cls("dropout", dim, dim, dropout_rate=rate)


def mlp_layers(
    in_dim: int,
    hidden: Sequence[int],
    out_dim: int,
    *,
    batchnorm: bool = False,
    dropout: float = 0.0,
) -> list[LayerSpec]:
    """Dense stack where every hidden layer is followed by [batchnorm,] selu [, dropout]."""
    layers: list[LayerSpec] = []
    prev = in_dim
    for width in hidden:
        layers.append(LayerSpec.dense(prev, width))
        if batchnorm:
            layers.append(LayerSpec.batchnorm(width))
        layers.append(LayerSpec.selu(width))
        if dropout > 0:
            layers.append(LayerSpec.dropout(width, dropout))
        prev = width
    layers.append(LayerSpec.dense(prev, out_dim))
    return layers


class MlpModel:
    """Feedforward network with per-layer parameters and train/eval mode.

    ``params[i]`` holds the trainable arrays of layer ``i`` (``W``/``b`` for
    dense, ``gamma``/``beta`` for batchnorm, empty otherwise). ``buffers[i]``
    holds batchnorm running statistics.
    """

    def __init__(self, layers: Sequence[LayerSpec], seed: int | np.random.SeedSequence = 0):
        layers = list(layers)
        if not layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        init_seq, drop_seq = seed.spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self._dropout_rng = np.random.default_rng(drop_seq)
        self.params: list[dict[str, np.ndarray]] = []
        self.buffers: list[dict[str, np.ndarray]] = []
        for spec in layers:
            p: dict[str, np.ndarray] = {}
            buf: dict[str, np.ndarray] = {}
            if spec.kind == "dense":
                limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
                p["W"] = init_rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim))
                p["b"] = np.zeros(spec.out_dim)
            elif spec.kind == "batchnorm":
                p["gamma"] = np.ones(spec.in_dim)
                p["beta"] = np.zeros(spec.in_dim)
                buf["running_mean"] = np.zeros(spec.in_dim)
                buf["running_var"] = np.ones(spec.in_dim)
            self.params.append(p)
            self.buffers.append(buf)
        self.training = True
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def train(self) -> "MlpModel":
        self.training = True
        return self

    def eval(self) -> "MlpModel":
        self.training = False
        return self

    def touch(self) -> None:
        """Mark parameters as changed; outstanding traces become stale."""
        self.version += 1

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return forward(self, batch)[0]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Flat (name, array) view of parameters and buffers in a fixed order."""
        out = []
        for i, (p, buf) in enumerate(zip(self.params, self.buffers)):
            for name in sorted(p):
                out.append((f"{i}.{name}", p[name]))
            for name in sorted(buf):
                out.append((f"{i}.{name}", buf[name]))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in self.state_arrays():
            new = np.asarray(arrays[name], dtype=np.float64)
            if new.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {new.shape} vs {arr.shape}")
            arr[...] = new
        self.touch()

    def n_params(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def __repr__(self):
        kinds = ", ".join(f"{s.kind}({s.in_dim}->{s.out_dim})" if s.kind == "dense" else s.kind
                          for s in self.layers)
        return f"MlpModel([{kinds}], mode={'train' if self.training else 'eval'})"


@dataclass
class ForwardTrace:
    caches: list[dict[str, np.ndarray]]
    version: int
    training: bool
    masks: list[np.ndarray | None] = field(default_factory=list)


def _selu(x):
    neg = np.minimum(x, 0.0)
    np.expm1(neg, out=neg)
    neg *= SELU_SCALE * SELU_ALPHA
    out = np.maximum(x, 0.0)
    out *= SELU_SCALE
    out += neg
    return out


def _selu_grad(x, out):
    # on the negative side selu'(x) = scale*alpha*exp(x) = selu(x) + scale*alpha
    return np.where(x > 0, SELU_SCALE, out + SELU_SCALE * SELU_ALPHA)


def forward(
    model: MlpModel,
    batch: np.ndarray,
    replay: ForwardTrace | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on ``batch`` and keep what the backward pass needs.

    Passing ``replay`` reuses that trace's dropout masks and skips the
    batchnorm running-statistics update, so the call has no side effects.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"expected batch of shape (n, {model.in_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite values in network input")
    training = model.training
    caches: list[dict[str, np.ndarray]] = []
    masks: list[np.ndarray | None] = []
    for i, spec in enumerate(model.layers):
        p = model.params[i]
        cache: dict[str, np.ndarray] = {"x": x}
        mask = None
        if spec.kind == "dense":
            out = x @ p["W"] + p["b"]
        elif spec.kind == "batchnorm":
            buf = model.buffers[i]
            if training:
                mu = x.mean(axis=0)
                var = x.var(axis=0)
                if replay is None:
                    n = x.shape[0]
                    unbiased = var * n / (n - 1) if n > 1 else var
                    m = spec.bn_momentum
                    buf["running_mean"] *= m
                    buf["running_mean"] += (1 - m) * mu
                    buf["running_var"] *= m
                    buf["running_var"] += (1 - m) * unbiased
            else:
                mu = buf["running_mean"]
                var = buf["running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mu) * inv_std
            cache["xhat"] = xhat
            cache["inv_std"] = inv_std
            out = xhat * p["gamma"] + p["beta"]
        elif spec.kind == "selu":
            out = _selu(x)
            cache["out"] = out
        else:
            if training and spec.dropout_rate > 0:
                if replay is not None:
                    mask = replay.masks[i]
                else:
                    keep = model._dropout_rng.random(x.shape) >= spec.dropout_rate
                    mask = keep / (1.0 - spec.dropout_rate)
                out = x * mask
            else:
                out = x
        masks.append(mask)
        caches.append(cache)
        x = out
    return x, ForwardTrace(caches=caches, version=model.version, training=training, masks=masks)


def backward(
    model: MlpModel,
    trace: ForwardTrace,
    grad_out: np.ndarray,
) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter and the input batch."""
    if trace.version != model.version:
        raise StaleTraceError("model parameters changed since the forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    grads: list[dict[str, np.ndarray]] = [{} for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[i]
        cache = trace.caches[i]
        p = model.params[i]
        if spec.kind == "dense":
            grads[i]["W"] = cache["x"].T @ g
            grads[i]["b"] = g.sum(axis=0)
            g = g @ p["W"].T
        elif spec.kind == "batchnorm":
            xhat = cache["xhat"]
            grads[i]["gamma"] = (g * xhat).sum(axis=0)
            grads[i]["beta"] = g.sum(axis=0)
            dxhat = g * p["gamma"]
            if trace.training:
                n = g.shape[0]
                g = cache["inv_std"] / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                g = dxhat * cache["inv_std"]
        elif spec.kind == "selu":
            g = g * _selu_grad(cache["x"], cache["out"])
        else:
            mask = trace.masks[i]
            if mask is not None:
                g = g * mask
    return grads, g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
    reduction: str = "mean",
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its exact gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be a vector with one entry per row")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), labels] - log_norm
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    loss = -log_p.sum()
    if reduction == "mean":
        return float(loss / n), grad / n
    if reduction == "sum":
        return float(loss), grad
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class AdamState:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8
    step_count: int = 0
    first_moment: list[dict[str, np.ndarray]] = field(default_factory=list)
    second_moment: list[dict[str, np.ndarray]] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[dict[str, np.ndarray]], **kw) -> "AdamState":
        state = cls(**kw)
        state.first_moment = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        state.second_moment = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        return state


def adam_step(
    state: AdamState,
    params: list[dict[str, np.ndarray]],
    grads: list[dict[str, np.ndarray]],
) -> list[dict[str, np.ndarray]]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for gp in grads:
        for name, g in gp.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, gp, m1, m2 in zip(params, grads, state.first_moment, state.second_moment):
        for name, g in gp.items():
            if g.shape != p[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p[name].shape}")
            m = m1[name]
            v = m2[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon_stab)
    return params


class Adam:
    """Adam optimizer bound to one model."""

    def __init__(self, model: MlpModel, learning_rate: float = 0.01, **kw):
        self.model = model
        self.state = AdamState.for_params(model.params, learning_rate=learning_rate, **kw)

    def step(self, grads: list[dict[str, np.ndarray]]) -> None:
        adam_step(self.state, self.model.params, grads)
        self.model.touch()


def l1_logistic_select(
    X: np.ndarray,
    y: np.ndarray,
    l1_strength: float,
    k: int,
    n_iter: int = 500,
) -> np.ndarray:
    """Rank features by |weight| of an L1-penalised logistic regression.

    The model is fit with ISTA (proximal gradient, fixed step 1/L). The
    bias is not penalised. Returns the ``k`` indices with the largest
    absolute weight, ties broken by lower index.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}]")
    if np.all(y == y[0]):
        raise ValueError("labels contain a single class; selection is undefined")
    # Lipschitz constant of the mean logistic loss: ||[X 1]||_2^2 / (4n)
    Xb = np.hstack([X, np.ones((n, 1))])
    v = np.random.default_rng(0).standard_normal(d + 1)
    for _ in range(50):
        v = Xb.T @ (Xb @ v)
        v /= np.linalg.norm(v)
    sigma2 = float(np.linalg.norm(Xb @ v) ** 2)
    step = 4.0 * n / max(sigma2, 1e-12)
    w = np.zeros(d)
    b = 0.0
    for _ in range(n_iter):
        z = X @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        r = (p - y) / n
        w = w - step * (X.T @ r)
        b = b - step * r.sum()
        w = np.sign(w) * np.maximum(np.abs(w) - step * l1_strength, 0.0)
    order = np.lexsort((np.arange(d), -np.abs(w)))
    return order[:k]
