"""Dense numeric core: activations, parameters, MLP and cross-attention layers.

Every layer has an explicit forward pass returning ``(output, cache)`` and a
hand-written backward pass that consumes the cache exactly once. Arrays are
float64 numpy arrays; layers accept any number of leading batch dimensions.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    pass


class CacheReuseError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# activations


def softplus(x, epsilon: float = 0.0):
    """Overflow-safe ``ln(1 + e^x) + epsilon``; the result never drops below epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) + epsilon
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    """Logistic function, clamped to the open interval (0, 1).

    For |x| beyond ~37 the exact value rounds to 0 or 1 in float64; the clamp
    keeps gate values strictly inside (0, 1).
    """
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _TINY, _ONE_MINUS)
    return float(s) if s.ndim == 0 else s


def softmax(v, axis: int = -1):
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def softmax_backward(p, dp, axis: int = -1):
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(f"{self.name}: parameters are 2-D matrices, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class ParamSet:
    """Ordered collection of named parameters (declaration order is preserved)."""

    def __init__(self, params: Iterable[Param] = ()):
        self._params: OrderedDict[str, Param] = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, p: Param) -> Param:
        if p.name in self._params:
            raise KeyError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def new(self, name: str, value) -> Param:
        return self.add(Param(name, value))

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def with_prefix(self, prefix: str) -> list[Param]:
        return [p for p in self if p.name.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(p.size for p in self if p.name.startswith(prefix))

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def copy(self) -> "ParamSet":
        return ParamSet(Param(p.name, p.value.copy()) for p in self)


# --------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if self.hidden_activation != "relu" or self.output_activation != "identity":
            raise ValueError("only relu hidden / identity output activations are supported")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def param_count(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


def init_mlp(params: ParamSet, prefix: str, spec: MlpSpec, rng: np.random.Generator | None,
             *, zero: bool = False, first_layer_scale: float = 1.0, last_layer_gain: float = 1.0) -> None:
    """Register ``{prefix}.{i}.weight`` (in x out) and ``{prefix}.{i}.bias`` (1 x out).

    He-normal weights for layers feeding a ReLU, Glorot-like for the output layer.
    ``zero=True`` gives all-zero weights and biases.
    """
    sizes = spec.layer_sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            last = i == spec.n_layers - 1
            std = math.sqrt((1.0 if last else 2.0) / fan_in)
            if last:
                std *= last_layer_gain
            if i == 0:
                std *= first_layer_scale
            w = rng.standard_normal((fan_in, fan_out)) * std
        params.new(f"{prefix}.{i}.weight", w)
        params.new(f"{prefix}.{i}.bias", np.zeros((1, fan_out)))


class _Cache:
    __slots__ = ("consumed",)

    def __init__(self):
        self.consumed = False

    def consume(self) -> None:
        if self.consumed:
            raise CacheReuseError("backward called twice with the same forward cache")
        self.consumed = True


class MlpCache(_Cache):
    __slots__ = ("weights", "biases", "inputs", "pre")

    def __init__(self, weights, biases, inputs, pre):
        super().__init__()
        self.weights = weights
        self.biases = biases
        self.inputs = inputs
        self.pre = pre


def mlp_forward(spec: MlpSpec, params: ParamSet, x: np.ndarray, prefix: str = "mlp"):
    x = np.asarray(x, dtype=np.float64)
    weights = [params[f"{prefix}.{i}.weight"] for i in range(spec.n_layers)]
    biases = [params[f"{prefix}.{i}.bias"] for i in range(spec.n_layers)]
    inputs, pre = [], []
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        if h.shape[-1] != w.value.shape[0]:
            raise ShapeError(
                f"{prefix} layer {i}: input has {h.shape[-1]} columns, weight expects {w.value.shape[0]}")
        inputs.append(h)
        z = h @ w.value + b.value[0]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < spec.n_layers - 1 else z
    return h, MlpCache(weights, biases, inputs, pre)


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def mlp_backward(cache: MlpCache, upstream: np.ndarray, *, input_grad: bool = True) -> np.ndarray | None:
    """Accumulate parameter gradients (``+=``) and return the input gradient.

    ``input_grad=False`` skips the last product and returns None (network inputs
    that are data, not activations).
    """
    cache.consume()
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.pre[-1].shape}")
    n = len(cache.weights)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (cache.pre[i] > 0.0)  # relu'(0) = 0
        w, b = cache.weights[i], cache.biases[i]
        w.grad += _flat2(cache.inputs[i]).T @ _flat2(g)
        b.grad += _flat2(g).sum(axis=0, keepdims=True)
        if i or input_grad:
            g = g @ w.value.T
    return g if input_grad else None


# --------------------------------------------------------------------------
# multi-head cross-attention


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int = 64
    n_heads: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        return 4 * self.d_model * self.d_model


ATTN_KEYS = ("wq", "wk", "wv", "wo")


def init_attention(params: ParamSet, prefix: str, spec: AttentionSpec, rng: np.random.Generator | None,
                   *, identity: bool = False, zero_output: bool = False) -> None:
    d = spec.d_model
    for key in ATTN_KEYS:
        if identity:
            w = np.eye(d)
        else:
            w = rng.standard_normal((d, d)) / math.sqrt(d)
        if key == "wo" and zero_output:
            w = np.zeros((d, d))
        params.new(f"{prefix}.{key}", w)


class AttentionCache(_Cache):
    __slots__ = ("spec", "w", "q", "kv", "qh", "kh", "vh", "attn", "heads")

    def __init__(self, **kw):
        super().__init__()
        for k, v in kw.items():
            setattr(self, k, v)


def _split(x: np.ndarray, spec: AttentionSpec) -> np.ndarray:
    # (..., M, d) -> (..., H, M, hd)
    return np.swapaxes(x.reshape(*x.shape[:-1], spec.n_heads, spec.head_dim), -2, -3)


def _merge(x: np.ndarray) -> np.ndarray:
    # (..., H, M, hd) -> (..., M, d)
    x = np.swapaxes(x, -2, -3)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def cross_attention(spec: AttentionSpec, params: ParamSet, queries: np.ndarray, keys_values: np.ndarray,
                    prefix: str = "attn"):
    """Scaled dot-product multi-head attention of ``queries`` over ``keys_values``.

    queries: (..., M_q, d); keys_values: (..., M_k, d). Returns (..., M_q, d) and a cache.
    """
    q = np.asarray(queries, dtype=np.float64)
    kv = np.asarray(keys_values, dtype=np.float64)
    d = spec.d_model
    if q.shape[-1] != d or kv.shape[-1] != d:
        raise ShapeError(f"attention expects {d} columns, got queries {q.shape} and keys/values {kv.shape}")
    if kv.shape[-2] == 0:
        raise ShapeError("cross-attention needs at least one key/value row")
    if q.shape[:-2] != kv.shape[:-2]:
        raise ShapeError(f"batch dims differ: {q.shape[:-2]} vs {kv.shape[:-2]}")
    w = {k: params[f"{prefix}.{k}"] for k in ATTN_KEYS}
    qh = _split(q @ w["wq"].value, spec)
    kh = _split(kv @ w["wk"].value, spec)
    vh = _split(kv @ w["wv"].value, spec)
    scores = (qh @ np.swapaxes(kh, -1, -2)) / math.sqrt(spec.head_dim)
    attn = softmax(scores, axis=-1)
    heads = _merge(attn @ vh)
    out = heads @ w["wo"].value
    cache = AttentionCache(spec=spec, w=w, q=q, kv=kv, qh=qh, kh=kh, vh=vh, attn=attn, heads=heads)
    return out, cache


def cross_attention_backward(cache: AttentionCache, upstream: np.ndarray):
    """Returns ``(d_queries, d_keys_values)``; projection gradients are accumulated."""
    cache.consume()
    spec, w = cache.spec, cache.w
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.heads.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.heads.shape}")
    w["wo"].grad += _flat2(cache.heads).T @ _flat2(g)
    d_heads = _split(g @ w["wo"].value.T, spec)
    d_attn = d_heads @ np.swapaxes(cache.vh, -1, -2)
    d_vh = np.swapaxes(cache.attn, -1, -2) @ d_heads
    d_scores = softmax_backward(cache.attn, d_attn) / math.sqrt(spec.head_dim)
    d_qh = d_scores @ cache.kh
    d_kh = np.swapaxes(d_scores, -1, -2) @ cache.qh
    d_qp, d_kp, d_vp = _merge(d_qh), _merge(d_kh), _merge(d_vh)
    w["wq"].grad += _flat2(cache.q).T @ _flat2(d_qp)
    w["wk"].grad += _flat2(cache.kv).T @ _flat2(d_kp)
    w["wv"].grad += _flat2(cache.kv).T @ _flat2(d_vp)
    d_q = d_qp @ w["wq"].value.T
    d_kv = d_kp @ w["wk"].value.T + d_vp @ w["wv"].value.T
    return d_q, d_kv


# --------------------------------------------------------------------------
# affine layer (f_attn and the gate projections)


def linear_forward(params: ParamSet, prefix: str, x: np.ndarray):
    w, b = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
    if x.shape[-1] != w.value.shape[0]:
        raise ShapeError(f"{prefix}: input has {x.shape[-1]} columns, weight expects {w.value.shape[0]}")
    return x @ w.value + b.value[0], (w, b, x)


def linear_backward(cache, upstream: np.ndarray) -> np.ndarray:
    w, b, x = cache
    w.grad += _flat2(x).T @ _flat2(upstream)
    b.grad += _flat2(upstream).sum(axis=0, keepdims=True)
    return upstream @ w.value.T


def init_linear(params: ParamSet, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator | None = None, *, zero: bool = False) -> None:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
    params.new(f"{prefix}.weight", w)
    params.new(f"{prefix}.bias", np.zeros((1, fan_out)))


# --------------------------------------------------------------------------
# optimisation and gradient checking


def sgd_step(params: Iterable[Param], learning_rate: float, momentum: float) -> None:
    """Heavy-ball SGD: ``v = momentum*v + grad; value -= lr*v``; grads reset to zero."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        p.value -= learning_rate * p.velocity
        p.grad[...] = 0.0


def finite_diff_grad(f: Callable[[], float], arrays: Iterable[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each array (perturbed in place)."""
    if h <= 0:
        raise ValueError("h must be > 0")
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        if not np.shares_memory(flat, a):
            raise ValueError("finite_diff_grad needs contiguous arrays it can perturb in place")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, rel_floor: float = 1e-3) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, rel_floor * max_j(|a_j|, |n_j|)).

    Entries three orders of magnitude below the largest one are judged against
    that floor: central differences cannot resolve them below roundoff.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    mag = np.maximum(np.abs(a), np.abs(n))
    denom = np.maximum(mag, max(rel_floor * float(mag.max()), 1e-12))
    return float(np.max(np.abs(a - n) / denom))
