"""Laplace vertex regression: probabilistic head, l1/NLL losses and distribution utilities.

Vertex parameters are stored as arrays of shape ``(..., K, 4)`` with columns
``(mu_x, b_x, mu_y, b_y)``. Scales come from ``softplus(raw) + eps`` and are
therefore never below ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MlpSpec, ParamSet, ShapeError, init_mlp, mlp_backward, mlp_forward, sigmoid, softplus

EPS = 1e-6
MU_COLS = (0, 2)
B_COLS = (1, 3)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w1: float  # l1 on locations
    w2: float  # Laplace NLL

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or not self.w1 + self.w2 > 0:
            raise ValueError(f"loss weights must be >= 0 with a positive sum, got ({self.w1}, {self.w2})")


DYNAMIC_WEIGHTS = LossWeights(0.25, 0.6)
STATIC_WEIGHTS = LossWeights(0.0, 1.0)
DETERMINISTIC_WEIGHTS = LossWeights(1.0, 0.0)


@dataclass(frozen=True)
class HeadConfig:
    d_h: int
    k: int
    hidden_sizes: tuple[int, ...] = (128,)
    epsilon: float = EPS
    probabilistic: bool = True

    @property
    def out_width(self) -> int:
        return (4 if self.probabilistic else 2) * self.k

    @property
    def mlp(self) -> MlpSpec:
        return MlpSpec((self.d_h, *self.hidden_sizes, self.out_width))


@dataclass
class VertexParamSet:
    """Laplace parameters for K vertices (leading batch dims allowed)."""

    params: np.ndarray  # (..., K, 4)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim < 2 or self.params.shape[-1] != 4:
            raise ShapeError(f"vertex parameters must be (..., K, 4), got {self.params.shape}")

    @property
    def k(self) -> int:
        return self.params.shape[-2]

    @property
    def mu(self) -> np.ndarray:
        return self.params[..., MU_COLS]

    @property
    def b(self) -> np.ndarray:
        return self.params[..., B_COLS]

    @classmethod
    def from_mu_b(cls, mu, b) -> "VertexParamSet":
        mu, b = np.asarray(mu, dtype=np.float64), np.asarray(b, dtype=np.float64)
        out = np.empty(mu.shape[:-1] + (4,))
        out[..., MU_COLS] = mu
        out[..., B_COLS] = b
        return cls(out)


def init_head(params: ParamSet, prefix: str, cfg: HeadConfig, rng, *, zero: bool = False) -> None:
    init_mlp(params, prefix, cfg.mlp, rng, zero=zero)


@dataclass
class HeadCache:
    cfg: HeadConfig
    mlp_cache: object
    raw: np.ndarray = field(repr=False)


def head_forward(cfg: HeadConfig, params: ParamSet, query: np.ndarray, prefix: str = "head"):
    """Map queries (..., d_h) to vertex parameters.

    Probabilistic heads return a ``VertexParamSet`` of shape (..., K, 4); a
    deterministic head (``probabilistic=False``) returns locations (..., K, 2).
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != cfg.d_h:
        raise ShapeError(f"query has {query.shape[-1]} features, head expects d_h={cfg.d_h}")
    raw, mc = mlp_forward(cfg.mlp, params, query, prefix)
    cache = HeadCache(cfg, mc, raw)
    if not cfg.probabilistic:
        return raw.reshape(*raw.shape[:-1], cfg.k, 2), cache
    raw4 = raw.reshape(*raw.shape[:-1], cfg.k, 4)
    out = raw4.copy()
    out[..., B_COLS] = softplus(raw4[..., B_COLS], cfg.epsilon)
    return VertexParamSet(out), cache


def head_backward(cache: HeadCache, upstream: np.ndarray) -> np.ndarray:
    """``upstream`` is the gradient w.r.t. the head output ((..., K, 4) or (..., K, 2))."""
    cfg = cache.cfg
    g = np.asarray(upstream, dtype=np.float64)
    if cfg.probabilistic:
        raw4 = cache.raw.reshape(*cache.raw.shape[:-1], cfg.k, 4)
        g = g.copy()
        g[..., B_COLS] *= sigmoid(raw4[..., B_COLS])  # softplus' = sigmoid
    return mlp_backward(cache.mlp_cache, g.reshape(cache.raw.shape))


# --------------------------------------------------------------------------
# losses


def laplace_nll(x, mu, b, epsilon: float = EPS):
    """``ln(2b) + |x - mu| / b`` elementwise."""
    x, mu, b = (np.asarray(a, dtype=np.float64) for a in (x, mu, b))
    if np.any(b < epsilon * (1.0 - 1e-12)):
        raise ContractError(f"Laplace scale below the floor {epsilon}: min b = {np.min(b)}")
    out = np.log(2.0 * b) + np.abs(x - mu) / b
    return float(out) if out.ndim == 0 else out


def laplace_nll_grad(x, mu, b):
    """Partial derivatives ``(d/dmu, d/db)`` of the NLL; sgn(0) = 0."""
    x, mu, b = (np.asarray(a, dtype=np.float64) for a in (x, mu, b))
    r = x - mu
    return -np.sign(r) / b, 1.0 / b - np.abs(r) / (b * b)


def _check_target(pred_shape, target):
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred_shape:
        raise ShapeError(f"prediction {pred_shape} and target {target.shape} vertex shapes differ")
    return target


def combined_loss(pred: VertexParamSet, target, w: LossWeights, *, with_grad: bool = False):
    """``w1 * mean|mu - t| + w2 * mean NLL(t | mu, b)``, mean over every vertex axis.

    Leading dims are averaged too (one element per leading index). With
    ``with_grad`` returns ``(loss, d_loss/d_params)`` where the gradient has the
    ``(..., K, 4)`` layout of ``pred.params``.
    """
    mu, b = pred.mu, pred.b
    t = _check_target(mu.shape, target)
    n = mu.size
    if n == 0:
        return (0.0, np.zeros_like(pred.params)) if with_grad else 0.0
    r = mu - t
    loss = 0.0
    if w.w1:
        loss += w.w1 * float(np.sum(np.abs(r))) / n
    if w.w2:
        loss += w.w2 * float(np.sum(laplace_nll(t, mu, b))) / n
    if not with_grad:
        return loss
    g_mu = np.zeros_like(mu)
    g_b = np.zeros_like(b)
    if w.w1:
        g_mu += w.w1 * np.sign(r) / n
    if w.w2:
        d_mu, d_b = laplace_nll_grad(t, mu, b)
        g_mu += w.w2 * d_mu / n
        g_b += w.w2 * d_b / n
    grad = np.empty_like(pred.params)
    grad[..., MU_COLS] = g_mu
    grad[..., B_COLS] = g_b
    return loss, grad


def l1_loss(mu, target, *, weight: float = 1.0, with_grad: bool = False):
    """Mean absolute error for deterministic heads and the planner."""
    mu = np.asarray(mu, dtype=np.float64)
    t = _check_target(mu.shape, target)
    n = mu.size
    if n == 0:
        return (0.0, np.zeros_like(mu)) if with_grad else 0.0
    r = mu - t
    loss = weight * float(np.sum(np.abs(r))) / n
    if not with_grad:
        return loss
    return loss, weight * np.sign(r) / n


# --------------------------------------------------------------------------
# distribution utilities


def laplace_sample(mu, b, u):
    """Inverse-CDF draw from Laplace(mu, b) given ``u`` uniform on (-0.5, 0.5)."""
    mu, b, u = (np.asarray(a, dtype=np.float64) for a in (mu, b, u))
    if np.any(b < 0):
        raise ContractError("Laplace scale must be >= 0")
    out = mu - b * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return float(out) if out.ndim == 0 else out


def coverage_radius(b, p: float):
    """Half-width t with P(|X - mu| <= t) = p, i.e. ``-b ln(1 - p)``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"coverage probability must lie in (0, 1), got {p}")
    out = -np.asarray(b, dtype=np.float64) * np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def empirical_coverage(residual, b, p: float) -> float:
    """Fraction of |residual| within ``coverage_radius(b, p)`` (closed interval)."""
    residual = np.abs(np.asarray(residual, dtype=np.float64))
    if residual.size == 0:
        raise ValueError("no residuals")
    return float(np.mean(residual <= coverage_radius(b, p)))
