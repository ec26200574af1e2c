"""Uncertainty fusion: encode Laplace vertex parameters and cross-attend to them."""

from __future__ import annotations

import numpy as np

from .nn import (AttentionSpec, MlpSpec, ParamSet, ShapeError, cross_attention,
                 cross_attention_backward, mlp_backward, mlp_forward)


def encoder_spec(k: int, d_h: int, hidden_sizes: tuple[int, ...] = (64,)) -> MlpSpec:
    return MlpSpec((4 * k, *hidden_sizes, d_h))


def encode_uncertainty(spec: MlpSpec, params: ParamSet, elements, prefix: str = "uncer_enc"):
    """Encode (..., M, K, 4) vertex parameters into (..., M, d_h) uncertainty features.

    ``elements`` is a (..., M, K, 4) array or a sequence of per-element
    VertexParamSets (which must share K). Each element's parameters are
    flattened in vertex order, ``(mu_x, b_x, mu_y, b_y)`` per vertex.
    """
    if not isinstance(elements, np.ndarray):
        ks = {e.params.shape for e in elements}
        if len(ks) > 1:
            raise ShapeError(f"elements have heterogeneous vertex counts: {sorted(ks)}")
        elements = np.stack([e.params for e in elements]) if elements else np.zeros((0, 0, 4))
    v = np.asarray(elements, dtype=np.float64)
    flat = v.reshape(*v.shape[:-2], v.shape[-2] * v.shape[-1])
    out, cache = mlp_forward(spec, params, flat, prefix)
    return out, (cache, v.shape)


def encode_uncertainty_backward(cache, upstream) -> np.ndarray:
    mlp_cache, shape = cache
    return mlp_backward(mlp_cache, upstream).reshape(shape)


def fuse(spec: AttentionSpec, params: ParamSet, q, e, *, residual: bool = False, prefix: str = "attn"):
    """Uncertainty-aware queries ``Attention(q, e, e)`` (plus ``q`` in residual mode)."""
    q = np.asarray(q, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if q.shape[-1] != e.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != uncertainty feature width {e.shape[-1]}")
    out, cache = cross_attention(spec, params, q, e, prefix)
    if residual:
        out = out + q
    return out, (cache, residual)


def fuse_backward(cache, upstream):
    """Returns ``(d_q, d_e)``."""
    attn_cache, residual = cache
    d_q, d_e = cross_attention_backward(attn_cache, upstream)
    if residual:
        d_q = d_q + upstream
    return d_q, d_e
