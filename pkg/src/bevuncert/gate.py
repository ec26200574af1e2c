"""Uncertainty-aware gating of historical inputs.

The uncertainty-aware queries are pooled into one context vector by a learned
attention score; a sigmoid projection of that context then scales either each
history time step (temporal mode, shape T) or each ego-status entry (ego mode,
shape L x T).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ParamSet, ShapeError, linear_backward, linear_forward, sigmoid, softmax, softmax_backward

EGO_FEATURES = ("cmd_left", "cmd_straight", "cmd_right", "cmd_na", "vx", "vy", "ax", "ay")
HISTORY_STEPS = 4


def time_labels(t: int) -> list[str]:
    return ["t"] + [f"t-{i}" for i in range(1, t)]


@dataclass
class GateSignal:
    mode: str  # "temporal" | "ego"
    values: np.ndarray  # (T,) or (L, T)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        want = 1 if self.mode == "temporal" else 2 if self.mode == "ego" else None
        if want is None:
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if self.values.ndim != want:
            raise ShapeError(f"{self.mode} gate must be {want}-D, got shape {self.values.shape}")
        if not np.all((self.values > 0.0) & (self.values < 1.0)):
            raise ValueError("gate values must lie strictly inside (0, 1)")


def pool_context(params: ParamSet, q, prefix: str = "gate.attn"):
    """``c = sum_i softmax(f_attn(q))_i q_i`` over rows of q (..., N, d_h).

    Returns ``(c, alpha, cache)``.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-2] == 0:
        raise ShapeError("pool_context needs at least one query row")
    scores, lin_cache = linear_forward(params, prefix, q)
    alpha = softmax(scores[..., 0], axis=-1)
    c = np.einsum("...n,...nd->...d", alpha, q)
    return c, alpha, (q, alpha, lin_cache)


def pool_context_backward(cache, d_c) -> np.ndarray:
    q, alpha, lin_cache = cache
    d_q = alpha[..., None] * d_c[..., None, :]
    d_alpha = np.einsum("...nd,...d->...n", q, d_c)
    d_scores = softmax_backward(alpha, d_alpha)[..., None]
    return d_q + linear_backward(lin_cache, d_scores)


def temporal_gate(params: ParamSet, c, prefix: str = "gate.temporal"):
    """``g = sigmoid(f_gate(c))`` with shape (..., T)."""
    logits, lin_cache = linear_forward(params, prefix, np.asarray(c, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite gate logits")
    g = sigmoid(logits)
    return g, (g, lin_cache)


def temporal_gate_backward(cache, d_g) -> np.ndarray:
    g, lin_cache = cache
    return linear_backward(lin_cache, d_g * g * (1.0 - g))


def ego_gate(params: ParamSet, c, n_features: int, n_steps: int, prefix: str = "gate.ego"):
    """``g = sigmoid(f_gate(c))`` reshaped row-major to (..., L, T)."""
    g, cache = temporal_gate(params, c, prefix)
    if g.shape[-1] != n_features * n_steps:
        raise ShapeError(f"{prefix} emits {g.shape[-1]} values, expected {n_features}x{n_steps}")
    return g.reshape(*g.shape[:-1], n_features, n_steps), cache


def ego_gate_backward(cache, d_g) -> np.ndarray:
    return temporal_gate_backward(cache, d_g.reshape(*d_g.shape[:-2], -1))


def apply_temporal_gate(g, q):
    """Scale q (..., N_tq, T, d_h) by g (..., T), one scalar per time step."""
    g = np.asarray(g, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if g.shape[-1] != q.shape[-2]:
        raise ShapeError(f"gate has {g.shape[-1]} steps, temporal queries have {q.shape[-2]}")
    return g[..., None, :, None] * q


def apply_temporal_gate_backward(g, q, upstream):
    """Returns ``(d_g, d_q)``."""
    d_g = np.einsum("...ntd,...ntd->...t", upstream, q)
    return d_g, g[..., None, :, None] * upstream


def apply_ego_gate(g, s):
    g = np.asarray(g, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if g.shape[-2:] != s.shape[-2:]:
        raise ShapeError(f"gate shape {g.shape[-2:]} != ego status shape {s.shape[-2:]}")
    return g * s


def write_gate_csv(path, signal: GateSignal, feature_names=EGO_FEATURES) -> None:
    """Heatmap CSV: one row per feature (or a single ``temporal`` row), one column per step."""
    values = signal.values if signal.mode == "ego" else signal.values[None, :]
    names = list(feature_names) if signal.mode == "ego" else ["temporal"]
    if len(names) != values.shape[0]:
        raise ShapeError(f"{len(names)} feature names for {values.shape[0]} gate rows")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", *time_labels(values.shape[1])])
        for name, row in zip(names, values):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_gate_csv(path) -> tuple[list[str], np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])
