"""Finite-difference checks of every hand-written backward pass.

Each check builds a small random instance from a seed, reduces the outputs to a
scalar through a fixed random projection (or a real training loss), and
compares the analytic gradient of every input and parameter with central
differences. The error of one check is ``max_relative_error`` over the joint
gradient vector of all its arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion, gate, laplace
from .model import ModelConfig, UncertaintyPlanner, collate
from .nn import (AttentionSpec, MlpSpec, ParamSet, cross_attention, cross_attention_backward, finite_diff_grad,
                 init_attention, init_linear, init_mlp, max_relative_error, mlp_backward, mlp_forward, sigmoid,
                 softplus)
from .scene import NoiseModel, SceneSpec, make_dataset

TOLERANCE = 1e-5
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _compare(f, analytic: list, arrays: list) -> float:
    numeric = finite_diff_grad(f, arrays, STEP)
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return max_relative_error(a, n)


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt])


def check_softplus(seed: int) -> float:
    rng = _rng(seed, 1)
    x = rng.normal(0.0, 3.0, size=7)
    r = rng.standard_normal(7)
    return _compare(lambda: float(np.sum(softplus(x, laplace.EPS) * r)), [sigmoid(x) * r], [x])


def check_mlp(seed: int) -> float:
    rng = _rng(seed, 2)
    spec = MlpSpec((5, 7, 6, 3))
    p = ParamSet()
    init_mlp(p, "m", spec, rng)
    for q in p:
        q.value += 0.1 * rng.standard_normal(q.shape)
    x = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 3))
    y, cache = mlp_forward(spec, p, x, "m")
    dx = mlp_backward(cache, r)
    f = lambda: float(np.sum(mlp_forward(spec, p, x, "m")[0] * r))  # noqa: E731
    return _compare(f, [q.grad for q in p] + [dx], [q.value for q in p] + [x])


def check_attention(seed: int) -> float:
    rng = _rng(seed, 3)
    spec = AttentionSpec(6, 2)
    p = ParamSet()
    init_attention(p, "a", spec, rng)
    q = rng.standard_normal((2, 3, 6))
    kv = rng.standard_normal((2, 4, 6))
    r = rng.standard_normal((2, 3, 6))
    _, cache = cross_attention(spec, p, q, kv, "a")
    dq, dkv = cross_attention_backward(cache, r)
    f = lambda: float(np.sum(cross_attention(spec, p, q, kv, "a")[0] * r))  # noqa: E731
    return _compare(f, [x.grad for x in p] + [dq, dkv], [x.value for x in p] + [q, kv])


def check_head_loss(seed: int) -> float:
    """Laplace NLL + l1 through the Softplus scale into head weights and queries."""
    rng = _rng(seed, 4)
    cfg = laplace.HeadConfig(d_h=6, k=5, hidden_sizes=(8,))
    p = ParamSet()
    laplace.init_head(p, "h", cfg, rng)
    query = rng.standard_normal((3, 6))
    target = rng.normal(0.0, 1.0, size=(3, 5, 2))

    def f():
        pred, _ = laplace.head_forward(cfg, p, query, "h")
        return laplace.combined_loss(pred, target, laplace.DYNAMIC_WEIGHTS)

    pred, cache = laplace.head_forward(cfg, p, query, "h")
    _, g = laplace.combined_loss(pred, target, laplace.DYNAMIC_WEIGHTS, with_grad=True)
    dq = laplace.head_backward(cache, g)
    return _compare(f, [x.grad for x in p] + [dq], [x.value for x in p] + [query])


def check_fusion(seed: int) -> float:
    """Uncertainty encoder composed with cross-attention (residual mode on odd seeds)."""
    rng = _rng(seed, 5)
    k, d = 3, 4
    spec = fusion.encoder_spec(k, d, (5,))
    att = AttentionSpec(d, 2)
    p = ParamSet()
    init_mlp(p, "u", spec, rng)
    init_attention(p, "a", att, rng)
    params = rng.standard_normal((2, 4, k, 4))
    q = rng.standard_normal((2, 4, d))
    r = rng.standard_normal((2, 4, d))
    residual = bool(seed % 2)

    def f():
        e, _ = fusion.encode_uncertainty(spec, p, params, "u")
        return float(np.sum(fusion.fuse(att, p, q, e, residual=residual, prefix="a")[0] * r))

    e, ec = fusion.encode_uncertainty(spec, p, params, "u")
    _, fc = fusion.fuse(att, p, q, e, residual=residual, prefix="a")
    dq, de = fusion.fuse_backward(fc, r)
    dparams = fusion.encode_uncertainty_backward(ec, de)
    return _compare(f, [x.grad for x in p] + [dq, dparams], [x.value for x in p] + [q, params])


def check_pool(seed: int) -> float:
    rng = _rng(seed, 6)
    p = ParamSet()
    init_linear(p, "g", 4, 1, rng)
    q = rng.standard_normal((2, 5, 4))
    r = rng.standard_normal((2, 4))
    c, _, cache = gate.pool_context(p, q, "g")
    dq = gate.pool_context_backward(cache, r)
    f = lambda: float(np.sum(gate.pool_context(p, q, "g")[0] * r))  # noqa: E731
    return _compare(f, [x.grad for x in p] + [dq], [x.value for x in p] + [q])


def check_temporal_gate(seed: int) -> float:
    """Gate projection and its broadcast application to temporal queries."""
    rng = _rng(seed, 7)
    t, d = 4, 3
    p = ParamSet()
    init_linear(p, "g", d, t, rng)
    c = rng.standard_normal((2, d))
    tq = rng.standard_normal((2, 3, t, d))
    r = rng.standard_normal((2, 3, t, d))

    def f():
        g, _ = gate.temporal_gate(p, c, "g")
        return float(np.sum(gate.apply_temporal_gate(g, tq) * r))

    g, cache = gate.temporal_gate(p, c, "g")
    dg, dtq = gate.apply_temporal_gate_backward(g, tq, r)
    dc = gate.temporal_gate_backward(cache, dg)
    return _compare(f, [x.grad for x in p] + [dc, dtq], [x.value for x in p] + [c, tq])


def check_ego_gate(seed: int) -> float:
    rng = _rng(seed, 8)
    n_f, t, d = len(gate.EGO_FEATURES), gate.HISTORY_STEPS, 5
    p = ParamSet()
    init_linear(p, "g", d, n_f * t, rng)
    c = rng.standard_normal((2, d))
    s = rng.standard_normal((2, n_f, t))
    r = rng.standard_normal((2, n_f, t))

    def f():
        g, _ = gate.ego_gate(p, c, n_f, t, "g")
        return float(np.sum(gate.apply_ego_gate(g, s) * r))

    g, cache = gate.ego_gate(p, c, n_f, t, "g")
    dc = gate.ego_gate_backward(cache, r * s)
    return _compare(f, [x.grad for x in p] + [dc, r * g], [x.value for x in p] + [c, s])


_STACK_DATA = {}


def _stack_batch():
    if "batch" not in _STACK_DATA:
        spec = SceneSpec(n_lanes=2, n_agents=3, k_static=3, feature_dim=5)
        _STACK_DATA["batch"] = collate(make_dataset(spec, NoiseModel(0.3, 0.01, 0.2), 2))
    return _STACK_DATA["batch"]


def stack_model(seed: int, history_mode: str, **switches) -> UncertaintyPlanner:
    """Tiny full stack at a well-conditioned random point.

    Weights are fan-in scaled; the uncertainty encoder's first layer is shrunk
    further because its inputs are vertex coordinates in metres.
    """
    cfg = ModelConfig(d_in=5, d_h=4, n_heads=2, k_static=3, encoder_hidden=(5,), head_hidden=(4,),
                      uncer_hidden=(4,), hidden_sizes=(5,), history_mode=history_mode, seed=seed, **switches)
    m = UncertaintyPlanner(cfg)
    rng = _rng(seed, 9)
    for q in m.params:
        scale = 1.5 / np.sqrt(q.shape[0])
        if q.name.startswith("uncer_enc") and ".0." in q.name:
            scale *= 0.05
        q.value[...] = rng.standard_normal(q.shape) * scale
    return m


def check_stack(seed: int, history_mode: str = "ego_matrix", **switches) -> float:
    """Training loss -> planner -> gate -> fusion -> heads -> encoders."""
    m = stack_model(seed, history_mode, **switches)
    batch = _stack_batch()

    def f():
        out, _ = m.forward(batch)
        return m.loss(batch, out, 1.0, with_grad=False)[0]

    m.params.zero_grad()
    out, cache = m.forward(batch)
    _, _, grads = m.loss(batch, out, 1.0)
    m.backward(cache, grads)
    return _compare(f, [q.grad.copy() for q in m.params], [q.value for q in m.params])


CHECKS = {
    "softplus": check_softplus,
    "mlp": check_mlp,
    "cross_attention": check_attention,
    "laplace_head_loss": check_head_loss,
    "fusion": check_fusion,
    "pool_context": check_pool,
    "temporal_gate": check_temporal_gate,
    "ego_gate": check_ego_gate,
    "stack_ego_matrix": lambda s: check_stack(s, "ego_matrix"),
    "stack_temporal_vector": lambda s: check_stack(s, "temporal_vector"),
}


def run_all(seeds=range(10), names=None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        for s in seeds:
            out.append(CheckResult(name, s, CHECKS[name](s)))
    return out
