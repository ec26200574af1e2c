"""The full stack: query encoders, vertex heads, uncertainty fusion, gate and planner.

Data flow for one batch of scenes::

    static/dynamic features --enc--> Q_s, Q_d --head--> vertex params
    (uncertainty on)  params --uncer_enc--> E --attention(Q, E, E)--> Q^uncer
    concat(Q_s^uncer, Q_d^uncer) --pool--> c --sigmoid proj--> gate
    [mean Q_s^uncer, mean Q_d^uncer, gated history] --planner MLP--> trajectory

Switches select between the plain and the uncertainty-aware path for each
branch and for the gate; everything else is shared so that an ablation differs
only in the toggled computation.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import fusion, gate, laplace
from .geometry import N_DYNAMIC
from .nn import (AttentionSpec, MlpSpec, ParamSet, ShapeError, init_attention, init_linear, init_mlp,
                 mlp_backward, mlp_forward)
from .scene import SceneSample

PLANNER_PREFIX = "planner"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 64
    d_h: int = 64
    n_heads: int = 4
    k_static: int = 20
    t_hist: int = gate.HISTORY_STEPS
    t_fut: int = 6
    encoder_hidden: tuple[int, ...] = (256, 256)
    head_hidden: tuple[int, ...] = (128,)
    uncer_hidden: tuple[int, ...] = (64,)
    hidden_sizes: tuple[int, ...] = (256, 256)  # planner
    history_mode: str = "ego_matrix"  # or "temporal_vector"
    use_static_uncer: bool = True
    use_dynamic_uncer: bool = True
    use_gate: bool = True
    residual: bool = False
    epsilon: float = laplace.EPS
    uncer_input_scale: float = 10.0  # metres; shrinks the first uncer_enc layer at init
    seed: int = 0

    def __post_init__(self):
        if self.history_mode not in ("ego_matrix", "temporal_vector"):
            raise ValueError(f"unknown history_mode {self.history_mode!r}")
        if self.t_fut < 1:
            raise ValueError("t_fut must be >= 1")
        AttentionSpec(self.d_h, self.n_heads)

    @property
    def n_ego(self) -> int:
        return len(gate.EGO_FEATURES)

    def head(self, kind: str) -> laplace.HeadConfig:
        k = self.k_static if kind == "static" else N_DYNAMIC
        prob = self.use_static_uncer if kind == "static" else self.use_dynamic_uncer
        return laplace.HeadConfig(self.d_h, k, tuple(self.head_hidden), self.epsilon, prob)

    @property
    def attention(self) -> AttentionSpec:
        return AttentionSpec(self.d_h, self.n_heads)

    def encoder(self) -> MlpSpec:
        return MlpSpec((self.d_in, *self.encoder_hidden, self.d_h))

    def uncer_encoder(self, kind: str) -> MlpSpec:
        k = self.k_static if kind == "static" else N_DYNAMIC
        return fusion.encoder_spec(k, self.d_h, tuple(self.uncer_hidden))

    @property
    def history_width(self) -> int:
        ego = self.n_ego * self.t_hist
        return ego if self.history_mode == "ego_matrix" else ego + self.t_hist * self.d_h

    def planner(self) -> MlpSpec:
        return MlpSpec((2 * self.d_h + self.history_width, *self.hidden_sizes, 2 * self.t_fut))


@dataclass
class Batch:
    feat_static: np.ndarray  # (B, Ms, d_in)
    feat_dynamic: np.ndarray  # (B, Md, d_in)
    target_static: np.ndarray  # (B, Ms, Ks, 2)
    target_dynamic: np.ndarray  # (B, Md, 5, 2)
    ego_history: np.ndarray  # (B, 8, T)
    history_features: np.ndarray  # (B, Md, T, d_in)
    traj: np.ndarray  # (B, T_fut, 2)
    scene_index: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return len(self.traj)


def collate(samples: list[SceneSample]) -> Batch:
    shapes = {(s.input_features_static.shape, s.input_features_dynamic.shape) for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"scenes in one batch must share element counts, got {sorted(shapes)}")
    return Batch(
        feat_static=np.stack([s.input_features_static for s in samples]),
        feat_dynamic=np.stack([s.input_features_dynamic for s in samples]),
        target_static=np.stack([s.observed_static for s in samples]),
        target_dynamic=np.stack([s.observed_dynamic for s in samples]),
        ego_history=np.stack([s.ego_history for s in samples]),
        history_features=np.stack([s.history_features for s in samples]),
        traj=np.stack([s.ego_future for s in samples]),
        scene_index=np.array([s.index for s in samples]),
    )


def _mean_rows(x: np.ndarray) -> np.ndarray:
    if x.shape[-2] == 0:
        return np.zeros(x.shape[:-2] + x.shape[-1:])
    return x.mean(axis=-2)


class UncertaintyPlanner:
    """Parameters plus forward/backward for the whole stack."""

    def __init__(self, cfg: ModelConfig, params: ParamSet | None = None):
        self.cfg = cfg
        if params is None:
            params = self.init_params(cfg)
        self.params = params

    # ---------------------------------------------------------------- setup
    @staticmethod
    def init_params(cfg: ModelConfig) -> ParamSet:
        """Each module draws from its own stream keyed by (seed, module name), so modules
        shared between ablation arms start from identical weights."""
        def rng(name: str) -> np.random.Generator:
            return np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, zlib.crc32(name.encode())])))

        p = ParamSet()
        for kind in ("static", "dynamic"):
            init_mlp(p, f"enc_{kind}", cfg.encoder(), rng(f"enc_{kind}"))
        for kind in ("static", "dynamic"):
            hcfg = cfg.head(kind)
            full = ParamSet()
            init_mlp(full, "h", replace(hcfg, probabilistic=True).mlp, rng(f"head_{kind}"), last_layer_gain=0.1)
            last = hcfg.mlp.n_layers - 1
            for q in full:
                value = q.value
                if not hcfg.probabilistic and q.name.startswith(f"h.{last}."):
                    # deterministic head keeps the location columns of the 4-wide layout
                    value = value.reshape(value.shape[0], hcfg.k, 4)[..., laplace.MU_COLS].reshape(value.shape[0], -1)
                p.new(f"head_{kind}" + q.name[1:], value)
        for kind in ("static", "dynamic"):
            if cfg.use_static_uncer if kind == "static" else cfg.use_dynamic_uncer:
                init_mlp(p, f"uncer_enc_{kind}", cfg.uncer_encoder(kind), rng(f"uncer_enc_{kind}"),
                         first_layer_scale=1.0 / cfg.uncer_input_scale)
                init_attention(p, f"attn_{kind}", cfg.attention, rng(f"attn_{kind}"))
        if cfg.use_gate:
            init_linear(p, "gate.attn", cfg.d_h, 1, zero=True)
            if cfg.history_mode == "ego_matrix":
                init_linear(p, "gate.ego", cfg.d_h, cfg.n_ego * cfg.t_hist, zero=True)
            else:
                init_linear(p, "gate.temporal", cfg.d_h, cfg.t_hist, zero=True)
        init_mlp(p, PLANNER_PREFIX, cfg.planner(), rng(PLANNER_PREFIX), last_layer_gain=0.1)
        return p

    def planner_params(self):
        return self.params.with_prefix(PLANNER_PREFIX + ".")

    def non_planner_params(self):
        return [q for q in self.params if not q.name.startswith(PLANNER_PREFIX + ".")]

    def uncertainty_param_count(self) -> int:
        """Parameters that exist only because some uncertainty switch is on."""
        cfg = self.cfg
        n = 0
        for kind, on in (("static", cfg.use_static_uncer), ("dynamic", cfg.use_dynamic_uncer)):
            if on:
                n += cfg.uncer_encoder(kind).param_count() + cfg.attention.param_count()
                h = cfg.head(kind)
                n += (h.mlp.layer_sizes[-2] + 1) * 2 * h.k  # the scale outputs
        if cfg.use_gate:
            n += cfg.d_h + 1
            n += (cfg.d_h + 1) * (cfg.n_ego * cfg.t_hist if cfg.history_mode == "ego_matrix" else cfg.t_hist)
        return n

    # -------------------------------------------------------------- forward
    def forward(self, batch: Batch):
        cfg, p = self.cfg, self.params
        out, cache = {}, {}
        pooled, q_uncer = {}, {}
        for kind, feats in (("static", batch.feat_static), ("dynamic", batch.feat_dynamic)):
            q, enc_c = mlp_forward(cfg.encoder(), p, feats, f"enc_{kind}")
            hcfg = cfg.head(kind)
            head_out, head_c = laplace.head_forward(hcfg, p, q, f"head_{kind}")
            cache[f"enc_{kind}"], cache[f"head_{kind}"] = enc_c, head_c
            out[f"head_{kind}"] = head_out
            on = cfg.use_static_uncer if kind == "static" else cfg.use_dynamic_uncer
            if on and q.shape[-2] > 0:
                e, ue_c = fusion.encode_uncertainty(cfg.uncer_encoder(kind), p, head_out.params,
                                                    f"uncer_enc_{kind}")
                qu, f_c = fusion.fuse(cfg.attention, p, q, e, residual=cfg.residual, prefix=f"attn_{kind}")
                cache[f"uncer_{kind}"] = (ue_c, f_c)
            else:
                qu = q
            q_uncer[kind] = qu
            pooled[kind] = _mean_rows(qu)
        out["q_uncer"] = q_uncer

        ego = batch.ego_history
        B = ego.shape[0]
        g = None
        if cfg.use_gate:
            qcat = np.concatenate([q_uncer["static"], q_uncer["dynamic"]], axis=-2)
            c, alpha, pool_c = gate.pool_context(p, qcat, "gate.attn")
            cache["pool"] = (pool_c, q_uncer["static"].shape[-2])
            out["alpha"] = alpha
            if cfg.history_mode == "ego_matrix":
                g, gc = gate.ego_gate(p, c, cfg.n_ego, cfg.t_hist, "gate.ego")
            else:
                g, gc = gate.temporal_gate(p, c, "gate.temporal")
            cache["gate"] = gc
            cache["gate_values"] = g
        out["gate"] = g
        cache["ego"] = ego

        if cfg.history_mode == "ego_matrix":
            hist = gate.apply_ego_gate(g, ego) if g is not None else ego
            hist_flat = hist.reshape(B, -1)
        else:
            tq, tq_c = mlp_forward(cfg.encoder(), p, batch.history_features, "enc_dynamic")
            cache["temporal_enc"] = tq_c
            gated = gate.apply_temporal_gate(g, tq) if g is not None else tq
            cache["temporal"] = tq
            pooled_t = gated.mean(axis=-3) if tq.shape[-3] else np.zeros(tq.shape[:-3] + tq.shape[-2:])
            hist_flat = np.concatenate([pooled_t.reshape(B, -1), ego.reshape(B, -1)], axis=-1)

        x = np.concatenate([pooled["static"], pooled["dynamic"], hist_flat], axis=-1)
        y, plan_c = mlp_forward(cfg.planner(), p, x, PLANNER_PREFIX)
        cache["planner"] = plan_c
        out["traj"] = y.reshape(B, cfg.t_fut, 2)
        return out, cache

    def plan(self, batch: Batch) -> np.ndarray:
        return self.forward(batch)[0]["traj"]

    # ---------------------------------------------------------------- loss
    def loss(self, batch: Batch, out, w_plan: float = 1.0, *, with_grad: bool = True):
        """Total loss ``L_static + L_dynamic + w_plan * l1(traj)`` and output gradients."""
        terms, grads = {}, {}
        for kind, target, weights in (("static", batch.target_static, laplace.STATIC_WEIGHTS),
                                      ("dynamic", batch.target_dynamic, laplace.DYNAMIC_WEIGHTS)):
            head_out = out[f"head_{kind}"]
            if self.cfg.head(kind).probabilistic:
                terms[kind], grads[kind] = laplace.combined_loss(head_out, target, weights, with_grad=True)
            else:
                terms[kind], grads[kind] = laplace.l1_loss(head_out, target, with_grad=True)
        if w_plan:
            terms["plan"], grads["traj"] = laplace.l1_loss(out["traj"], batch.traj, weight=w_plan,
                                                           with_grad=True)
        else:
            terms["plan"], grads["traj"] = 0.0, np.zeros_like(out["traj"])
        total = terms["static"] + terms["dynamic"] + terms["plan"]
        return (total, terms, grads) if with_grad else (total, terms)

    # ------------------------------------------------------------- backward
    def backward(self, cache, grads, *, d_q_extra=None) -> None:
        """Accumulate parameter gradients given output gradients from ``loss``.

        ``grads`` keys: ``traj`` (B, T_fut, 2), ``static``/``dynamic`` (head outputs).
        """
        cfg = self.cfg
        d_traj = grads["traj"]
        B = d_traj.shape[0]
        d_x = mlp_backward(cache["planner"], d_traj.reshape(B, -1))
        d = cfg.d_h
        d_pooled = {"static": d_x[:, :d], "dynamic": d_x[:, d:2 * d]}
        d_hist = d_x[:, 2 * d:]

        d_qu = {}
        for kind in ("static", "dynamic"):
            m = cache[f"enc_{kind}"].pre[-1].shape[-2]
            d_qu[kind] = np.repeat(d_pooled[kind][:, None, :] / max(m, 1), m, axis=1)

        d_c = None
        if cfg.history_mode == "ego_matrix":
            d_hist = d_hist.reshape(B, cfg.n_ego, cfg.t_hist)
            if cfg.use_gate:
                d_c = gate.ego_gate_backward(cache["gate"], d_hist * cache["ego"])
        else:
            n_t = cfg.t_hist * d
            d_pooled_t = d_hist[:, :n_t].reshape(B, cfg.t_hist, d)
            tq = cache["temporal"]
            a = tq.shape[-3]
            d_gated = np.repeat(d_pooled_t[:, None] / max(a, 1), a, axis=1)
            if cfg.use_gate:
                d_g, d_tq = gate.apply_temporal_gate_backward(cache["gate_values"], tq, d_gated)
                d_c = gate.temporal_gate_backward(cache["gate"], d_g)
            else:
                d_tq = d_gated
            mlp_backward(cache["temporal_enc"], d_tq, input_grad=False)

        if d_c is not None:
            pool_c, ms = cache["pool"]
            d_qcat = gate.pool_context_backward(pool_c, d_c)
            d_qu["static"] = d_qu["static"] + d_qcat[:, :ms]
            d_qu["dynamic"] = d_qu["dynamic"] + d_qcat[:, ms:]

        if d_q_extra is not None:
            for kind in d_q_extra:
                d_qu[kind] = d_qu[kind] + d_q_extra[kind]

        for kind in ("static", "dynamic"):
            d_head = grads[kind].copy()
            if f"uncer_{kind}" in cache:
                ue_c, f_c = cache[f"uncer_{kind}"]
                d_q, d_e = fusion.fuse_backward(f_c, d_qu[kind])
                d_head += fusion.encode_uncertainty_backward(ue_c, d_e)
            else:
                d_q = d_qu[kind]
            d_q = d_q + laplace.head_backward(cache[f"head_{kind}"], d_head)
            mlp_backward(cache[f"enc_{kind}"], d_q, input_grad=False)
