"""Deterministic synthetic BEV scenes with ground-truth heteroscedastic noise.

A scene is a bundle of parallel lanes (straight or constant-curvature arcs,
3.5 m apart), vehicles that follow their lane centerline at a set speed and
brake when the headway to the vehicle ahead drops below 10 m, and an ego car
that obeys the same rule. Coordinates are in the ego frame at t=0: ego at the
origin, heading +x.

``observe`` adds per-vertex Laplace noise whose scale grows with range and
with occlusion (the far side of a vehicle, seen from the ego). The noisy
vertices are the regression labels; the frozen surrogate encoder sees the
clean geometry plus the range and occlusion cues, so the injected scale is
exactly the irreducible residual a calibrated head should report.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .gate import EGO_FEATURES, HISTORY_STEPS
from .geometry import box_corners, resample_polyline
from .laplace import laplace_sample
from .rng import keyed_centered_uniform, keyed_normal, scene_generator

SCHEMA_VERSION = 1
LANE_SPACING = 3.5
HEADWAY = 10.0
NEAR_RADIUS = 20.0
T_FUT = 6
ENCODER_SEED = 0x5EED
COORD_SCALE = 10.0  # metres per unit inside the surrogate encoder
SHAPE_SCALE = 1.0  # same, for box corner offsets


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    n_lanes: int = 3
    n_agents: int = 4
    duration_steps: int = HISTORY_STEPS + T_FUT
    dt: float = 0.5
    complexity: str = "complex"
    seed: int = 0
    k_static: int = 20
    feature_dim: int = 64
    max_curvature: float = 0.03
    straight_fraction: float = 0.3

    def __post_init__(self):
        if self.n_lanes < 1:
            raise ValueError("n_lanes must be >= 1")
        if self.n_agents < 0:
            raise ValueError("n_agents must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.duration_steps < HISTORY_STEPS + T_FUT:
            raise ValueError(f"duration_steps must cover {HISTORY_STEPS} history + {T_FUT} future steps")
        if self.complexity not in ("simple", "complex"):
            raise ValueError(f"complexity must be 'simple' or 'complex', got {self.complexity!r}")
        if self.complexity == "complex" and self.n_agents < 3:
            raise ValueError("a complex scene needs n_agents >= 3")
        if self.k_static < 2:
            raise ValueError("k_static must be >= 2")

    @property
    def t_fut(self) -> int:
        return self.duration_steps - HISTORY_STEPS


@dataclass(frozen=True)
class NoiseModel:
    b0: float = 0.0
    b_dist: float = 0.0
    b_occl: float = 0.0
    family: str = "laplace"  # "gaussian" = mis-specified noise with the same mean |error|

    def __post_init__(self):
        for name in ("b0", "b_dist", "b_occl"):
            if getattr(self, name) < 0:
                raise ValueError(f"NoiseModel.{name} must be >= 0")
        if self.family not in ("laplace", "gaussian"):
            raise ValueError(f"unknown noise family {self.family!r}")

    def scale(self, rng_m, occluded):
        return self.b0 + self.b_dist * np.asarray(rng_m) + self.b_occl * np.asarray(occluded, dtype=np.float64)


@dataclass
class SceneSample:
    index: int
    spec: SceneSpec
    curvature: float
    lane_offsets: np.ndarray  # (n_lanes,)
    map_elements: np.ndarray  # (n_lanes, P, 2) dense GT centerlines
    agent_states: np.ndarray  # (S, n_agents, 9): x y z width length height heading vx vy; S = T_hist + T_fut
    ego_history: np.ndarray  # (8, T) columns t, t-1, ...
    ego_future: np.ndarray  # (T_fut, 2)
    ego_past: np.ndarray  # (T, 2) ego positions at t, t-1, ...
    gt_static: np.ndarray  # (n_lanes, K_s, 2)
    gt_dynamic: np.ndarray  # (n_agents, 5, 2) at t = 0
    observed_static: np.ndarray = None
    observed_dynamic: np.ndarray = None
    true_scales_static: np.ndarray = None
    true_scales_dynamic: np.ndarray = None
    occluded_dynamic: np.ndarray = None  # (n_agents, 5) bool
    input_features_static: np.ndarray = None  # (n_lanes, d_in)
    input_features_dynamic: np.ndarray = None  # (n_agents, d_in)
    history_features: np.ndarray = None  # (n_agents, T, d_in) clean per-step agent features
    noise: NoiseModel = field(default_factory=NoiseModel)

    @property
    def name(self) -> str:
        return f"scene-{self.index:04d}"

    @property
    def now(self) -> int:
        """Row of ``agent_states`` holding t = 0."""
        return HISTORY_STEPS - 1

    def future_agents(self) -> np.ndarray:
        return self.agent_states[self.now + 1:]


# --------------------------------------------------------------------------
# lane geometry


def lane_pose(kappa: float, offset, s):
    """Position and heading at arc length ``s`` on the lane ``offset`` metres left of the ego lane.

    All lanes are concentric arcs about (0, 1/kappa) (parallel lines for kappa = 0)
    passing through (0, offset) at s = 0.
    """
    offset = np.asarray(offset, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    k = kappa / (1.0 - kappa * offset)
    if abs(kappa) < 1e-12:
        return np.stack([s, np.broadcast_to(offset, s.shape)], axis=-1), np.zeros_like(s)
    phi = k * s
    x = np.sin(phi) / k
    y = offset + (1.0 - np.cos(phi)) / k
    return np.stack([x, y], axis=-1), phi


# --------------------------------------------------------------------------
# generation


def _simulate(s0, v0, vdes, lanes, n_steps, dt):
    """Longitudinal dynamics in lane arc coordinates: brake at 3 m/s^2 when the
    centre-to-centre headway to the nearest vehicle ahead in the same lane is
    below HEADWAY, otherwise accelerate at up to 1 m/s^2 back to the set speed."""
    n = len(s0)
    s = np.empty((n_steps, n))
    v = np.empty((n_steps, n))
    s[0], v[0] = s0, v0
    for k in range(n_steps - 1):
        acc = np.minimum(1.0, (vdes - v[k]) / dt)
        for i in range(n):
            same = (lanes == lanes[i]) & (s[k] > s[k, i])
            same[i] = False
            if np.any(same) and np.min(s[k, same]) - s[k, i] < HEADWAY:
                acc[i] = -3.0
        v[k + 1] = np.maximum(0.0, v[k] + acc * dt)
        s[k + 1] = s[k] + 0.5 * (v[k] + v[k + 1]) * dt
    return s, v


def generate_scene(spec: SceneSpec, index: int = 0, max_retries: int = 100) -> SceneSample:
    """Noise-free scene ``index`` of the stream defined by ``spec.seed``."""
    rng = scene_generator(spec.seed, index)
    ego_lane = spec.n_lanes // 2
    offsets = (np.arange(spec.n_lanes) - ego_lane) * LANE_SPACING
    if rng.random() < spec.straight_fraction:
        kappa = 0.0
    else:
        kappa = float(rng.uniform(0.3, 1.0) * spec.max_curvature * rng.choice([-1.0, 1.0]))
    n_hist, n_fut = HISTORY_STEPS, spec.t_fut
    n_steps = n_hist + n_fut + 1  # one extra past state for the oldest acceleration
    now = n_hist  # index of t = 0 inside the simulation arrays

    for _ in range(max_retries):
        v_ego = rng.uniform(6.0, 12.0)
        lanes = [ego_lane]
        s0 = [0.0]
        v0 = [v_ego]
        lengths = [4.6]
        widths = [1.9]
        for a in range(spec.n_agents):
            near = (a < 3) if spec.complexity == "complex" else (a < 1)
            if near:
                # first near agent leads in the ego lane; others anywhere close by
                lane = ego_lane if a == 0 else int(rng.integers(spec.n_lanes))
                gap = rng.uniform(7.0, 16.0) if a == 0 else rng.uniform(-14.0, 14.0)
            else:
                lane = int(rng.integers(spec.n_lanes))
                gap = rng.choice([-1.0, 1.0]) * rng.uniform(32.0, 55.0)
            lanes.append(lane)
            s0.append(gap)
            v0.append(rng.uniform(3.0, 12.0))
            lengths.append(rng.uniform(4.0, 5.0))
            widths.append(rng.uniform(1.7, 2.1))
        lanes_a = np.array(lanes)
        s0_a = np.array(s0)
        # no overlapping vehicles in a lane at the start
        ok = True
        for ln in set(lanes):
            ss = np.sort(s0_a[lanes_a == ln])
            if np.any(np.diff(ss) < 7.0):
                ok = False
        if not ok:
            continue
        v0_a = np.array(v0)
        s, v = _simulate(s0_a, v0_a, v0_a.copy(), lanes_a, n_steps, spec.dt)
        off = offsets[lanes_a]
        # shift so that the ego sits at s = 0 at t = 0 (a rotation about the arc centre)
        s_shift = s - s[now, 0] * (1.0 - kappa * off)
        xy, heading = lane_pose(kappa, off[None, :], s_shift)
        d_now = np.hypot(*xy[now, 1:].T) if spec.n_agents else np.zeros(0)
        n_near = int(np.sum(d_now < NEAR_RADIUS))
        if spec.complexity == "complex" and n_near < 3:
            continue
        if spec.complexity == "simple" and n_near > 1:
            continue
        # vehicles must not start in contact with the ego
        if spec.n_agents and np.any(d_now < 5.0):
            continue
        break
    else:
        raise GenerationError(f"scene {index}: no feasible placement after {max_retries} retries")

    # velocity vectors
    vel = v[..., None] * np.stack([np.cos(heading), np.sin(heading)], axis=-1)
    acc = np.zeros_like(vel)
    acc[1:] = (vel[1:] - vel[:-1]) / spec.dt

    steps = slice(1, n_steps)  # drop the extra oldest state
    agents = np.zeros((n_steps - 1, spec.n_agents, 9))
    if spec.n_agents:
        agents[..., 0:2] = xy[steps, 1:]
        agents[..., 3] = np.array(widths[1:])
        agents[..., 4] = np.array(lengths[1:])
        agents[..., 5] = 1.6
        agents[..., 6] = heading[steps, 1:]
        agents[..., 7:9] = vel[steps, 1:]

    ego_hist = np.zeros((len(EGO_FEATURES), n_hist))
    final_heading = heading[-1, 0]
    cmd = 0 if final_heading > 0.1 else 2 if final_heading < -0.1 else 1
    ego_hist[cmd, :] = 1.0
    for j in range(n_hist):  # column j is t - j
        k = now - j
        ego_hist[4:6, j] = vel[k, 0]
        ego_hist[6:8, j] = acc[k, 0]
    ego_future = xy[now + 1:, 0].copy()
    ego_past = xy[now - np.arange(n_hist), 0].copy()

    arc = np.arange(-20.0, 60.0 + 1e-9, 2.0)
    lanes_xy = np.stack([lane_pose(kappa, o, arc)[0] for o in offsets])
    gt_static = np.stack([resample_polyline(p, spec.k_static).points for p in lanes_xy])
    a_now = agents[now - 1] if spec.n_agents else np.zeros((0, 9))
    gt_dynamic = box_corners(a_now[:, 0], a_now[:, 1], a_now[:, 4], a_now[:, 3], a_now[:, 6]) \
        if spec.n_agents else np.zeros((0, 5, 2))
    return SceneSample(
        index=index, spec=spec, curvature=kappa, lane_offsets=offsets, map_elements=lanes_xy,
        agent_states=agents, ego_history=ego_hist, ego_future=ego_future, ego_past=ego_past,
        gt_static=gt_static, gt_dynamic=gt_dynamic,
    )


# --------------------------------------------------------------------------
# observation


def occlusion_flags(vertices: np.ndarray) -> np.ndarray:
    """Corners on the far side of a vehicle from the ego (origin); centers are visible.

    vertices: (..., 5, 2) -> bool (..., 5)
    """
    center = vertices[..., 4:5, :]
    return np.sum((vertices - center) * center, axis=-1) > 1e-9


def _frozen_map(n_in: int, n_out: int, tag: int) -> np.ndarray:
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([ENCODER_SEED, tag, n_in, n_out])))
    return g.standard_normal((n_in, n_out)) / math.sqrt(n_in)


def surrogate_features(vertices: np.ndarray, occluded: np.ndarray, d_in: int, tag: int) -> np.ndarray:
    """Frozen random linear encoder over (vertices, per-vertex range, occlusion flags)."""
    k = vertices.shape[-2]
    rng_m = np.hypot(vertices[..., 0], vertices[..., 1])
    if tag == 1:  # boxes: center, then corner offsets from it (pose and extent kept separable)
        center = vertices[..., 4:5, :]
        coords = np.concatenate([center / COORD_SCALE, (vertices[..., :4, :] - center) / SHAPE_SCALE], axis=-2)
    else:
        coords = vertices / COORD_SCALE
    raw = np.concatenate([coords.reshape(*vertices.shape[:-2], 2 * k),
                          rng_m / COORD_SCALE, occluded.astype(np.float64)], axis=-1)
    return raw @ _frozen_map(4 * k, d_in, tag)


def observe(sample: SceneSample, noise: NoiseModel, seed: int) -> SceneSample:
    """Return a copy of ``sample`` with noisy vertices, the scales used and encoder features."""
    spec = sample.spec
    n_s, n_a = spec.n_lanes, spec.n_agents
    occ = occlusion_flags(sample.gt_dynamic) if n_a else np.zeros((0, 5), dtype=bool)
    out = {}
    for kind, gt, occl, elem0 in (("static", sample.gt_static, np.zeros(sample.gt_static.shape[:2], bool), 0),
                                  ("dynamic", sample.gt_dynamic, occ, n_s)):
        rng_m = np.hypot(gt[..., 0], gt[..., 1])
        b = np.repeat(noise.scale(rng_m, occl)[..., None], 2, axis=-1)
        m, k = gt.shape[:2]
        e_idx = (elem0 + np.arange(m))[:, None, None]
        v_idx = np.arange(k)[None, :, None]
        ax = np.arange(2)[None, None, :]
        if noise.family == "laplace":
            u = keyed_centered_uniform(seed, sample.index, e_idx, v_idx, ax)
            obs = laplace_sample(gt, b, u) if gt.size else gt.copy()
        else:
            z = keyed_normal(seed, sample.index, e_idx, v_idx, ax)
            obs = gt + z * b * math.sqrt(math.pi / 2.0)
        out[kind] = (np.asarray(obs, dtype=np.float64).reshape(gt.shape), b.reshape(gt.shape))

    d_in = spec.feature_dim
    hist = np.zeros((n_a, HISTORY_STEPS, d_in))
    if n_a:
        past = sample.agent_states[sample.now - np.arange(HISTORY_STEPS)]  # (T, A, 9)
        verts = box_corners(past[..., 0], past[..., 1], past[..., 4], past[..., 3], past[..., 6])
        hist = surrogate_features(verts, occlusion_flags(verts), d_in, tag=1).transpose(1, 0, 2)

    obs = SceneSample(**{f.name: getattr(sample, f.name) for f in fields(SceneSample)})
    obs.observed_static, obs.true_scales_static = out["static"]
    obs.observed_dynamic, obs.true_scales_dynamic = out["dynamic"]
    obs.occluded_dynamic = occ
    obs.input_features_static = surrogate_features(
        sample.gt_static, np.zeros(sample.gt_static.shape[:2], bool), d_in, tag=0)
    obs.input_features_dynamic = surrogate_features(sample.gt_dynamic, occ, d_in, tag=1) if n_a \
        else np.zeros((0, d_in))
    obs.history_features = hist
    obs.noise = noise
    return obs


def make_dataset(spec: SceneSpec, noise: NoiseModel, n_scenes: int, start: int = 0) -> list[SceneSample]:
    return [observe(generate_scene(spec, i), noise, spec.seed) for i in range(start, start + n_scenes)]


# --------------------------------------------------------------------------
# persistence

_ARRAY_FIELDS = [f.name for f in fields(SceneSample)
                 if f.name not in ("index", "spec", "curvature", "noise")]


def _to_record(s: SceneSample) -> dict:
    rec = {"index": s.index, "spec": asdict(s.spec), "noise": asdict(s.noise), "curvature": s.curvature}
    for name in _ARRAY_FIELDS:
        a = getattr(s, name)
        if a is None:
            rec[name] = None
        else:
            a = np.asarray(a)
            rec[name] = {"shape": list(a.shape), "dtype": "bool" if a.dtype == bool else "f8",
                         "data": a.reshape(-1).tolist()}
    return rec


def _from_record(rec: dict) -> SceneSample:
    kw = {"index": int(rec["index"]), "spec": SceneSpec(**rec["spec"]),
          "noise": NoiseModel(**rec["noise"]), "curvature": float(rec["curvature"])}
    for name in _ARRAY_FIELDS:
        v = rec[name]
        if v is None:
            kw[name] = None
        else:
            dt = bool if v["dtype"] == "bool" else np.float64
            kw[name] = np.array(v["data"], dtype=dt).reshape(v["shape"])
    return SceneSample(**kw)


def write_dataset(samples, path) -> None:
    """One JSON record per line after a ``{"schema": 1}`` header; floats round-trip exactly."""
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"schema": SCHEMA_VERSION}) + "\n")
        for s in samples:
            fh.write(json.dumps(_to_record(s), separators=(",", ":"), allow_nan=False) + "\n")


def read_dataset(path) -> list[SceneSample]:
    with open(Path(path), encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError(f"{path}: line 1: missing schema header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: line 1: schema mismatch, expected {SCHEMA_VERSION}, got {header!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            out.append(_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed scene record ({exc})") from None
    return out


def samples_equal(a: SceneSample, b: SceneSample) -> bool:
    for f in fields(SceneSample):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if x is None or y is None or x.shape != y.shape or x.dtype != y.dtype:
                return False
            if not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True
