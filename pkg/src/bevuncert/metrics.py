"""Planning metrics: L2 displacement, collision rate and a reduced EPDMS score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import point_polyline_distance, point_rect_distance

HORIZON_STEPS = (2, 4, 6)  # 1 s, 2 s, 3 s at dt = 0.5
HORIZON_LABELS = ("1s", "2s", "3s", "avg")
EGO_RADIUS = 1.0

PENALTY_METRICS = ("NC", "DAC", "DDC", "TLC")
AVG_METRICS = ("TTC", "EP", "HC", "LK", "EC")
# not derivable in the toy world; fixed at 1 and listed in every report
CONSTANT_METRICS = ("DAC", "DDC", "TLC", "HC", "EC")
TTC_HORIZON = 3.0
LANE_TOLERANCE = 0.5


def _check_traj(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError(f"trajectory shapes differ or are not (..., T, 2): {pred.shape} vs {gt.shape}")
    if pred.shape[-2] < HORIZON_STEPS[-1]:
        raise ValueError(f"need at least {HORIZON_STEPS[-1]} future steps, got {pred.shape[-2]}")
    return pred, gt


def l2_displacement(pred, gt) -> np.ndarray:
    """``[l2@1s, l2@2s, l2@3s, avg]``; leading batch dims are kept."""
    pred, gt = _check_traj(pred, gt)
    r = (pred - gt)[..., [s - 1 for s in HORIZON_STEPS], :]
    d = np.hypot(r[..., 0], r[..., 1])
    return np.concatenate([d, d.mean(axis=-1, keepdims=True)], axis=-1)


def step_collisions(traj, agents, ego_radius: float = EGO_RADIUS) -> np.ndarray:
    """Boolean per future step: the ego disc touches some agent rectangle (closed test).

    traj: (T, 2); agents: (T, A, 9) rows ``x y z width length height heading vx vy``.
    """
    traj = np.asarray(traj, dtype=np.float64)
    agents = np.asarray(agents, dtype=np.float64)
    if agents.shape[1] == 0:
        return np.zeros(len(traj), dtype=bool)
    d = point_rect_distance(traj[:, None, 0], traj[:, None, 1], agents[..., 0], agents[..., 1],
                            agents[..., 4], agents[..., 3], agents[..., 6])
    return np.any(d <= ego_radius, axis=1)


def collision_rate(traj, agents, ego_radius: float = EGO_RADIUS) -> np.ndarray:
    """``[rate over steps 1..2, 1..4, 1..6, mean of the three]`` for one scene."""
    hits = step_collisions(traj, agents, ego_radius).astype(np.float64)
    r = np.array([hits[:s].mean() for s in HORIZON_STEPS])
    return np.append(r, r.mean())


# --------------------------------------------------------------------------
# EPDMS


@dataclass
class EpdmsInputs:
    penalty_scores: dict
    avg_scores: dict
    human_penalty: dict
    human_avg: dict
    weights: dict = field(default_factory=lambda: {m: 1.0 for m in AVG_METRICS})

    def __post_init__(self):
        for name, table, keys in (("penalty_scores", self.penalty_scores, PENALTY_METRICS),
                                  ("avg_scores", self.avg_scores, AVG_METRICS),
                                  ("human_penalty", self.human_penalty, PENALTY_METRICS),
                                  ("human_avg", self.human_avg, AVG_METRICS)):
            if set(table) != set(keys):
                raise ValueError(f"{name} must have keys {keys}, got {sorted(table)}")
            for k, v in table.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name}[{k}] = {v} outside [0, 1]")
        if set(self.weights) != set(AVG_METRICS):
            raise ValueError(f"weights must have keys {AVG_METRICS}")
        if any(w < 0 for w in self.weights.values()) or not sum(self.weights.values()) > 0:
            raise ValueError("weights must be >= 0 with a positive sum")


def _filtered(agent: float, human: float) -> float:
    return 1.0 if human < 0.5 else agent


def epdms_lite(inp: EpdmsInputs) -> float:
    pen = math.prod(_filtered(inp.penalty_scores[m], inp.human_penalty[m]) for m in PENALTY_METRICS)
    num = sum(inp.weights[m] * _filtered(inp.avg_scores[m], inp.human_avg[m]) for m in AVG_METRICS)
    return pen * num / sum(inp.weights.values())


def progress_score(traj, gt) -> float:
    """Projection of the planned endpoint onto the ground-truth displacement, clipped to [0, 1]."""
    g = np.asarray(gt, dtype=np.float64)[-1]
    n2 = float(g @ g)
    if n2 < 1e-12:
        return 1.0
    return float(np.clip(np.asarray(traj, dtype=np.float64)[-1] @ g / n2, 0.0, 1.0))


def ttc_score(traj, agents, dt: float, ego_radius: float = EGO_RADIUS, horizon: float = TTC_HORIZON,
              n_probe: int = 31) -> float:
    """Smallest time to contact along constant-velocity extrapolations, divided by ``horizon``.

    At each planned step the ego keeps its finite-difference velocity and every
    agent its recorded velocity; 1 means no contact within ``horizon``.
    """
    traj = np.asarray(traj, dtype=np.float64)
    agents = np.asarray(agents, dtype=np.float64)
    if agents.shape[1] == 0:
        return 1.0
    prev = np.vstack([np.zeros((1, 2)), traj[:-1]])
    v_ego = (traj - prev) / dt  # (T, 2)
    tau = np.linspace(0.0, horizon, n_probe)  # (P,)
    ego = traj[:, None, :] + tau[None, :, None] * v_ego[:, None, :]  # (T, P, 2)
    ax = agents[:, None, :, 0] + tau[None, :, None] * agents[:, None, :, 7]  # (T, P, A)
    ay = agents[:, None, :, 1] + tau[None, :, None] * agents[:, None, :, 8]
    d = point_rect_distance(ego[..., 0:1], ego[..., 1:2], ax, ay, agents[:, None, :, 4],
                            agents[:, None, :, 3], agents[:, None, :, 6])
    hit = np.any(d <= ego_radius, axis=2)  # (T, P)
    first = np.where(hit.any(axis=1), np.argmax(hit, axis=1), n_probe)
    t_min = float(np.min(first))
    return 1.0 if t_min >= n_probe else float(tau[int(t_min)] / horizon)


def lane_keeping_score(traj, lanes) -> float:
    """Fraction of planned points within LANE_TOLERANCE of some lane centerline."""
    traj = np.asarray(traj, dtype=np.float64)
    d = np.min(np.stack([point_polyline_distance(traj, lane) for lane in lanes]), axis=0)
    return float(np.mean(d < LANE_TOLERANCE))


def scene_subscores(traj, sample) -> tuple[dict, dict]:
    """Agent-side ``(penalty, avg)`` score tables for one scene."""
    agents = sample.future_agents()
    pen = {m: 1.0 for m in PENALTY_METRICS}
    avg = {m: 1.0 for m in AVG_METRICS}
    pen["NC"] = 0.0 if step_collisions(traj, agents).any() else 1.0
    avg["EP"] = progress_score(traj, sample.ego_future)
    avg["TTC"] = ttc_score(traj, agents, sample.spec.dt)
    avg["LK"] = lane_keeping_score(traj, sample.map_elements)
    return pen, avg


def scene_epdms(traj, sample, weights: dict | None = None) -> float:
    pen, avg = scene_subscores(traj, sample)
    hpen, havg = scene_subscores(sample.ego_future, sample)
    inp = EpdmsInputs(pen, avg, hpen, havg, **({"weights": weights} if weights else {}))
    return epdms_lite(inp)


def constant_velocity_plan(sample) -> np.ndarray:
    """Extrapolate the current ego velocity (ego frame) over the future horizon."""
    v = sample.ego_history[4:6, 0]
    steps = np.arange(1, sample.spec.t_fut + 1)[:, None] * sample.spec.dt
    return steps * v[None, :]


# --------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    l2: np.ndarray  # [1s, 2s, 3s, avg]
    collision: np.ndarray  # [1s, 2s, 3s, avg]
    mean_nll: float
    coverage: dict  # p -> empirical coverage
    epdms: float
    n_scenes: int
    mean_b: float = float("nan")
    wall_time_per_forward: float = float("nan")  # kept out of the CSV: not reproducible
    constant_metrics: tuple = CONSTANT_METRICS

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("l2", h, float(v)) for h, v in zip(HORIZON_LABELS, self.l2)]
        out += [("collision_rate", h, float(v)) for h, v in zip(HORIZON_LABELS, self.collision)]
        out.append(("mean_nll", "all", float(self.mean_nll)))
        out.append(("mean_b", "all", float(self.mean_b)))
        out += [(f"coverage@{p:g}", "all", float(v)) for p, v in sorted(self.coverage.items())]
        out.append(("epdms_lite", "all", float(self.epdms)))
        out += [(f"epdms_const_{m}", "all", 1.0) for m in self.constant_metrics]
        out.append(("n_scenes", "all", float(self.n_scenes)))
        return out

    def write_csv(self, path) -> None:
        write_metrics_csv(path, self.rows())

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        table = {(m, h): v for m, h, v in read_metrics_csv(path)}
        cov = {float(m.split("@")[1]): v for (m, _), v in table.items() if m.startswith("coverage@")}
        return cls(
            l2=np.array([table["l2", h] for h in HORIZON_LABELS]),
            collision=np.array([table["collision_rate", h] for h in HORIZON_LABELS]),
            mean_nll=table["mean_nll", "all"], coverage=cov, epdms=table["epdms_lite", "all"],
            n_scenes=int(table["n_scenes", "all"]), mean_b=table["mean_b", "all"],
        )


def write_metrics_csv(path, rows) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "horizon", "value"])
        for m, h, v in rows:
            w.writerow([m, h, repr(float(v))])


def read_metrics_csv(path) -> list[tuple[str, str, float]]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["metric", "horizon", "value"]:
            raise ValueError(f"{path}: expected header metric,horizon,value, got {header}")
        return [(m, h, float(v)) for m, h, v in r]
