"""Two-stage training, evaluation and forward-pass benchmarking."""

from __future__ import annotations

import csv
import gc
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import laplace, metrics
from .config import RunConfig, TrainConfig
from .model import Batch, UncertaintyPlanner, collate
from .nn import sgd_step
from .scene import SceneSample, make_dataset

EVAL_CHUNK = 32  # scenes per evaluation work unit; fixed so results never depend on worker count


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss: float
    static: float
    dynamic: float
    plan: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def losses(self, stage: int | None = None) -> list[float]:
        return [r.loss for r in self.records if stage is None or r.stage == stage]

    def to_csv(self) -> str:
        rows = ["stage,epoch,loss,static,dynamic,plan"]
        rows += [f"{r.stage},{r.epoch},{r.loss!r},{r.static!r},{r.dynamic!r},{r.plan!r}" for r in self.records]
        return "\n".join(rows) + "\n"


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _clip(params, max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm


def train(model: UncertaintyPlanner, samples: list[SceneSample], tcfg: TrainConfig,
          log_fn=None) -> TrainLog:
    """Stage 1 updates everything but the planner; stage 2 updates all parameters.

    The loss is the same in both stages. Batches are reshuffled every epoch from
    a generator keyed by ``(tcfg.seed, stage, epoch)``.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    batch = collate(samples)
    log = TrainLog()
    params = list(model.params)
    trainable = {1: model.non_planner_params(), 2: params}
    epoch_id = 0
    for stage, n_epochs in ((1, tcfg.epochs_stage1), (2, tcfg.epochs_stage2)):
        for epoch in range(n_epochs):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([tcfg.seed, stage, epoch])))
            lr = tcfg.learning_rate_at(epoch, n_epochs)
            sums = np.zeros(4)
            for bi, idx in enumerate(_batches(batch.size, tcfg.batch_size, rng)):
                sub = _take(batch, idx)
                model.params.zero_grad()
                where = f"stage {stage}, epoch {epoch}, batch {bi}"
                try:
                    out, cache = model.forward(sub)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"{exc} at {where}") from None
                total, terms, grads = model.loss(sub, out, tcfg.w_plan)
                if not math.isfinite(total):
                    raise TrainingDiverged(f"loss is {total} at {where}")
                model.backward(cache, grads)
                _clip(trainable[stage], tcfg.grad_clip)
                sgd_step(trainable[stage], lr, tcfg.momentum)
                sums += len(idx) * np.array([total, terms["static"], terms["dynamic"], terms["plan"]])
            rec = EpochRecord(stage, epoch_id, *(sums / batch.size).tolist())
            log.records.append(rec)
            if log_fn is not None:
                log_fn(rec)
            epoch_id += 1
    model.params.zero_grad()
    for p in params:
        p.velocity[...] = 0.0
    return log


def _take(batch: Batch, idx) -> Batch:
    return Batch(**{k: (None if v is None else v[idx]) for k, v in vars(batch).items()})


# --------------------------------------------------------------------------
# evaluation


@dataclass
class _ChunkResult:
    l2: np.ndarray
    collision: np.ndarray
    epdms: np.ndarray
    nll_sum: float
    abs_sum: float
    b_sum: float
    covered: dict
    n_vertex: int
    seconds: float
    residual: np.ndarray = None
    scale: np.ndarray = None


def _vertex_stats(model: UncertaintyPlanner, out, batch: Batch):
    """Residuals and predicted scales for every probabilistic head (flattened per axis)."""
    res, sc = [], []
    for kind, target in (("static", batch.target_static), ("dynamic", batch.target_dynamic)):
        if model.cfg.head(kind).probabilistic:
            h = out[f"head_{kind}"]
            res.append((target - h.mu).ravel())
            sc.append(h.b.ravel())
    if not res:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(res), np.concatenate(sc)


def _eval_chunk(model: UncertaintyPlanner, chunk: list[SceneSample], epdms_weights, ego_radius,
                coverage_p, keep_vertices: bool) -> _ChunkResult:
    batch = collate(chunk)
    t0 = time.perf_counter()
    out, _ = model.forward(batch)
    seconds = time.perf_counter() - t0
    traj = out["traj"]
    l2 = metrics.l2_displacement(traj, batch.traj)
    col = np.stack([metrics.collision_rate(t, s.future_agents(), ego_radius) for t, s in zip(traj, chunk)])
    ep = np.array([metrics.scene_epdms(t, s, epdms_weights) for t, s in zip(traj, chunk)])
    r, b = _vertex_stats(model, out, batch)
    covered = {p: int(np.sum(np.abs(r) <= laplace.coverage_radius(b, p))) for p in coverage_p} if r.size else {}
    nll = float(np.sum(laplace.laplace_nll(0.0, r, b))) if r.size else 0.0
    return _ChunkResult(l2, col, ep, nll, float(np.sum(np.abs(r))), float(np.sum(b)), covered, r.size, seconds,
                        r if keep_vertices else None, b if keep_vertices else None)


@dataclass
class Evaluation:
    report: metrics.MetricsReport
    per_scene_l2: np.ndarray
    residual: np.ndarray = None
    scale: np.ndarray = None


def evaluate(model: UncertaintyPlanner, samples: list[SceneSample], *, workers: int = 1,
             epdms_weights: dict | None = None, ego_radius: float = metrics.EGO_RADIUS,
             coverage_p=(0.5, 0.9), keep_vertices: bool = False) -> Evaluation:
    """Metrics over ``samples``.

    Work is split into fixed chunks of EVAL_CHUNK scenes and merged in scene
    order; BLAS is pinned to one thread, so results are bit-identical for any
    ``workers``.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    chunks = [samples[i:i + EVAL_CHUNK] for i in range(0, len(samples), EVAL_CHUNK)]
    job = lambda c: _eval_chunk(model, c, epdms_weights, ego_radius, coverage_p, keep_vertices)  # noqa: E731
    with threadpool_limits(limits=1):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(job, chunks))
        else:
            parts = [job(c) for c in chunks]
    l2 = np.concatenate([p.l2 for p in parts])
    col = np.concatenate([p.collision for p in parts])
    ep = np.concatenate([p.epdms for p in parts])
    nv = sum(p.n_vertex for p in parts)
    nan = float("nan")
    report = metrics.MetricsReport(
        l2=l2.mean(axis=0), collision=col.mean(axis=0),
        mean_nll=sum(p.nll_sum for p in parts) / nv if nv else nan,
        coverage={q: sum(p.covered[q] for p in parts) / nv for q in coverage_p} if nv else {q: nan for q in coverage_p},
        epdms=float(ep.mean()), n_scenes=len(samples),
        mean_b=sum(p.b_sum for p in parts) / nv if nv else nan,
        wall_time_per_forward=sum(p.seconds for p in parts) / len(samples),
    )
    ev = Evaluation(report, l2[:, -1])
    if keep_vertices:
        ev.residual = np.concatenate([p.residual for p in parts])
        ev.scale = np.concatenate([p.scale for p in parts])
    return ev


# --------------------------------------------------------------------------
# datasets and end-to-end runs


def build_datasets(cfg: RunConfig) -> tuple[list[SceneSample], list[SceneSample]]:
    """Train scenes ``0..n_train-1`` and held-out scenes ``n_train..`` of the same stream."""
    spec = cfg.data.scene_spec()
    train_set = make_dataset(spec, cfg.noise, cfg.data.n_train, 0)
    test_set = make_dataset(spec, cfg.noise, cfg.data.n_test, cfg.data.n_train)
    return train_set, test_set


def run(cfg: RunConfig, train_set=None, test_set=None, *, workers: int = 1, log_fn=None):
    """Build, train and evaluate one model. Returns ``(model, log, evaluation)``."""
    if train_set is None:
        train_set, test_set = build_datasets(cfg)
    model = UncertaintyPlanner(cfg.model)
    log = train(model, train_set, cfg.train, log_fn)
    ev = evaluate(model, test_set, workers=workers, epdms_weights=cfg.epdms.weights(),
                  ego_radius=cfg.epdms.ego_radius)
    return model, log, ev


ABLATION_GRID = (
    ("baseline", dict(use_static_uncer=False, use_dynamic_uncer=False, use_gate=False)),
    ("+S", dict(use_static_uncer=True, use_dynamic_uncer=False, use_gate=False)),
    ("+D", dict(use_static_uncer=False, use_dynamic_uncer=True, use_gate=False)),
    ("+S+D", dict(use_static_uncer=True, use_dynamic_uncer=True, use_gate=False)),
    ("+S+D+Gate", dict(use_static_uncer=True, use_dynamic_uncer=True, use_gate=True)),
)


def ablation(cfg: RunConfig, seeds=(0, 1, 2), grid=ABLATION_GRID, workers: int = 1, log_fn=None):
    """Rows ``(arm, seed, report)`` with shared data per seed across arms."""
    rows = []
    for seed in seeds:
        scfg = cfg.with_seed(seed)
        train_set, test_set = build_datasets(scfg)
        for arm, switches in grid:
            _, _, ev = run(scfg.with_model(**switches), train_set, test_set, workers=workers)
            rows.append((arm, seed, ev.report))
            if log_fn is not None:
                log_fn(arm, seed, ev.report)
    return rows


def write_ablation_csv(rows, path) -> None:
    """Long format: ``arm,seed,metric,horizon,value``, one line per report row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "seed", "metric", "horizon", "value"])
        for arm, seed, report in rows:
            for m, h, v in report.rows():
                w.writerow([arm, seed, m, h, repr(float(v))])


def seed_average(rows, metric: str = "l2", horizon: str = "avg") -> dict:
    """Mean of one report entry per arm, over seeds, in grid order."""
    acc = {}
    for arm, _, report in rows:
        table = {(m, h): v for m, h, v in report.rows()}
        acc.setdefault(arm, []).append(table[metric, horizon])
    return {arm: float(np.mean(v)) for arm, v in acc.items()}


# --------------------------------------------------------------------------
# benchmark


@dataclass
class BenchResult:
    fps_baseline: float
    fps_uncer: float
    overhead_mean: float  # relative extra forward time of the uncertainty modules
    overhead_std: float
    params_baseline: int
    params_uncer: int
    params_delta_expected: int

    @property
    def params_delta(self) -> int:
        return self.params_uncer - self.params_baseline


def bench(cfg: RunConfig, n_iters: int = 100, repetitions: int = 5, n_scenes: int = 16,
          baseline_switches: dict | None = None, uncer_switches: dict | None = None) -> BenchResult:
    """Forward wall time with uncertainty modules off vs on, same seed and scenes.

    Each repetition times ``n_iters`` forwards per arm. The arm order flips
    every repetition so drift and order effects cancel; BLAS is pinned to one
    thread.
    """
    if n_iters < 100:
        raise ValueError("bench needs n_iters >= 100")
    off = baseline_switches or dict(use_static_uncer=False, use_dynamic_uncer=False, use_gate=False)
    on = uncer_switches or dict(use_static_uncer=True, use_dynamic_uncer=True, use_gate=True)
    m_off = UncertaintyPlanner(cfg.with_model(**off).model)
    m_on = UncertaintyPlanner(cfg.with_model(**on).model)
    batch = collate(make_dataset(cfg.data.scene_spec(), cfg.noise, n_scenes))
    times = np.zeros((repetitions, 2))
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()  # as timeit does: collector pauses would land on whichever arm is running
    try:
        with threadpool_limits(limits=1):
            for m in (m_off, m_on):  # warm-up
                m.forward(batch)
            for r in range(repetitions):
                for j in ((0, 1) if r % 2 == 0 else (1, 0)):
                    m = (m_off, m_on)[j]
                    t0 = time.perf_counter()
                    for _ in range(n_iters):
                        m.forward(batch)
                    times[r, j] = time.perf_counter() - t0
    finally:
        if gc_was_enabled:
            gc.enable()
    ratio = times[:, 1] / times[:, 0] - 1.0
    per_fwd = times.mean(axis=0) / n_iters
    return BenchResult(
        fps_baseline=n_scenes / per_fwd[0], fps_uncer=n_scenes / per_fwd[1],
        overhead_mean=float(ratio.mean()), overhead_std=float(ratio.std()),
        params_baseline=len_params(m_off), params_uncer=len_params(m_on),
        params_delta_expected=m_on.uncertainty_param_count() - m_off.uncertainty_param_count(),
    )


def len_params(model: UncertaintyPlanner) -> int:
    return sum(p.size for p in model.params)
