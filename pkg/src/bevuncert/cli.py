"""Command-line entry point: ``bevuncert <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage (including a failed check),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import calibration, gradcheck, scene
from .checkpoint import CheckpointError, load_into, save_checkpoint
from .config import ConfigError, RunConfig, format_config, load_config
from .gate import EGO_FEATURES, GateSignal, write_gate_csv
from .model import UncertaintyPlanner, collate
from .train import TrainingDiverged, bench, build_datasets, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="INI config with [model] [train] [data] [noise] [epdms]")
    p.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevuncert", description="Laplace vertex uncertainty stack on synthetic BEV scenes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/test scene datasets (JSONL)")
    _common(p)

    p = sub.add_parser("train", help="two-stage training; writes model.ckpt and train_log.csv")
    _common(p, config_required=True)
    p.add_argument("--data", help="directory holding train.jsonl (generated from the config if omitted)")

    p = sub.add_parser("eval", help="metrics CSV for a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory holding test.jsonl")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("calibrate", help="scale recovery, occlusion asymmetry and coverage")
    _common(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (ignored when --seed is given)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p)
    p.add_argument("--n-seeds", type=int, default=10)

    p = sub.add_parser("bench", help="forward-pass overhead of the uncertainty modules")
    _common(p)
    p.add_argument("--n-iters", type=int, default=100)
    p.add_argument("--repetitions", type=int, default=5)

    p = sub.add_parser("gate-dump", help="gate heatmap CSVs for named test scenes")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", default="scene-0000", help="comma-separated scene names or indices")
    p.add_argument("--data", help="directory holding test.jsonl")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(cfg: RunConfig, data_dir, which: str):
    if data_dir:
        return scene.read_dataset(Path(data_dir) / f"{which}.jsonl")
    return build_datasets(cfg)[0 if which == "train" else 1]


def _model(cfg: RunConfig, ckpt) -> UncertaintyPlanner:
    m = UncertaintyPlanner(cfg.model)
    load_into(m.params, ckpt)
    return m


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    train_set, test_set = build_datasets(cfg)
    scene.write_dataset(train_set, out / "train.jsonl")
    scene.write_dataset(test_set, out / "test.jsonl")
    print(f"wrote {len(train_set)} train and {len(test_set)} test scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    samples = _split(cfg, args.data, "train")
    model = UncertaintyPlanner(cfg.model)
    log = train(model, samples, cfg.train,
                lambda r: print(f"stage {r.stage} epoch {r.epoch:3d} loss {r.loss:.4f} "
                                f"(static {r.static:.4f} dynamic {r.dynamic:.4f} plan {r.plan:.4f})"))
    save_checkpoint(model.params, out / "model.ckpt")
    (out / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    (out / "config.ini").write_text(format_config(cfg), encoding="utf-8")
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    model = _model(cfg, args.checkpoint)
    ev = evaluate(model, _split(cfg, args.data, "test"), workers=args.workers,
                  epdms_weights=cfg.epdms.weights(), ego_radius=cfg.epdms.ego_radius)
    ev.report.write_csv(out / "metrics.csv")
    for m, h, v in ev.report.rows():
        print(f"{m:>20s} {h:>4s} {v:.6g}")
    print(f"forward time per scene: {ev.report.wall_time_per_forward * 1e3:.3f} ms")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    seeds = [args.seed] if args.seed is not None else [int(s) for s in args.seeds.split(",") if s.strip()]
    result = calibration.run_calibration(cfg, seeds, log_fn=print)
    result.write_csv(out / "calibration.csv")
    print(f"wrote {out / 'calibration.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = args.seed if args.seed is not None else 0
    results = gradcheck.run_all(range(start, start + args.n_seeds))
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    if args.out:
        out = _out(args)
        lines = ["check,seed,max_rel_error"] + [f"{r.name},{r.seed},{r.error!r}" for r in results]
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [n for n, e in worst.items() if not e < gradcheck.TOLERANCE]
    for name, err in worst.items():
        print(f"{'FAIL' if name in failed else 'ok':4s} {name:24s} max rel err {err:.2e}")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out(args)
    r = bench(cfg, args.n_iters, args.repetitions)
    rows = [("fps_baseline", r.fps_baseline), ("fps_uncer", r.fps_uncer),
            ("overhead_mean", r.overhead_mean), ("overhead_std", r.overhead_std),
            ("params_baseline", r.params_baseline), ("params_uncer", r.params_uncer),
            ("params_delta", r.params_delta), ("params_delta_expected", r.params_delta_expected)]
    (out / "bench.csv").write_text("metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in rows), encoding="utf-8")
    for k, v in rows:
        print(f"{k:>22s} {v:.6g}")
    return EXIT_OK


def _scene_index(token: str) -> int:
    token = token.strip()
    return int(token.split("-")[-1]) if token.startswith("scene-") else int(token)


def cmd_gate_dump(args) -> int:
    cfg = _config(args)
    if not cfg.model.use_gate:
        raise ConfigError("gate-dump needs [model] use_gate = true")
    out = _out(args)
    model = _model(cfg, args.checkpoint)
    samples = {s.index: s for s in _split(cfg, args.data, "test")}
    for token in args.scenes.split(","):
        idx = _scene_index(token)
        if idx not in samples:
            raise ConfigError(f"scene {token!r} is not in the test split (indices {min(samples)}..{max(samples)})")
        s = samples[idx]
        g = model.forward(collate([s]))[0]["gate"][0]
        mode = "ego" if cfg.model.history_mode == "ego_matrix" else "temporal"
        path = out / f"gate_{s.name}.csv"
        write_gate_csv(path, GateSignal(mode, g), EGO_FEATURES)
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "calibrate": cmd_calibrate,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench, "gate-dump": cmd_gate_dump}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, scene.DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
