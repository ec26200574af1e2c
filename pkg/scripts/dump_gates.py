"""Train the gated model and write gate heatmap CSVs for a few held-out scenes.

Each CSV has one row per ego-state feature and one column per history step,
so the learned emphasis can be plotted directly as a heatmap.

    python3 scripts/dump_gates.py --config configs/default.ini --scenes 0,1,2 --out out/gates
"""

import argparse
from pathlib import Path

import numpy as np

from bevuncert.config import load_config
from bevuncert.gate import EGO_FEATURES, GateSignal, time_labels, write_gate_csv
from bevuncert.model import collate
from bevuncert.train import build_datasets, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.ini")
    ap.add_argument("--scenes", default="0,1,2", help="positions in the held-out split")
    ap.add_argument("--out", default="out/gates")
    args = ap.parse_args()

    cfg = load_config(args.config).with_model(use_gate=True, history_mode="ego_matrix")
    train_set, test_set = build_datasets(cfg)
    model, _, ev = run(cfg, train_set, test_set)
    print(f"held-out avg L2 {ev.report.l2[-1]:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for pos in (int(s) for s in args.scenes.split(",")):
        s = test_set[pos]
        g = model.forward(collate([s]))[0]["gate"][0]
        write_gate_csv(out / f"gate_{s.name}.csv", GateSignal("ego", g), EGO_FEATURES)
        print(f"\n{s.name}")
        print(" " * 13 + "".join(f"{t:>7s}" for t in time_labels(g.shape[1])))
        for name, row in zip(EGO_FEATURES, np.asarray(g)):
            print(f"{name:>13s}" + "".join(f"{v:7.3f}" for v in row))


if __name__ == "__main__":
    main()
