"""Ablation grid (baseline, +S, +D, +S+D, +S+D+Gate) over several seeds.

Writes ``ablation.csv`` in long format and prints seed-averaged L2 and EPDMS.

    python3 scripts/run_ablation.py --config configs/ablation.ini --seeds 0,1,2 --out out/ablation
"""

import argparse
import time
from pathlib import Path

from bevuncert.config import load_config
from bevuncert.train import ablation, seed_average, write_ablation_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/ablation.ini")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="out/ablation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def log(arm, seed, rep):
        print(f"{arm:>10s} seed {seed}: l2 avg {rep.l2[-1]:.4f}  collision avg {rep.collision[-1]:.4f}  "
              f"epdms {rep.epdms:.4f}  [{time.perf_counter() - t0:.0f} s]", flush=True)

    rows = ablation(cfg, seeds, workers=args.workers, log_fn=log)
    write_ablation_csv(rows, out / "ablation.csv")
    l2, ep = seed_average(rows), seed_average(rows, "epdms_lite", "all")
    print(f"\n{'arm':>10s} {'avg L2':>8s} {'EPDMS':>8s}   (mean over seeds {args.seeds})")
    for arm in l2:
        print(f"{arm:>10s} {l2[arm]:8.4f} {ep[arm]:8.4f}")
    print(f"wrote {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
