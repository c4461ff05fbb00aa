"""Iterations to convergence and per-sample gradient time against string length.

    python scripts/scaling.py --config configs/desk_scaling.ini --out results
"""

import argparse
from pathlib import Path

from coed.harness import SCALING_HEADER, load_config, rows_to_csv, run_scaling

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk_scaling.ini")
    ap.add_argument("--out", default=ROOT / "results")
    ap.add_argument("--parallel-sweeps", action="store_true")
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows = run_scaling(cfg, args.parallel_sweeps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows, SCALING_HEADER)
    (out / "scaling.csv").write_text(text)
    print(text, end="")
    iters = [r["iters"] for r in rows]
    print(f"\nmax/min iterations: {max(iters) / min(iters):.2f} "
          f"(limit {cfg.design.max_iters})")


if __name__ == "__main__":
    main()
