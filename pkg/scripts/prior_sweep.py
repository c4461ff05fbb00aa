"""Post-experiment cost of the control-oriented design as prior information varies.

    python scripts/prior_sweep.py --config configs/desk_prior_sweep.ini --out results
"""

import argparse
from pathlib import Path

from coed.harness import PRIOR_HEADER, load_config, rows_to_csv, run_prior_sweep

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk_prior_sweep.ini")
    ap.add_argument("--out", default=ROOT / "results")
    ap.add_argument("--parallel-sweeps", action="store_true")
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows = run_prior_sweep(cfg, args.parallel_sweeps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows, PRIOR_HEADER)
    (out / "prior_sweep.csv").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
