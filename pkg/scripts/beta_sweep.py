"""Budget sweep: control-oriented vs A-optimal post-experiment cost.

    python scripts/beta_sweep.py --config configs/desk_beta_sweep.ini --out results
"""

import argparse
from pathlib import Path

from coed.harness import BETA_HEADER, load_config, rows_to_csv, run_beta_sweep

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk_beta_sweep.ini")
    ap.add_argument("--out", default=ROOT / "results")
    ap.add_argument("--parallel-sweeps", action="store_true")
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows = run_beta_sweep(cfg, args.parallel_sweeps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows, BETA_HEADER)
    (out / "beta_sweep.csv").write_text(text)
    print(text, end="")

    ref = {r["method"]: r for r in rows[:2]}
    print(f"\nlower bound {ref['lower_bound']['mean_cost']:.1f}, "
          f"no experiment {ref['no_experiment']['mean_cost']:.1f}")
    by_beta = {}
    for r in rows[2:]:
        by_beta.setdefault(r["beta"], {})[r["method"]] = r
    for beta, d in by_beta.items():
        if "coed" in d and "a_opt" in d:
            c, a = d["coed"], d["a_opt"]
            gap = a["mean_cost"] - c["mean_cost"]
            sep = gap > c["ci95"] + a["ci95"]
            print(f"beta={beta:g}: a_opt - coed = {gap:.1f} (CIs separate: {sep})")


if __name__ == "__main__":
    main()
