"""Experiment runner and command-line interface.

Configs are INI files with four sections (``problem``, ``design``, ``eval``,
``sweep``) plus a top-level ``[run]`` seed. Arrays are comma lists. All CSV
outputs have fixed headers; only the timing columns vary between runs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .baselines import design_baseline, make_weight
from .designer import (DesignConfig, DesignError, design, initial_plan, reference_costs,
                       sample_costs)
from .grad import ALPHA1, ALPHA2, ControlObjective, batch_gradients
from .model import (InvalidModelError, LqrSpec, MatrixNormalPrior, car_string_lqr,
                    car_string_prior)

log = logging.getLogger("coed")

BETA_HEADER = ("method", "beta", "mean_cost", "ci95", "u_norm", "iters", "seconds")
SCALING_HEADER = ("n_cars", "n_x", "iters", "grad_sample_ms", "norm_final_objective")
PRIOR_HEADER = ("prior_trace", "mean_cost", "ci95", "p5", "p95")
METHODS = ("coed", "a_opt", "l_opt")


@dataclass
class ProblemConfig:
    n_cars: int = 3
    masses: tuple[float, ...] = ()        # empty: unit masses
    alphas: tuple[float, ...] = ()        # empty: unit drag
    Ts: float = 0.1
    noise_scale: float = 1e-2
    x0: tuple[float, ...] = ()            # control-task initial state; empty: preset
    prior_col_cov: tuple[float, ...] = () # diagonal of the column covariance; empty: preset
    prior_scale: float = 1.0
    N: int = 30
    T: int = 20
    position_weight: float = 10.0


@dataclass
class DesignBlock:
    method: str = "coed"
    beta: float = 20.0
    eta0: float = 0.01
    baseline_eta0: float = 1e4
    decay: float = 0.995
    batch: int = 1000
    max_iters: int = 2000
    grad_window: int = 50
    grad_tol: float = 0.05
    relative_tol: bool = True
    workers: int = 1
    alpha1: float = ALPHA1
    alpha2: float = ALPHA2


@dataclass
class EvalConfig:
    n_samples: int = 100_000


@dataclass
class SweepConfig:
    methods: tuple[str, ...] = ("coed", "a_opt")
    betas: tuple[float, ...] = (5.0, 10.0, 20.0, 50.0)
    n_cars: tuple[int, ...] = (2, 3, 4)
    prior_scales: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class RunConfig:
    seed: int = 0
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    design: DesignBlock = field(default_factory=DesignBlock)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> None:
        for m in (self.design.method, *self.sweep.methods):
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.eval.n_samples < 2:
            raise ValueError("eval.n_samples must be >= 2")
        p = self.problem
        for name in ("masses", "alphas"):
            v = getattr(p, name)
            if v and len(v) != p.n_cars:
                raise ValueError(f"problem.{name} needs {p.n_cars} entries, got {len(v)}")
        if p.x0 and len(p.x0) != 2 * p.n_cars - 1:
            raise ValueError(f"problem.x0 needs {2 * p.n_cars - 1} entries")
        if p.prior_col_cov and len(p.prior_col_cov) != 3 * p.n_cars - 1:
            raise ValueError(f"problem.prior_col_cov needs {3 * p.n_cars - 1} entries")
        self.design_config(self.design.beta, self.design.method).validate()

    def design_config(self, beta: float, method: str) -> DesignConfig:
        d = self.design
        return DesignConfig(beta=beta, eta0=d.eta0 if method == "coed" else d.baseline_eta0,
                            decay=d.decay, batch=d.batch, max_iters=d.max_iters,
                            grad_window=d.grad_window, grad_tol=d.grad_tol,
                            relative_tol=d.relative_tol, seed=self.seed, workers=d.workers,
                            alpha1=d.alpha1, alpha2=d.alpha2)


SECTIONS = {"problem": ProblemConfig, "design": DesignBlock, "eval": EvalConfig,
            "sweep": SweepConfig}

PRESETS = {
    # 3-car string with the published prior, horizons and smoothing constants
    "paper-carstring": """
[run]
seed = 0

[problem]
n_cars = 3
Ts = 0.1
noise_scale = 0.01
x0 = 0.0, -4.3, 0.0, 2.1, 2.5
prior_col_cov = 0.1, 0.01, 0.05, 0.1, 0.01, 0.05, 0.1, 0.05
N = 30
T = 20
position_weight = 10.0

[design]
method = coed
beta = 20.0
eta0 = 0.01
batch = 1000
alpha1 = 1000.0
alpha2 = 1000000.0

[eval]
n_samples = 100000
""",
}


# ---------------------------------------------------------------------------
# config text <-> dataclasses


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if typ in (int, float, str):
        return typ(text)
    # tuple[X, ...]
    inner = typ.__args__[0]
    return tuple(inner(t.strip()) for t in text.split(",") if t.strip())


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case (``Ts``, ``N``)
    cp.read_string(text)
    unknown = set(cp.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    blocks = {}
    for name, cls in SECTIONS.items():
        hints = get_type_hints(cls)
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in hints:
                    raise ValueError(f"unknown key {name}.{key}")
                values[key] = _parse_value(raw, hints[key])
        blocks[name] = cls(**values)
    seed = cp.getint("run", "seed", fallback=0)
    cfg = RunConfig(seed=seed, **blocks)
    cfg.validate()
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for name in SECTIONS:
        block = getattr(cfg, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format_value(getattr(block, f.name))}" for f in fields(block)]
        lines.append("")
    return "\n".join(lines)


def load_config(path: str | None = None, preset: str | None = None) -> RunConfig:
    if path is not None:
        return parse_config(Path(path).read_text())
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        return parse_config(PRESETS[preset])
    return RunConfig()


# ---------------------------------------------------------------------------
# problem construction


def build_problem(p: ProblemConfig) -> tuple[MatrixNormalPrior, LqrSpec]:
    prior = car_string_prior(p.n_cars, p.masses or None, p.alphas or None, p.Ts,
                             p.noise_scale, p.prior_col_cov or None, p.prior_scale)
    spec = car_string_lqr(p.n_cars, p.N, p.position_weight, p.noise_scale, p.x0 or None)
    return prior, spec


def for_cars(p: ProblemConfig, n_cars: int) -> ProblemConfig:
    """The same problem resized to ``n_cars`` (per-car lists fall back to presets)."""
    if n_cars == p.n_cars:
        return p
    return replace(p, n_cars=n_cars, masses=(), alphas=(), x0=(), prior_col_cov=())


def run_design(cfg: RunConfig, beta: float, method: str, problem: ProblemConfig | None = None,
               callback=None):
    prior, spec = build_problem(problem or cfg.problem)
    dcfg = cfg.design_config(beta, method)
    U0 = initial_plan(prior.n_u, (problem or cfg.problem).T, cfg.seed)
    if method == "coed":
        return design(prior, spec, dcfg, U0, callback=callback)
    return design_baseline(prior, spec, dcfg, make_weight(method, prior, spec), U0,
                           callback=callback)


def evaluate_costs(cfg: RunConfig, U: np.ndarray, problem: ProblemConfig | None = None
                   ) -> np.ndarray:
    prior, spec = build_problem(problem or cfg.problem)
    return sample_costs(prior, U, spec, cfg.eval.n_samples, cfg.seed, cfg.design.alpha1,
                        cfg.design.alpha2)


def _mean_ci(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(1.96 * x.std(ddof=1) / np.sqrt(x.size))


def _map(fn, items, parallel: bool):
    if not parallel or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=len(items)) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# sweeps


def run_beta_sweep(cfg: RunConfig, parallel: bool = False) -> list[dict]:
    """Design and evaluate every (beta, method) pair, plus the two reference rows."""
    prior, spec = build_problem(cfg.problem)
    lower, prior_only = reference_costs(prior, spec, cfg.eval.n_samples, cfg.seed)
    rows = []
    for name, c in (("lower_bound", lower), ("no_experiment", prior_only)):
        m, ci = _mean_ci(c)
        rows.append(dict(method=name, beta=0.0, mean_cost=m, ci95=ci, u_norm=0.0, iters=0,
                         seconds=0.0))

    def point(job):
        beta, method = job
        t0 = time.perf_counter()
        try:
            U, trace = run_design(cfg, beta, method)
            m, ci = _mean_ci(evaluate_costs(cfg, U))
            return dict(method=method, beta=beta, mean_cost=m, ci95=ci,
                        u_norm=float(np.linalg.norm(U)), iters=trace.iterations,
                        seconds=time.perf_counter() - t0)
        except (DesignError, FloatingPointError, InvalidModelError, np.linalg.LinAlgError) as e:
            log.error("design failed for %s at beta=%g: %s", method, beta, e)
            return dict(method=method, beta=beta, mean_cost=float("nan"), ci95=float("nan"),
                        u_norm=float("nan"), iters=-1, seconds=time.perf_counter() - t0)

    jobs = [(b, m) for b in cfg.sweep.betas for m in cfg.sweep.methods]
    return rows + _map(point, jobs, parallel)


def run_scaling(cfg: RunConfig, parallel: bool = False) -> list[dict]:
    """Control-oriented design for each string length at the configured beta."""

    def point(n):
        problem = for_cars(cfg.problem, n)
        prior, spec = build_problem(problem)
        U, trace = run_design(cfg, cfg.design.beta, "coed", problem)
        ms = _per_sample_ms(cfg, prior, spec, U)
        costs = evaluate_costs(cfg, U, problem)
        lower, _ = reference_costs(prior, spec, cfg.eval.n_samples, cfg.seed)
        return dict(n_cars=n, n_x=prior.n_x, iters=trace.iterations, grad_sample_ms=ms,
                    norm_final_objective=float(costs.mean() / lower.mean()))

    return _map(point, list(cfg.sweep.n_cars), parallel)


def _per_sample_ms(cfg: RunConfig, prior, spec, U, L: int = 256) -> float:
    t0 = time.perf_counter()
    batch_gradients(prior, U, ControlObjective(spec), L, cfg.seed, (99,), cfg.design.alpha1,
                    cfg.design.alpha2)
    return 1000.0 * (time.perf_counter() - t0) / L


def run_prior_sweep(cfg: RunConfig, parallel: bool = False) -> list[dict]:
    """Control-oriented design while scaling the prior column covariance."""

    def point(scale):
        problem = replace(cfg.problem, prior_scale=cfg.problem.prior_scale * scale)
        prior, _ = build_problem(problem)
        U, _ = run_design(cfg, cfg.design.beta, "coed", problem)
        costs = evaluate_costs(cfg, U, problem)
        m, ci = _mean_ci(costs)
        p5, p95 = np.percentile(costs, [5, 95])
        trace = float(np.trace(prior.noise_cov) * np.trace(np.linalg.inv(prior.col_precision)))
        return dict(prior_trace=trace, mean_cost=m, ci95=ci, p5=float(p5), p95=float(p95))

    return _map(point, list(cfg.sweep.prior_scales), parallel)


def rows_to_csv(rows: list[dict], header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_csv_cell(r[k], k) for k in header])
    return buf.getvalue()


def _csv_cell(v, key):
    if key == "seconds" or key == "grad_sample_ms":
        return f"{v:.3f}"
    return repr(v) if isinstance(v, float) else str(v)


def save_plan(path: Path, U: np.ndarray) -> None:
    np.savetxt(path, U, delimiter=",", fmt="%.17g")


def load_plan(path: Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coed", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="embedded config")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--workers", type=int, help="threads per gradient batch")
    common.add_argument("--parallel-sweeps", action="store_true",
                        help="run sweep points concurrently (rows keep sweep order)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", parents=[common], help="single design run")
    p.add_argument("--beta", type=float)
    p.add_argument("--method", choices=METHODS)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a stored input plan")
    p.add_argument("plan", help="headerless CSV, n_u rows by T columns")
    p.add_argument("--samples", type=int)

    sub.add_parser("sweep-beta", parents=[common], help="budget sweep")
    sub.add_parser("scaling", parents=[common], help="string-length sweep")
    sub.add_parser("prior-sweep", parents=[common], help="prior-information sweep")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.design.workers = args.workers
    if getattr(args, "beta", None) is not None:
        cfg.design.beta = args.beta
    if getattr(args, "method", None) is not None:
        cfg.design.method = args.method
    if getattr(args, "samples", None) is not None:
        cfg.eval.n_samples = args.samples
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "show-config":
        sys.stdout.write(serialize_config(cfg))
    elif args.command == "design":
        cb = None
        if args.verbose:
            cb = lambda r, U: log.info("iter %d step/eta %.4g objective %.6g",
                                       r.iteration, r.grad_norm, r.objective)
        U, trace = run_design(cfg, cfg.design.beta, cfg.design.method, callback=cb)
        save_plan(out / "U.csv", U)
        (out / "trace.csv").write_text(trace.to_csv())
        print(f"{cfg.design.method}: {trace.iterations} iterations, "
              f"converged={trace.converged}, ||U||_F={np.linalg.norm(U):.6g}")
    elif args.command == "evaluate":
        U = load_plan(Path(args.plan))
        m, ci = _mean_ci(evaluate_costs(cfg, U))
        print("mean_cost,ci95,u_norm")
        print(f"{m!r},{ci!r},{float(np.linalg.norm(U))!r}")
    else:
        runner, header, name = {
            "sweep-beta": (run_beta_sweep, BETA_HEADER, "beta_sweep.csv"),
            "scaling": (run_scaling, SCALING_HEADER, "scaling.csv"),
            "prior-sweep": (run_prior_sweep, PRIOR_HEADER, "prior_sweep.csv"),
        }[args.command]
        text = rows_to_csv(runner(cfg, args.parallel_sweeps), header)
        (out / name).write_text(text)
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
