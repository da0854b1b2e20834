"""``infer`` command: runs the registered experiments and writes CSV files."""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .enkbf import (GaussianPrior, LinearReferenceSolution, analytic_linear_solution,
                    build_enkbf_problem, cubic_model, linear_model, run_ienkf,
                    two_member_ensemble)
from .flow import StepFailure, integrate
from .fokker_planck import (FlowConfig, bayes_target, build_fp_problem,
                            run_to_stationarity, shrink_initialise)
from .l63 import (DaConfig, EqualWeightingSettings, FilterDivergence, L63Params,
                  MidpointConvergenceError, run_twin_experiment)
from .numcore import ensemble_covariance, make_rng, sample_gaussian
from .solvers import SolverError

STEP_HEADER = ["tau", "mean", "variance", "potential", "gamma", "inner_iters"]
ANALYTIC_HEADER = STEP_HEADER + ["analytic_mean", "analytic_variance"]
CYCLE_HEADER = ["cycle", "time", "rmse_contribution", "mean_x", "mean_y", "mean_z",
                "weight_entropy"]
GRID_HEADER = ["alpha", "M", "K", "seed", "rmse"]

GRID_ALPHAS = (0.8, 0.85, 0.9, 0.95, 1.0)
GRID_SIZES = (15, 20, 25, 30, 35, 40, 45, 50)


@dataclass
class ExperimentConfig:
    experiment: str
    method: str = "dg"
    dtau: float = 0.1
    theta: float = 1.0
    particles: int = 2
    alpha: float = 1.0
    seed: int = 0
    tau_end: float = 1.0
    output_path: Optional[str] = None
    with_reference: bool = False
    cycles: int = 5000
    grid: bool = False
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        spec = REGISTRY.get(self.experiment)
        if spec is None:
            raise ValueError(f"unknown experiment {self.experiment!r}; "
                             f"expected one of {sorted(REGISTRY)}")
        if self.method not in spec.methods:
            raise ValueError(f"method {self.method!r} is not valid for {self.experiment}; "
                             f"legal values: {', '.join(spec.methods)}")
        if not self.dtau > 0:
            raise ValueError("dtau must be positive")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.particles < 2:
            raise ValueError("particles must be at least 2")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.tau_end > 0:
            raise ValueError("tau_end must be positive")
        if self.cycles < 1:
            raise ValueError("cycles must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        return self


@dataclass(frozen=True)
class ExperimentSpec:
    label: str
    methods: tuple
    defaults: dict
    runner: Callable[[ExperimentConfig], int]
    reference_dtau: Optional[float] = None


# --- CSV -------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def emit_csv(records: Iterable[Sequence], header: Sequence[str], path) -> Path:
    """Header plus one row per record, floats with 17 significant digits."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            if len(rec) != len(header):
                raise ValueError(f"record has {len(rec)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in rec])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(rows[0])))
    return rows[0], data


def step_rows(records, m: int, n_x: int = 1) -> list[tuple]:
    rows = []
    for r in records:
        x = np.reshape(r.z, (m, n_x))
        rows.append((r.tau, float(x.mean()), float(ensemble_covariance(x)[0, 0]),
                     r.potential_value, r.gamma, r.inner_iterations))
    return rows


# --- experiment runners ----------------------------------------------------

def _enkbf_setup(cfg: ExperimentConfig):
    if cfg.experiment == "enkbf-linear":
        om = linear_model([[1.0]], [[0.02]], [0.1])
        e0 = two_member_ensemble(0.5, 1.0) if cfg.particles == 2 else \
            sample_gaussian(make_rng(cfg.seed), [0.5], [[1.0]], cfg.particles)
    else:
        om = cubic_model(r=1.0, y=2.0)
        e0 = sample_gaussian(make_rng(cfg.seed), [-2.0], [[0.5]], cfg.particles)
    return om, e0


def _run_enkbf(cfg: ExperimentConfig, method: str, dtau: float):
    om, e0 = _enkbf_setup(cfg)
    if method == "ienkf":
        return run_ienkf(om, e0, dtau, cfg.tau_end)
    p = build_enkbf_problem(om, cfg.particles)
    return integrate(p, e0.ravel(), method, dtau, cfg.tau_end, theta=cfg.theta)


def _fp_setup(cfg: ExperimentConfig):
    if cfg.experiment == "fp-linear":
        mean, var, om = 0.5, 1.0, linear_model([[1.0]], [[0.02]], [0.1])
    else:
        mean, var, om = -2.0, 0.5, cubic_model(r=1.0, y=2.0)
    prior = sample_gaussian(make_rng(cfg.seed), [mean], [[var]], cfg.particles)
    x0, kernel = shrink_initialise(prior, cfg.alpha)
    fcfg = FlowConfig(alpha=cfg.alpha, tau_end=cfg.tau_end)
    problem = build_fp_problem(kernel, bayes_target([mean], [[var]], om), cfg.particles, fcfg)
    return problem, x0, fcfg


def _run_fp(cfg: ExperimentConfig, method: str, dtau: float):
    problem, x0, fcfg = _fp_setup(cfg)
    return run_to_stationarity(problem, x0, method, dtau, fcfg, theta=cfg.theta).records


def _default_out(cfg: ExperimentConfig) -> Path:
    if cfg.output_path:
        return Path(cfg.output_path)
    tag = "grid" if cfg.grid else cfg.method
    return Path(f"{cfg.experiment}-{tag}.csv")


def _reference_path(out: Path) -> Path:
    return out.with_name(out.stem + "-reference" + out.suffix)


def _finish_steps(cfg: ExperimentConfig, records, out: Path) -> None:
    rows = step_rows(records, cfg.particles)
    if cfg.experiment == "enkbf-linear":
        ref = LinearReferenceSolution(GaussianPrior(0.5, 1.0), r=0.02, y=0.1)
        rows = [r + analytic_linear_solution(ref, r[0]) for r in rows]
        emit_csv(rows, ANALYTIC_HEADER, out)
    else:
        emit_csv(rows, STEP_HEADER, out)
    last = rows[-1]
    print(f"{cfg.experiment} {cfg.method} dtau={cfg.dtau:g}: tau={last[0]:g} "
          f"mean={last[1]:.6g} variance={last[2]:.6g} -> {out}")


def run_steps(cfg: ExperimentConfig) -> int:
    spec = REGISTRY[cfg.experiment]
    run = _run_enkbf if cfg.experiment.startswith("enkbf") else _run_fp
    out = _default_out(cfg)
    _finish_steps(cfg, run(cfg, cfg.method, cfg.dtau), out)
    if cfg.with_reference:
        if spec.reference_dtau is None:
            print(f"{cfg.experiment}: analytic columns serve as the reference")
        else:
            ref_cfg = replace(cfg, method="ee", dtau=spec.reference_dtau)
            _finish_steps(ref_cfg, run(ref_cfg, "ee", spec.reference_dtau),
                          _reference_path(out))
    return 0


def _flow_settings(cfg: ExperimentConfig) -> EqualWeightingSettings:
    return EqualWeightingSettings(method=cfg.method, dtau=cfg.dtau, theta=cfg.theta)


def _grid_cell(args) -> tuple:
    alpha, m, k, seed, flow = args
    res = run_twin_experiment(L63Params(), DaConfig(cycles=k, ensemble_size=m,
                                                    alpha=alpha, seed=seed, flow=flow))
    return alpha, m, k, seed, res.rmse


def run_l63(cfg: ExperimentConfig) -> int:
    out = _default_out(cfg)
    if cfg.grid:
        cells = [(a, m, cfg.cycles, cfg.seed + i, _flow_settings(cfg))
                 for i, (a, m) in enumerate((a, m) for a in GRID_ALPHAS for m in GRID_SIZES)]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                rows = list(pool.map(_grid_cell, cells))
        else:
            rows = [_grid_cell(c) for c in cells]
        emit_csv(rows, GRID_HEADER, out)
        print(f"l63 grid ({len(rows)} cells, K={cfg.cycles}) -> {out}")
        return 0
    res = run_twin_experiment(L63Params(), DaConfig(
        cycles=cfg.cycles, ensemble_size=cfg.particles, alpha=cfg.alpha, seed=cfg.seed,
        flow=_flow_settings(cfg)))
    rows = [(r.cycle, r.time, r.rmse_contribution, r.mean_x, r.mean_y, r.mean_z,
             r.weight_entropy) for r in res.records]
    emit_csv(rows, CYCLE_HEADER, out)
    print(f"l63 M={cfg.particles} alpha={cfg.alpha:g} K={cfg.cycles}: rmse={res.rmse:.6g} -> {out}")
    return 0


REGISTRY: dict[str, ExperimentSpec] = {
    "enkbf-linear": ExperimentSpec(
        "linear-Gaussian EnKBF, M=2", ("ee", "si", "dg", "ienkf"),
        dict(method="dg", dtau=0.1, particles=2, tau_end=1.0), run_steps, None),
    "enkbf-nonlinear": ExperimentSpec(
        "nonlinear EnKBF, M=100", ("ee", "si", "dg", "ienkf"),
        dict(method="dg", dtau=0.01, particles=100, tau_end=1.0), run_steps, 0.00025),
    "fp-linear": ExperimentSpec(
        "linear Fokker-Planck particles", ("ee", "si", "dg"),
        dict(method="dg", dtau=0.1, particles=10, alpha=0.005, tau_end=10.0), run_steps, 2e-4),
    "fp-nonlinear": ExperimentSpec(
        "nonlinear Fokker-Planck particles", ("ee", "si", "dg"),
        dict(method="dg", dtau=0.05, particles=100, alpha=0.01, tau_end=10.0), run_steps, 2.5e-6),
    "l63": ExperimentSpec(
        "Lorenz-63 twin experiment", ("si", "dg"),
        dict(method="si", particles=20, alpha=1.0, cycles=5000), run_l63, None),
}


# --- configuration -----------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_CASTS = {"float": float, "int": int, "bool": lambda s: str(s).strip().lower() in ("1", "true", "yes", "on"),
          "str": str, "Optional[str]": str}
_KEY_ALIASES = {"out": "output_path"}


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment, keys may use dashes."""
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _KEY_ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in _FIELD_TYPES or key == "experiment":
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _CASTS[_FIELD_TYPES[key]](val)
    return values


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="infer", description="Gradient-flow Bayesian inference experiments.")
    ap.add_argument("experiment", choices=sorted(REGISTRY),
                    help="; ".join(f"{k}: {v.label}" for k, v in REGISTRY.items()))
    ap.add_argument("--method", choices=("ee", "si", "dg", "ienkf"))
    ap.add_argument("--dtau", type=float)
    ap.add_argument("--theta", type=float)
    ap.add_argument("--particles", type=int)
    ap.add_argument("--alpha", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--tau-end", dest="tau_end", type=float)
    ap.add_argument("--with-reference", dest="with_reference", action="store_true", default=None)
    ap.add_argument("--config", help="key = value file; command-line flags take precedence")
    ap.add_argument("--out", dest="output_path")
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--cycles", type=int, help="assimilation cycles K (l63)")
    ap.add_argument("--grid", action="store_true", default=None,
                    help="l63: run the full alpha x M grid")
    return ap


def parse_config(argv: Optional[Sequence[str]] = None) -> ExperimentConfig:
    ns = build_parser().parse_args(argv)
    merged = dict(REGISTRY[ns.experiment].defaults)
    if ns.config:
        merged.update(read_config_file(ns.config))
    merged.update({k: v for k, v in vars(ns).items()
                   if v is not None and k not in ("config", "experiment")})
    return ExperimentConfig(experiment=ns.experiment, **merged).validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_config(argv)
    except (ValueError, OSError) as exc:
        print(f"infer: error: {exc}", file=sys.stderr)
        return 2
    try:
        return REGISTRY[cfg.experiment].runner(cfg)
    except (StepFailure, FilterDivergence, MidpointConvergenceError, SolverError,
            FloatingPointError) as exc:
        print(f"infer: {cfg.experiment} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
