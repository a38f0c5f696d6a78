"""Experiment harness: named verification suites over a JSON-configured run.

Each suite computes a small set of scalar metrics, compares every metric
against its tolerance, and writes diff-able artifacts: ``results.json``
with per-metric pass/fail records, CSV series, and ``manifest.json``
with a content hash per file.  Runs are deterministic functions of
(config, seed); worker count only changes wall time.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import (
    CompactCoeffs,
    gateaux_derivative,
    hamiltonian_direction_value,
    solve_adjoint_bsde,
)
from .errors import ConfigError, HybridMPError, NonConvergence
from .lq import LQSolution, PiecewisePolyPolicy, solve_lq
from .model import LQSpec, ProblemSpec, validate_spec, zero_policy
from .pathsim import TimeGrid, chain_marginal, estimate_cost
from .parallel import RunningMoments, run_blocks
from .wonham import (
    coupled_forward,
    discrete_bayes_oracle,
    innovation_forward,
    run_normalized_filter,
    run_zakai_filter,
    transformed_cost_paths,
)

SUITES = ("filter-check", "mp-check", "lq-solve", "convergence-sweep")
SWEEP_STEPS = (250, 500, 1000, 2000)

ENV_PREFIX = "HYBRIDMP_"


@dataclass
class ExperimentConfig:
    """One harness run: which suite, on which problem, at what scale.

    Resolution order for seed/workers/out: explicit CLI argument, then
    HYBRIDMP_SEED / HYBRIDMP_WORKERS / HYBRIDMP_OUT environment
    variables, then the config file, then defaults.
    """

    suite: str
    spec: LQSpec
    n_steps: int = 1000
    n_paths: int = 1000
    seed: int = 42
    workers: int = 0
    out_dir: str = "results"
    tolerances: dict = field(default_factory=dict)
    write_paths: bool = False
    lq_max_iter: int = 50
    lq_damping: float = 0.5
    lq_tol: float = 1e-3

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; expected one of {SUITES}")
        if self.n_steps < 10:
            raise ConfigError(f"n_steps must be >= 10, got {self.n_steps}")
        if self.n_paths < 100:
            raise ConfigError(f"n_paths must be >= 100, got {self.n_paths}")
        if self.workers <= 0:
            self.workers = os.cpu_count() or 1

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.spec.horizon, self.n_steps)

    @property
    def problem(self) -> ProblemSpec:
        return self.spec.to_problem_spec()

    @classmethod
    def from_file(
        cls,
        path: str,
        seed: int | None = None,
        workers: int | None = None,
        out: str | None = None,
    ) -> "ExperimentConfig":
        cfg_path = Path(path)
        try:
            doc = json.loads(cfg_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")

        spec_entry = doc.get("spec")
        if isinstance(spec_entry, str):
            spec_path = Path(spec_entry)
            if not spec_path.is_absolute():
                spec_path = cfg_path.parent / spec_path
            try:
                spec_doc = json.loads(spec_path.read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read spec {spec_path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"spec {spec_path} is not valid JSON: {exc}") from exc
        elif isinstance(spec_entry, dict):
            spec_doc = spec_entry
        else:
            raise ConfigError("config needs 'spec': a path or an inline object")
        if not isinstance(spec_doc, dict):
            raise ConfigError("spec document must be a JSON object")

        def resolve(cli_value, env_name, file_value, default, cast):
            if cli_value is not None:
                return cast(cli_value)
            env = os.environ.get(ENV_PREFIX + env_name)
            if env is not None:
                return cast(env)
            if file_value is not None:
                return cast(file_value)
            return default

        return cls(
            suite=doc.get("suite", ""),
            spec=LQSpec.from_json(spec_doc),
            n_steps=int(doc.get("n_steps", 1000)),
            n_paths=int(doc.get("n_paths", 1000)),
            seed=resolve(seed, "SEED", doc.get("seed"), 42, int),
            workers=resolve(workers, "WORKERS", doc.get("workers"), 0, int),
            out_dir=resolve(out, "OUT", doc.get("out"), "results", str),
            tolerances=dict(doc.get("tolerances", {})),
            write_paths=bool(doc.get("write_paths", False)),
            lq_max_iter=int(doc.get("lq_max_iter", 50)),
            lq_damping=float(doc.get("lq_damping", 0.5)),
            lq_tol=float(doc.get("lq_tol", 1e-3)),
        )


def _metric(value: float, tolerance: float, comparator: str) -> dict:
    if comparator == "<=":
        ok = value <= tolerance
    elif comparator == ">=":
        ok = value >= tolerance
    elif comparator == "==":
        ok = value == tolerance
    else:
        raise ConfigError(f"unknown comparator {comparator!r}")
    return {
        "value": float(value),
        "tolerance": float(tolerance),
        "comparator": comparator,
        "pass": bool(ok),
    }


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def _tail_r2_min(adjoint) -> float:
    """Minimum fit R^2 away from the first few backward steps.

    Near t=0 a deterministic start leaves nothing to condition on, so
    the value-target variance and the R^2 are structurally ~0 there
    regardless of fit quality; the informative diagnostic is the
    minimum over the rest of the horizon.
    """
    skip = max(2, len(adjoint.r_squared) // 20)
    return float(adjoint.r_squared[skip:].min())


def _terminal_rmse(spec, grid, states, controls) -> float:
    fp = run_normalized_filter(spec, grid, states, controls)
    oracle = discrete_bayes_oracle(spec, grid, states, controls)
    return float(np.sqrt(np.mean((fp.probs[:, -1, 0] - oracle[:, -1, 0]) ** 2)))


def _filter_check(cfg: ExperimentConfig, out: Path) -> tuple[dict, list[Path]]:
    spec = cfg.problem
    grid = cfg.grid
    tol = cfg.tolerances
    T = spec.horizon
    nodes = sorted({min(int(round(f * grid.n_steps)), grid.n_steps)
                    for f in (0.25, 0.5, 1.0)})

    def block(offset, count):
        cp = coupled_forward(spec, grid, count, cfg.seed, path_offset=offset)
        moms = []
        for node in nodes:
            m = RunningMoments()
            m.add(cp.filter_path.probs[:, node, 0])
            moms.append(m)
        qv = RunningMoments()
        qv.add(np.abs(cp.filter_path.innovation_qv() - T) / T)
        return moms, qv

    pi_moms = [RunningMoments() for _ in nodes]
    qv_moms = RunningMoments()
    for moms, qv in run_blocks(block, cfg.n_paths, workers=cfg.workers):
        for acc, part in zip(pi_moms, moms):
            acc.merge(part)
        qv_moms.merge(qv)

    z_max = 0.0
    for node, m in zip(nodes, pi_moms):
        t = grid.times[node]
        target = chain_marginal(spec, t)[0]
        se = max(m.std_error, 1e-300)
        z_max = max(z_max, abs(m.mean - target) / se)

    n_check = min(cfg.n_paths, 100)
    cp = coupled_forward(spec, grid, n_check, cfg.seed)
    zk = run_zakai_filter(spec, grid, cp.bundle.states, cp.bundle.controls)
    per_path_sup = np.max(np.abs(zk.probs[..., 0] - cp.filter_path.probs[..., 0]),
                          axis=1)
    ks_gap = float(np.mean(per_path_sup))

    fine = TimeGrid(T, 2 * grid.n_steps)
    cp_f = coupled_forward(spec, fine, n_check, cfg.seed + 1)
    rmse_fine = _terminal_rmse(spec, fine, cp_f.bundle.states, cp_f.bundle.controls)
    rmse_coarse = _terminal_rmse(
        spec, grid, cp_f.bundle.states[:, ::2], cp_f.bundle.controls[:, ::2]
    )
    ratio = rmse_coarse / max(rmse_fine, 1e-300)

    metrics = {
        "tower_property_z": _metric(z_max, tol.get("tower_property_z", 3.0), "<="),
        "qv_error": _metric(qv_moms.mean, tol.get("qv_error", 0.05), "<="),
        "ks_zakai_sup_gap": _metric(
            ks_gap, tol.get("ks_zakai_sup_gap", 100.0 * grid.dt), "<="
        ),
        "oracle_rmse_ratio": _metric(
            ratio, tol.get("oracle_rmse_ratio", 1.2), ">="
        ),
    }

    files: list[Path] = []
    if cfg.write_paths:
        paths_csv = out / "paths.csv"
        cp.bundle.to_csv(str(paths_csv))
        filter_csv = out / "filter.csv"
        cp.filter_path.to_csv(str(filter_csv))
        files += [paths_csv, filter_csv]
    return metrics, files


def _direction_set(grid: TimeGrid, base, norm: float = 0.15) -> list:
    """Perturbation directions scaled to a common L2(dt) norm.

    The norm is kept small on purpose: the acceptance comparison uses a
    one-sided difference quotient, whose truncation term eps/2 * <v, J'' v>
    must stay inside the 0.1*eps allowance; for quadratic costs that
    bounds the direction size, not the step eps.
    """
    times = grid.times[:-1]
    shapes = [
        np.ones_like(times),
        np.sin(2.0 * np.pi * times / grid.horizon),
        np.exp(-times),
        np.cos(np.pi * times / grid.horizon),
    ]
    n = base.n_paths
    directions = [np.tile(s, (n, 1)) for s in shapes]
    directions.append(base.probs[:, :-1, 0].copy())
    scaled = []
    for w in directions:
        rms = math.sqrt(float(np.mean(np.sum(w * w, axis=1) * grid.dt)))
        scaled.append(w * (norm / max(rms, 1e-300)))
    return scaled


def _mp_check(cfg: ExperimentConfig, out: Path) -> tuple[dict, list[Path]]:
    spec = cfg.problem
    grid = cfg.grid
    tol = cfg.tolerances
    coeffs = CompactCoeffs(spec)
    eps = 1e-2

    base = innovation_forward(spec, grid, cfg.n_paths, cfg.seed,
                              policy=zero_policy(spec.control_domain))
    adjoint = solve_adjoint_bsde(spec, base, coeffs=coeffs)
    base_cost = transformed_cost_paths(spec, grid, base.states, base.probs,
                                       base.controls)

    directions = _direction_set(grid, base)

    gateaux_ratio = 0.0
    duality_ratio = 0.0
    for w in directions:
        pert = innovation_forward(spec, grid, cfg.n_paths, cfg.seed,
                                  controls=base.controls + eps * w,
                                  dnu=base.dnu)
        pert_cost = transformed_cost_paths(spec, grid, pert.states, pert.probs,
                                           pert.controls)
        fd_paths = (pert_cost - base_cost) / eps
        fd = float(np.mean(fd_paths))
        se_fd = float(np.std(fd_paths, ddof=1) / np.sqrt(cfg.n_paths))
        lin = gateaux_derivative(spec, base, w, coeffs)
        allowance = 3.0 * se_fd + 0.1 * eps
        gateaux_ratio = max(gateaux_ratio, abs(fd - lin) / allowance)

        dual = hamiltonian_direction_value(spec, base, adjoint, w, coeffs)
        scale = max(abs(lin), abs(dual), 1e-12)
        duality_ratio = max(duality_ratio, abs(lin - dual) / scale)

    metrics = {
        "gateaux_gap_ratio": _metric(
            gateaux_ratio, tol.get("gateaux_gap_ratio", 1.0), "<="
        ),
        "duality_rel_gap": _metric(
            duality_ratio, tol.get("duality_rel_gap", 0.05), "<="
        ),
        "bsde_min_r2": _metric(
            _tail_r2_min(adjoint), tol.get("bsde_min_r2", 0.5), ">="
        ),
    }
    return metrics, []


def _write_trace_csv(path: Path, solution: LQSolution) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "cost", "SE", "residual", "sup_control_change"])
        for row in solution.trace:
            writer.writerow([
                row["iteration"], f"{row['cost']:.10g}", f"{row['cost_se']:.10g}",
                f"{row['residual']:.10g}", f"{row['sup_change']:.10g}",
            ])


def _write_control_surface(path: Path, policy: PiecewisePolyPolicy,
                           grid: TimeGrid, x_lo: float, x_hi: float) -> None:
    import csv

    times = [0.0, 0.5 * grid.horizon, grid.times[-2]]
    xs = np.linspace(x_lo, x_hi, 21)
    ps = np.linspace(0.0, 1.0, 11)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "pi", "u"])
        for t in times:
            for x in xs:
                u_row = policy(t, np.full_like(ps, x), ps)
                for p, u in zip(ps, u_row):
                    writer.writerow([f"{t:.10g}", f"{x:.10g}", f"{p:.10g}",
                                     f"{u:.10g}"])


def _lq_solve(cfg: ExperimentConfig, out: Path) -> tuple[dict, list[Path]]:
    spec = cfg.problem
    grid = cfg.grid
    tol = cfg.tolerances
    try:
        solution = solve_lq(
            spec, grid, n_paths=cfg.n_paths, seed=cfg.seed,
            damping=cfg.lq_damping, tol=cfg.lq_tol, max_iter=cfg.lq_max_iter,
            keep_paths=True,
        )
        converged = 1.0
    except NonConvergence as exc:
        solution = exc.solution
        converged = 0.0

    residual0 = solution.trace[0]["residual"] if solution.trace else float("nan")
    final_res = solution.residual["residual"]
    ratio = final_res / residual0 if residual0 > 0 else 0.0

    r2_tail = (_tail_r2_min(solution.adjoint)
               if solution.adjoint is not None
               else solution.residual["per_step_r2_min"])
    metrics = {
        "converged": _metric(converged, 1.0, "=="),
        "cost_mean": _metric(
            solution.cost.mean, tol.get("cost_mean", float("inf")), "<="
        ),
        "stationarity_ratio": _metric(
            ratio, tol.get("stationarity_ratio", 1e-2), "<="
        ),
        "bsde_tail_r2_min": _metric(
            r2_tail, tol.get("bsde_tail_r2_min", 0.5), ">=",
        ),
    }

    trace_csv = out / "trace.csv"
    _write_trace_csv(trace_csv, solution)
    surface_csv = out / "control_surface.csv"
    if solution.path is not None:
        x_lo = float(np.quantile(solution.path.states, 0.01))
        x_hi = float(np.quantile(solution.path.states, 0.99))
    else:
        x_lo, x_hi = -2.0, 2.0
    _write_control_surface(surface_csv, solution.policy, grid, x_lo, x_hi)
    return metrics, [trace_csv, surface_csv]


def _convergence_sweep(cfg: ExperimentConfig, out: Path) -> tuple[dict, list[Path]]:
    import csv

    spec = cfg.problem
    tol = cfg.tolerances
    n_check = min(cfg.n_paths, 100)
    steps = list(SWEEP_STEPS)
    finest = max(steps)
    fine_grid = TimeGrid(spec.horizon, finest)
    cp = coupled_forward(spec, fine_grid, n_check, cfg.seed)

    rows = []
    for n_steps in steps:
        factor = finest // n_steps
        if finest % n_steps:
            raise ConfigError(f"sweep steps must divide {finest}")
        grid_k = TimeGrid(spec.horizon, n_steps)
        states = cp.bundle.states[:, ::factor]
        controls = cp.bundle.controls[:, ::factor]
        rmse = _terminal_rmse(spec, grid_k, states, controls)
        cost = estimate_cost(spec, grid_k, cfg.n_paths, cfg.seed,
                             policy=zero_policy(spec.control_domain),
                             workers=cfg.workers)
        rows.append((n_steps, rmse, cost.mean, cost.std_error))

    monotone = 1.0 if all(rows[i][1] > rows[i + 1][1] for i in range(len(rows) - 1)) else 0.0

    sweep_csv = out / "sweep.csv"
    with open(sweep_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_steps", "oracle_rmse", "cost_mean", "cost_se"])
        for n_steps, rmse, mean, se in rows:
            writer.writerow([n_steps, f"{rmse:.10g}", f"{mean:.10g}", f"{se:.10g}"])

    metrics = {
        "oracle_rmse_monotone": _metric(
            monotone, tol.get("oracle_rmse_monotone", 1.0), "=="
        ),
    }
    return metrics, [sweep_csv]


_SUITE_RUNNERS = {
    "filter-check": _filter_check,
    "mp-check": _mp_check,
    "lq-solve": _lq_solve,
    "convergence-sweep": _convergence_sweep,
}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def write_error(out_dir: str, exc: Exception) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"error": type(exc).__name__, "message": str(exc)}
    (out / "error.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def run_suite(cfg: ExperimentConfig) -> int:
    """Execute the configured suite; 0 all metrics pass, 1 any fail,
    2 on configuration or spec errors (error.json written)."""
    out = Path(cfg.out_dir)
    try:
        problems = validate_spec(cfg.problem)
        if problems:
            raise ConfigError("spec violates standing assumptions: "
                              + "; ".join(problems))
        out.mkdir(parents=True, exist_ok=True)
        metrics, files = _SUITE_RUNNERS[cfg.suite](cfg, out)
    except HybridMPError as exc:
        write_error(cfg.out_dir, exc)
        return 2

    all_pass = all(m["pass"] for m in metrics.values())
    results = {
        "suite": cfg.suite,
        "seed": cfg.seed,
        "spec": cfg.spec.to_json(),
        "grid": {"n_steps": cfg.n_steps, "n_paths": cfg.n_paths},
        "metrics": metrics,
        "pass": all_pass,
    }
    results_path = out / "results.json"
    results_path.write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    manifest = {p.name: _sha256(p) for p in [results_path, *files]}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0 if all_pass else 1


def validate_spec_file(path: str) -> tuple[int, list[str]]:
    """Load an LQ spec document and run the standing-assumption checks.
    Returns (exit code, messages): 0 clean, 1 violations, 2 unreadable."""
    from .model import load_spec

    try:
        spec = load_spec(path)
    except HybridMPError as exc:
        return 2, [f"{type(exc).__name__}: {exc}"]
    problems = validate_spec(spec)
    if problems:
        return 1, problems
    return 0, ["spec OK"]
