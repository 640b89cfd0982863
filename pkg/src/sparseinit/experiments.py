"""Experiment protocol: test cases, target generation, recovery metrics, studies."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .enhance import DEFAULT_REL_THRESHOLD, SparseSource, enhance
from .errors import EmptyField, SemanticError, SparseInitError, UnknownCase
from .gd import GdParams, run_gd
from .grid import Field, Grid2D, make_grid, norm
from .pde import Coefficients, Region, TimeStepOperator, assemble_operator, estimate_opnorm, nearest_node
from .pdhg import OptimizerResult, PdhgParams, beta_threshold, run_pdhg

logger = logging.getLogger(__name__)

REFERENCE_SOURCE = SparseSource(
    [(1.5, 0.5, 100.0), (1.0, 0.75, 85.0), (0.5, 0.5, 60.0), (0.75, 0.25, 90.0)]
)
METHODS = ("pdhg", "cp", "gd")


def case_regions(case_id: str, lx: float = 2.0, ly: float = 1.0) -> tuple[Region, ...]:
    half = lx / 2
    if case_id == "I":
        return (Region(0, lx, 0, ly, 0.05, 2.0, -2.0),)
    if case_id == "II":
        return (Region(0, half, 0, ly, 0.08, 1.0, 2.0), Region(half, lx, 0, ly, 0.05, 1.0, 2.0))
    if case_id == "III":
        return (Region(0, half, 0, ly, 0.05, 0.0, 0.0), Region(half, lx, 0, ly, 0.05, 0.0, -3.0))
    raise UnknownCase(f"unknown case {case_id!r}; expected I, II or III")


def steps_for(T: float, dt: float) -> int:
    ratio = T / dt
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise SemanticError(f"T={T!r} is not a positive integer multiple of dt={dt!r}")
    return n


@dataclass(frozen=True)
class ProblemConfig:
    """Everything needed to reproduce one identification run."""

    lx: float = 2.0
    ly: float = 1.0
    dx: float = 0.05
    dy: float = 0.05
    dt: float = 0.05
    T: float = 0.1
    regions: tuple[Region, ...] = field(default_factory=lambda: case_regions("I"))
    case_id: Optional[str] = "I"
    reference: SparseSource = REFERENCE_SOURCE
    scenario: str = "reachable"
    noise_level: float = 0.0
    seed: int = 0
    rng: str = "pcg64"
    method: str = "pdhg"
    pdhg: PdhgParams = PdhgParams()
    gd: GdParams = GdParams()
    beta_rel: Optional[float] = None
    rel_threshold: float = DEFAULT_REL_THRESHOLD
    diagnostics: bool = False
    solver: str = "auto"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        steps_for(self.T, self.dt)
        if self.scenario not in ("reachable", "noisy"):
            raise SemanticError(f"scenario must be 'reachable' or 'noisy', got {self.scenario!r}")
        if not 0 <= self.noise_level < 1:
            raise SemanticError(f"noise level must lie in [0, 1), got {self.noise_level!r}")
        if self.rng != "pcg64":
            raise SemanticError(f"unsupported generator {self.rng!r}; only 'pcg64' is available")
        if self.method not in METHODS:
            raise SemanticError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.beta_rel is not None and self.beta_rel < 0:
            raise SemanticError("beta_rel must be non-negative")
        if not 0 < self.rel_threshold < 1:
            raise SemanticError("rel_threshold must lie in (0, 1)")
        if len(self.reference) == 0:
            raise SemanticError("reference source has no atoms")

    @property
    def nsteps(self) -> int:
        return steps_for(self.T, self.dt)

    def grid(self) -> Grid2D:
        return make_grid(self.lx, self.ly, self.dx, self.dy)

    def operator(self) -> TimeStepOperator:
        grid = self.grid()
        return assemble_operator(grid, Coefficients(self.regions), self.dt, self.nsteps, self.solver)

    def replace(self, **changes) -> "ProblemConfig":
        return dataclasses.replace(self, **changes)


def make_case(case_id: str, dx: float = 0.05, dt: float = 0.05, T: float = 0.1, *, dy=None, **kw) -> ProblemConfig:
    """Preset for test Case I, II or III on ``(0,2) x (0,1)`` with the 4-atom reference."""
    regions = case_regions(case_id)
    return ProblemConfig(dx=dx, dy=dx if dy is None else dy, dt=dt, T=T, regions=regions, case_id=case_id, **kw)


def make_target(config: ProblemConfig, op: Optional[TimeStepOperator] = None) -> Field:
    """Final-time observation ``L u0_ref`` plus optional scaled Gaussian noise.

    The noise is i.i.d. standard normal per node from a PCG64 generator seeded
    with ``config.seed``, rescaled so that its L2 norm is exactly
    ``noise_level * ||L u0_ref||``.
    """
    op = op or config.operator()
    clean = op.forward(config.reference.to_field(op.grid).flat)
    if config.scenario == "reachable" or config.noise_level == 0.0:
        return Field.from_flat(op.grid, clean, "u_T")
    gen = np.random.Generator(np.random.PCG64(config.seed))
    delta = gen.standard_normal(clean.size)
    delta *= config.noise_level * np.linalg.norm(clean) / np.linalg.norm(delta)
    return Field.from_flat(op.grid, clean + delta, "u_T")


@dataclass
class Metrics:
    atom_count_match: bool
    location_error: float
    intensity_rel_errors: list[Optional[float]]
    final_misfit: float
    iterations: int = 0
    wall_time: float = 0.0

    @property
    def max_intensity_error(self) -> float:
        errs = [e for e in self.intensity_rel_errors if e is not None]
        if len(errs) < len(self.intensity_rel_errors) or not errs:
            return math.inf
        return max(errs)


def evaluate(recovered: SparseSource, reference: SparseSource, uT: Field, op: TimeStepOperator) -> Metrics:
    """Match reference atoms to recovered ones greedily (closest pair first).

    Distances are measured in mesh cells between snapped nodes.  An unmatched
    reference atom makes ``location_error`` infinite and clears
    ``atom_count_match``.
    """
    grid = op.grid
    ref_nodes = reference.snapped(grid)
    rec_nodes = recovered.snapped(grid)
    pairs = sorted(
        (math.hypot(ri - ci, rj - cj), k, m)
        for k, (ri, rj) in enumerate(ref_nodes)
        for m, (ci, cj) in enumerate(rec_nodes)
    )
    match: dict[int, tuple[int, float]] = {}
    used: set[int] = set()
    for dist, k, m in pairs:
        if k in match or m in used:
            continue
        match[k] = (m, dist)
        used.add(m)

    ref_alpha = reference.intensities
    rec_alpha = recovered.intensities
    errs: list[Optional[float]] = []
    for k in range(len(reference)):
        if k in match:
            a = ref_alpha[k]
            errs.append(abs(rec_alpha[match[k][0]] - a) / abs(a) if a != 0 else abs(rec_alpha[match[k][0]]))
        else:
            errs.append(None)
    all_matched = len(match) == len(reference)
    loc_err = max(d for _, d in match.values()) if all_matched and match else math.inf

    uT_norm = norm(uT)
    if len(recovered):
        final = op.forward(recovered.to_field(grid).flat)
        misfit = np.linalg.norm(final - uT.flat) * math.sqrt(grid.cell_area)
    else:
        misfit = uT_norm
    return Metrics(
        atom_count_match=all_matched and len(recovered) == len(reference),
        location_error=float(loc_err),
        intensity_rel_errors=[None if e is None else float(e) for e in errs],
        final_misfit=float(misfit / uT_norm) if uT_norm > 0 else float(misfit),
    )


@dataclass
class Report:
    """Outcome of one :func:`run_experiment` call."""

    config: ProblemConfig
    method: str
    params: dict
    beta0: float = math.nan
    opnorm: float = math.nan
    converged: bool = False
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    recovered: Optional[SparseSource] = None
    metrics: Optional[Metrics] = None
    empty_recovery: bool = False
    error: Optional[str] = None
    u0_star: Optional[Field] = None
    target: Optional[Field] = None
    final_state: Optional[Field] = None
    result: Optional[OptimizerResult] = field(default=None, repr=False)
    exception: Optional[SparseInitError] = field(default=None, repr=False, compare=False)
    wall_time: float = field(default=0.0, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None and not self.empty_recovery and self.converged


def optimizer_params(config: ProblemConfig, beta0: float, method: Optional[str] = None):
    """Effective parameter object for ``method`` with ``beta`` resolved."""
    method = method or config.method
    grid_beta = config.dx**4
    if config.beta_rel is not None:
        beta = config.beta_rel * beta0
    else:
        beta = None
    if method == "gd":
        prm = config.gd
        return dataclasses.replace(prm, beta=beta if beta is not None else (prm.beta if prm.beta is not None else grid_beta))
    prm = config.pdhg
    if method == "cp":
        prm = dataclasses.replace(prm, theta=1.0, rho=1.0, sigma=1.0)
    return dataclasses.replace(prm, beta=beta if beta is not None else (prm.beta if prm.beta is not None else grid_beta))


def run_optimizer(op, uT, config: ProblemConfig, method: str, beta0: float, opnorm: float) -> OptimizerResult:
    prm = optimizer_params(config, beta0, method)
    if method == "gd":
        return run_gd(op, uT, prm, opnorm=opnorm)
    return run_pdhg(op, uT, prm, opnorm=opnorm, diagnostics=config.diagnostics)


def run_experiment(config: ProblemConfig, method: Optional[str] = None) -> Report:
    """Target generation, optimization, enhancement and evaluation in one go.

    Component failures are captured in ``Report.error``; an identically zero
    control is flagged as ``empty_recovery``.
    """
    method = method or config.method
    report = Report(config=config, method=method, params={})
    t0 = time.perf_counter()
    try:
        op = config.operator()
        uT = make_target(config, op)
        report.target = uT
        report.beta0 = beta_threshold(op, uT)
        report.opnorm = estimate_opnorm(op)
        res = run_optimizer(op, uT, config, method, report.beta0, report.opnorm)
        report.result = res
        report.params = dataclasses.asdict(res.params)
        report.converged = res.converged
        report.iterations = res.iterations
        report.residual_history = list(res.residual_history)
        report.u0_star = res.u0_star
        try:
            report.recovered = enhance(res.u0_star, op, uT, config.rel_threshold)
        except EmptyField:
            report.empty_recovery = True
            report.recovered = SparseSource()
        report.metrics = evaluate(report.recovered, config.reference, uT, op)
        report.metrics.iterations = res.iterations
        if len(report.recovered):
            report.final_state = Field.from_flat(
                op.grid, op.forward(report.recovered.to_field(op.grid).flat), "u_hat_T"
            )
    except SparseInitError as exc:
        logger.warning("experiment failed: %s", exc)
        report.error = f"{type(exc).__name__}: {exc}"
        report.exception = exc
    report.wall_time = time.perf_counter() - t0
    if report.metrics is not None:
        report.metrics.wall_time = report.wall_time
    return report


def run_batch(configs: Sequence[ProblemConfig], workers: int = 1, method: Optional[str] = None) -> list[Report]:
    """Run independent configs on a bounded thread pool; order is preserved."""
    if workers <= 1 or len(configs) <= 1:
        return [run_experiment(c, method) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run_experiment(c, method), configs))


@dataclass
class BenchRow:
    variant: str
    iterations: Optional[int]
    err: Optional[float]
    cpu: float
    converged: bool
    error: Optional[str] = None


def _bench_one(op, uT, config, variant, beta0, opnorm) -> BenchRow:
    t0 = time.process_time()
    try:
        res = run_optimizer(op, uT, config, variant, beta0, opnorm)
    except SparseInitError as exc:
        return BenchRow(variant, None, None, time.process_time() - t0, False, f"{type(exc).__name__}: {exc}")
    err = res.residual_history[-1] if res.residual_history else 0.0
    return BenchRow(variant, res.iterations, err, time.process_time() - t0, res.converged)


def run_bench(config: ProblemConfig, variants: Sequence[str] = ("cp", "pdhg", "gd"), workers: int = 1) -> list[BenchRow]:
    """Compare optimizer variants on one problem; per-variant failures become rows."""
    for v in variants:
        if v not in METHODS:
            raise SemanticError(f"unknown bench variant {v!r}")
    op = config.operator()
    uT = make_target(config, op)
    beta0 = beta_threshold(op, uT)
    opnorm = estimate_opnorm(op)
    if workers <= 1:
        return [_bench_one(op, uT, config, v, beta0, opnorm) for v in variants]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: _bench_one(op, uT, config, v, beta0, opnorm), variants))


@dataclass
class MeshRow:
    dt: float
    dx: float
    iterations: Optional[int]
    converged: bool
    error: Optional[str] = None


def run_meshstudy(
    config: ProblemConfig,
    meshes: Sequence[tuple[float, float]],
    method: Optional[str] = None,
    workers: int = 1,
) -> list[MeshRow]:
    """Iteration counts of one method over several ``(dt, dx)`` pairs (``dy = dx``)."""
    method = method or config.method

    def one(pair):
        dt, dx = pair
        try:
            cfg = config.replace(dt=dt, dx=dx, dy=dx)
            op = cfg.operator()
            uT = make_target(cfg, op)
            res = run_optimizer(op, uT, cfg, method, beta_threshold(op, uT), estimate_opnorm(op))
        except SparseInitError as exc:
            return MeshRow(dt, dx, None, False, f"{type(exc).__name__}: {exc}")
        return MeshRow(dt, dx, res.iterations, res.converged)

    if workers <= 1:
        return [one(m) for m in meshes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, meshes))


def reference_nodes(config: ProblemConfig) -> list[tuple[int, int]]:
    grid = config.grid()
    return [nearest_node(grid, x, y) for x, y in config.reference.locations]


REPORT_SCHEMA = "sparseinit.report/1"


def _finite_or_none(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def config_to_dict(config: ProblemConfig) -> dict:
    d = {
        "grid": {"lx": config.lx, "ly": config.ly, "dx": config.dx, "dy": config.dy},
        "pde": {
            "case": config.case_id,
            "dt": config.dt,
            "T": config.T,
            "nsteps": config.nsteps,
            "solver": config.solver,
            "regions": [list(dataclasses.astuple(r)) for r in config.regions],
        },
        "source": [[a.x, a.y, a.intensity] for a in config.reference],
        "scenario": {
            "kind": config.scenario,
            "level": config.noise_level,
            "seed": config.seed,
            "rng": config.rng,
        },
        "optimizer": {"method": config.method, "diagnostics": config.diagnostics},
        "pdhg": dataclasses.asdict(config.pdhg),
        "gd": dataclasses.asdict(config.gd),
        "beta_rel": config.beta_rel,
        "enhance": {"rel_threshold": config.rel_threshold},
    }
    return d


def report_to_dict(report: Report, files: Optional[dict] = None) -> dict:
    """JSON-ready view of a report; infinities become ``null``."""
    m = report.metrics
    metrics = None
    if m is not None:
        metrics = {
            "atom_count_match": m.atom_count_match,
            "location_error": _finite_or_none(m.location_error),
            "intensity_rel_errors": [_finite_or_none(e) for e in m.intensity_rel_errors],
            "final_misfit": _finite_or_none(m.final_misfit),
            "iterations": m.iterations,
            "wall_time": m.wall_time,
        }
    return {
        "schema": REPORT_SCHEMA,
        "method": report.method,
        "converged": report.converged,
        "iterations": report.iterations,
        "empty_recovery": report.empty_recovery,
        "error": report.error,
        "beta0": _finite_or_none(report.beta0),
        "opnorm": _finite_or_none(report.opnorm),
        "params": report.params,
        "config": config_to_dict(report.config),
        "metrics": metrics,
        "residual_history": list(report.residual_history),
        "recovered": None
        if report.recovered is None
        else [{"x": a.x, "y": a.y, "intensity": a.intensity} for a in report.recovered],
        "files": dict(files or {}),
        "wall_time": report.wall_time,
    }
