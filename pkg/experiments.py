"""
Experiment harness for the hdg-bddc solver.

Runs the manufactured optimal control problem end to end (mesh, assembly,
condensation, subdomain operators, BDDC, GMRES, recovery) and sweeps cases
in the layout of the published iteration-count tables.
"""

import os
import csv
import json
import time
import asyncio
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import config
from config import ConfigurationError, SolverError
from config_experiments import (
    BETAS, CSV_COLUMNS, DEFAULT_PRIMAL, PRESETS, VELOCITY_BY_TEST, reference_iterations,
)
from bddc import PrimalFlags, all_primal_constraints, build_preconditioner, select_primal
from condensation import TraceSystem, InteriorFields, condense, recover_interior, split_BZ
from diagnostics import bound_factors, estimate_field_of_values, m_gamma_norm
from fespace import FeConfig, reference_tables
from hdg_assembly import ProblemConfig, check_stabilizers, resolve_velocity, stabilizers_for
from krylov import GmresConfig, gmres
from mesh import MeshConfig, build_structured_mesh, dump_mesh
from schur import backsolve_interior, build_subdomain_ops, interface_operator, interface_rhs

logger = logging.getLogger('hdg-bddc.experiments')

PI = np.pi


def exact_solution(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    y = sin^3(pi x1) sin^2(pi x2) cos(pi x2)
    p = -sin^2(pi x1) sin^2(pi x2) cos(pi x1)
    """
    x = np.asarray(x, dtype=float)
    a, b = PI * x[..., 0], PI * x[..., 1]
    y = np.sin(a) ** 3 * np.sin(b) ** 2 * np.cos(b)
    p = -np.sin(a) ** 2 * np.sin(b) ** 2 * np.cos(a)
    return y, p


def _derivatives(x: np.ndarray):
    """Gradients and Laplacians of the exact state and adjoint."""
    a, b = PI * x[..., 0], PI * x[..., 1]
    sa, ca, sb, cb = np.sin(a), np.cos(a), np.sin(b), np.cos(b)

    # y = S(x1) T(x2)
    S = sa ** 3
    dS = 3 * PI * sa ** 2 * ca
    d2S = 3 * PI ** 2 * sa * (2 * ca ** 2 - sa ** 2)
    T = sb ** 2 * cb
    dT = PI * sb * (2 * cb ** 2 - sb ** 2)
    d2T = PI ** 2 * cb * (2 * cb ** 2 - 7 * sb ** 2)
    grad_y = np.stack([dS * T, S * dT], axis=-1)
    lap_y = d2S * T + S * d2T

    # p = -P(x1) Q(x2)
    P = sa ** 2 * ca
    dP = PI * sa * (2 * ca ** 2 - sa ** 2)
    d2P = PI ** 2 * ca * (2 * ca ** 2 - 7 * sa ** 2)
    Q = sb ** 2
    dQ = 2 * PI * sb * cb
    d2Q = 2 * PI ** 2 * (cb ** 2 - sb ** 2)
    grad_p = -np.stack([dP * Q, P * dQ], axis=-1)
    lap_p = -(d2P * Q + P * d2Q)
    return grad_y, lap_y, grad_p, lap_p


def rhs(x: np.ndarray, beta: float, velocity) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sources of the scaled optimality system for the exact solution:
    f = sqrt(beta) (-lap y + zeta.grad y) - p and
    g = sqrt(beta) (-lap p - div(zeta p)) + y, with div(zeta p) = zeta.grad p.
    """
    x = np.asarray(x, dtype=float)
    zeta = resolve_velocity(velocity)(x)
    y, p = exact_solution(x)
    grad_y, lap_y, grad_p, lap_p = _derivatives(x)
    sqb = np.sqrt(beta)
    f = sqb * (-lap_y + np.sum(zeta * grad_y, axis=-1)) - p
    g = sqb * (-lap_p - np.sum(zeta * grad_p, axis=-1)) + y
    return f, g


def manufactured_problem(beta: float, velocity: str) -> ProblemConfig:
    return ProblemConfig(beta=beta, velocity=velocity,
                         f=lambda x: rhs(x, beta, velocity)[0],
                         g=lambda x: rhs(x, beta, velocity)[1])


@dataclass(frozen=True)
class CaseConfig:
    """One solver run."""
    test: int = 1
    k: int = config.DEFAULT_DEGREE
    beta: float = config.DEFAULT_BETA
    nsub: int = 4
    hh: int = 6
    tol: float = config.DEFAULT_GMRES_TOL
    primal: str = DEFAULT_PRIMAL
    all_primal: bool = False
    m_norm_history: bool = False
    max_iters: Optional[int] = None
    fov_samples: int = 0

    def __post_init__(self):
        if self.test not in VELOCITY_BY_TEST:
            raise ConfigurationError(f"test must be one of {sorted(VELOCITY_BY_TEST)}, got {self.test}")
        PrimalFlags.from_string(self.primal)
        if self.fov_samples < 0:
            raise ConfigurationError(f"fov_samples must be non-negative, got {self.fov_samples}")

    @property
    def velocity(self) -> str:
        return VELOCITY_BY_TEST[self.test]


@dataclass(frozen=True)
class ExperimentConfig:
    """A Cartesian sweep over beta and one of nsub / hh."""
    test: int = 1
    k: int = config.DEFAULT_DEGREE
    betas: Tuple[float, ...] = tuple(BETAS)
    sweep: str = "subdomains"
    nsub: Tuple[int, ...] = tuple(PRESETS["table1"]["nsub"])
    hh: Tuple[int, ...] = tuple(PRESETS["table1"]["hh"])
    tol: float = config.DEFAULT_GMRES_TOL
    primal: str = DEFAULT_PRIMAL
    output_dir: str = config.DEFAULT_OUTPUT_DIR

    def __post_init__(self):
        if self.test not in VELOCITY_BY_TEST:
            raise ConfigurationError(f"test must be one of {sorted(VELOCITY_BY_TEST)}, got {self.test}")
        if self.sweep not in ("subdomains", "hh"):
            raise ConfigurationError(f"sweep must be 'subdomains' or 'hh', got {self.sweep}")
        if not self.betas or any(b <= 0 for b in self.betas):
            raise ConfigurationError(f"betas must be positive, got {self.betas}")
        PrimalFlags.from_string(self.primal)

    @classmethod
    def from_preset(cls, preset: str, test: int, k: int, **overrides) -> "ExperimentConfig":
        if preset not in PRESETS:
            raise ConfigurationError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")
        p = PRESETS[preset]
        values = dict(test=test, k=k, sweep=p["sweep"], nsub=tuple(p["nsub"]), hh=tuple(p["hh"]))
        values.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**values)

    def cases(self) -> List[CaseConfig]:
        """Cases in table order: beta outer, swept column inner."""
        out = []
        for beta in self.betas:
            for nsub in self.nsub:
                for hh in self.hh:
                    out.append(CaseConfig(test=self.test, k=self.k, beta=beta, nsub=nsub, hh=hh,
                                          tol=self.tol, primal=self.primal))
        return out


@dataclass
class CaseResult:
    config: CaseConfig
    iterations: int = 0
    converged: bool = False
    breakdown: bool = False
    residual_history: List[float] = field(default_factory=list)
    m_norm_history: List[float] = field(default_factory=list)
    predicted_rate: List[float] = field(default_factory=list)
    final_true_res: float = float('nan')
    l2err_y: float = float('nan')
    l2err_p: float = float('nan')
    wall_ms: float = 0.0
    n_trace_dofs: int = 0
    n_gamma: int = 0
    n_primal: int = 0
    stabilizer_report: Dict[str, float] = field(default_factory=dict)
    observed_bounds: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def paper_ref_iters(self) -> Optional[int]:
        c = self.config
        return reference_iterations(c.test, c.k, c.beta, c.nsub, c.hh)

    @property
    def delta(self) -> Optional[int]:
        ref = self.paper_ref_iters
        if ref is None or self.error is not None:
            return None
        return self.iterations - ref

    def to_csv_row(self) -> Dict[str, Any]:
        c = self.config
        return {
            "test": c.test, "k": c.k, "beta": f"{c.beta:g}", "nsub": c.nsub, "hh": c.hh,
            "iters": self.iterations if self.error is None else "",
            "final_true_res": f"{self.final_true_res:.3e}",
            "l2err_y": f"{self.l2err_y:.6e}", "l2err_p": f"{self.l2err_p:.6e}",
            "wall_ms": f"{self.wall_ms:.0f}",
            "paper_ref_iters": "" if self.paper_ref_iters is None else self.paper_ref_iters,
            "delta": "" if self.delta is None else self.delta,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["paper_ref_iters"] = self.paper_ref_iters
        data["delta"] = self.delta
        return data


@contextmanager
def _stage(tag: str):
    """Re-raise failures with the pipeline stage they came from."""
    try:
        yield
    except SolverError as e:
        raise type(e)(f"[{tag}] {e}") from e
    except Exception as e:
        raise SolverError(f"[{tag}] {type(e).__name__}: {e}") from e


def l2_errors(ts: TraceSystem, fields: InteriorFields) -> Tuple[float, float]:
    """L2(Omega) errors of the recovered state and adjoint against the exact solution."""
    mesh = ts.mesh
    tables = reference_tables(ts.fe.degree)
    p = mesh.vertices[mesh.triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    detJ = np.abs(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0])
    xq = p[:, None, 0, :] + np.einsum('crs,qs->cqr', J, tables.tri_rule.points)
    w = tables.tri_rule.weights[None, :] * detJ[:, None]
    y_ex, p_ex = exact_solution(xq)
    y_h = fields.y @ tables.phi.T
    p_h = fields.p @ tables.phi.T
    return (float(np.sqrt(np.sum(w * (y_h - y_ex) ** 2))),
            float(np.sqrt(np.sum(w * (p_h - p_ex) ** 2))))


def run_case(cfg: CaseConfig, dump_mesh_path: Optional[str] = None) -> CaseResult:
    """
    Solve one manufactured problem with BDDC-preconditioned GMRES.

    Args:
        cfg (CaseConfig): The case.
        dump_mesh_path (str): Optional JSON path for the mesh.

    Returns:
        CaseResult: Iterations, residuals, errors and timing.
    """
    start = time.perf_counter()
    result = CaseResult(config=cfg)
    logger.info(f"Running test {cfg.test}, k={cfg.k}, beta={cfg.beta:g}, {cfg.nsub}x{cfg.nsub} subdomains, H/h={cfg.hh}")

    with _stage("mesh"):
        mesh = build_structured_mesh(MeshConfig(cfg.nsub, cfg.hh))
        if dump_mesh_path:
            dump_mesh(mesh, dump_mesh_path)
    with _stage("assemble"):
        fe = FeConfig(cfg.k)
        prob = manufactured_problem(cfg.beta, cfg.velocity)
        stab = stabilizers_for(mesh, cfg.velocity, fe)
        result.stabilizer_report = check_stabilizers(stab)
        logger.debug(f"Stabilizers: {result.stabilizer_report}")
        if result.stabilizer_report["C_K_min"] <= 0.0:
            logger.warning(f"Stabilizer margin is not positive: {result.stabilizer_report}")
    with _stage("condense"):
        ts = condense(mesh, fe, prob, stab)
    with _stage("schur"):
        ops = build_subdomain_ops(ts)
        g = interface_rhs(ops, ts)
        apply_S = interface_operator(ops, ts.trace.n_gamma)
    with _stage("bddc"):
        if cfg.all_primal:
            primal = all_primal_constraints(ts.trace)
        else:
            primal = select_primal(mesh, fe, cfg.velocity, PrimalFlags.from_string(cfg.primal))
        pre = build_preconditioner(ops, primal, ts.trace)
    with _stage("gmres"):
        callback = None
        if cfg.m_norm_history:
            B, _ = split_BZ(ts)
            callback = lambda x: m_gamma_norm(ts, ops, pre.apply(g - apply_S(x)), B=B)
        report = gmres(apply_S, pre.apply, g, GmresConfig(rel_tol=cfg.tol, max_iters=cfg.max_iters),
                       callback=callback)
        if cfg.fov_samples:
            result.observed_bounds = estimate_field_of_values(ts, ops, apply_S, pre.apply, samples=cfg.fov_samples)
    with _stage("recover"):
        lam = backsolve_interior(ops, ts, report.solution)
        fields = recover_interior(ts, lam)
        b_norm = np.linalg.norm(ts.b)
        result.final_true_res = float(np.linalg.norm(ts.b - ts.A @ lam) / b_norm) if b_norm > 0 else 0.0
        result.l2err_y, result.l2err_p = l2_errors(ts, fields)

    factors = bound_factors(cfg.beta, mesh.H, mesh.h)
    result.iterations = report.iterations
    result.converged = report.converged
    result.breakdown = report.breakdown
    result.residual_history = [float(r) for r in report.residual_history]
    result.m_norm_history = [float(r) for r in report.extra_history]
    result.predicted_rate = [factors.predicted_rate(i) for i in range(report.iterations + 1)]
    result.n_trace_dofs = ts.num_dofs
    result.n_gamma = ts.trace.n_gamma
    result.n_primal = primal.n_primal
    result.wall_ms = (time.perf_counter() - start) * 1000.0
    logger.info(f"Case done: {result.iterations} iterations, true residual {result.final_true_res:.2e}, "
                f"L2 errors y={result.l2err_y:.3e} p={result.l2err_p:.3e}, {result.wall_ms:.0f} ms")
    return result


class TableRunner:
    """Runs the cases of a sweep concurrently and collects the results in sweep order."""

    def __init__(self, workers: int = config.DEFAULT_WORKERS):
        self.workers = max(1, int(workers))
        self.results: List[CaseResult] = []

    async def run_case_async(self, cfg: CaseConfig) -> CaseResult:
        loop = asyncio.get_running_loop()
        try:
            return await loop.run_in_executor(None, run_case, cfg)
        except Exception as e:
            logger.error(f"Case test={cfg.test} k={cfg.k} beta={cfg.beta:g} nsub={cfg.nsub} hh={cfg.hh} failed: {e}")
            return CaseResult(config=cfg, error=str(e))

    async def process_batch(self, cases: List[CaseConfig]) -> List[CaseResult]:
        semaphore = asyncio.Semaphore(self.workers)

        async def run_with_semaphore(cfg: CaseConfig):
            async with semaphore:
                return await self.run_case_async(cfg)

        logger.info(f"Starting sweep of {len(cases)} cases with {self.workers} worker(s)")
        results = await asyncio.gather(*[run_with_semaphore(cfg) for cfg in cases])
        self.results = list(results)
        return self.results

    def generate_report(self, results: List[CaseResult]) -> str:
        """Summary of the sweep including the deltas against the reference counts."""
        failed = [r for r in results if r.error is not None]
        not_converged = [r for r in results if r.error is None and not r.converged]
        deltas = [r.delta for r in results if r.delta is not None]
        lines = [
            "=" * 60,
            "SWEEP REPORT",
            "=" * 60,
            f"Cases run: {len(results)}",
            f"Failed: {len(failed)}",
            f"Not converged: {len(not_converged)}",
        ]
        if deltas:
            lines.append(f"Reference cells compared: {len(deltas)}, max |delta| = {max(abs(d) for d in deltas)}")
        lines.append("")
        lines.append(f"{'beta':>8} {'nsub':>5} {'hh':>4} {'iters':>6} {'ref':>5} {'delta':>6}")
        for r in results:
            c = r.config
            iters = "ERR" if r.error else str(r.iterations)
            ref = "" if r.paper_ref_iters is None else str(r.paper_ref_iters)
            delta = "" if r.delta is None else f"{r.delta:+d}"
            lines.append(f"{c.beta:>8g} {c.nsub:>5} {c.hh:>4} {iters:>6} {ref:>5} {delta:>6}")
        for r in failed:
            lines.append(f"  error (beta={r.config.beta:g}, nsub={r.config.nsub}, hh={r.config.hh}): {r.error}")
        return "\n".join(lines)


def run_table(cfg: ExperimentConfig, workers: int = config.DEFAULT_WORKERS) -> List[CaseResult]:
    """Run every case of a sweep; failures are recorded per row and the sweep continues."""
    runner = TableRunner(workers=workers)
    return asyncio.run(runner.process_batch(cfg.cases()))


def _ensure_dir_exists(dir_path: str):
    """Ensure directory exists, creating it if necessary."""
    if dir_path and not os.path.exists(dir_path):
        os.makedirs(dir_path)
        logger.debug(f"Created directory: {dir_path}")


def save_csv(results: List[CaseResult], file_path: str) -> str:
    """Write one CSV row per case in the fixed column order."""
    _ensure_dir_exists(os.path.dirname(file_path))
    with open(file_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.to_csv_row())
    logger.info(f"Saved {len(results)} row(s) to {file_path}")
    return file_path


def save_json(results: List[CaseResult], file_path: str) -> str:
    """Write the full results, including residual histories, as JSON."""
    _ensure_dir_exists(os.path.dirname(file_path))
    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump([r.to_dict() for r in results], f, indent=4, default=_json_default)
    logger.info(f"Saved JSON results to {file_path}")
    return file_path


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
