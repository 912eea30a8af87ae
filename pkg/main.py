#!/usr/bin/env python3
"""
hdg-bddc: BDDC-preconditioned GMRES for the HDG discretization of an
elliptic distributed optimal control problem on the unit square.

Commands:
1. solve   - run one manufactured test case and report iterations and errors.
2. table   - sweep beta and the subdomain count (table1) or H/h (table2)
             and compare against the published iteration counts.
3. bounds  - evaluate the closed-form convergence bound factors.
"""

import os
import asyncio
import sys
import logging
from typing import Optional

import click

import config
from config import ConfigurationError, SolverError
from config_experiments import BETAS, DEFAULT_PRIMAL, PRESETS, PRIMAL_CHOICES
from diagnostics import bound_factors, remark_bounds
from experiments import (
    CaseConfig, ExperimentConfig, TableRunner, run_case, save_csv, save_json,
)

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('hdg-bddc')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3


def _set_verbose(verbose: bool):
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
        for handler in logging.getLogger().handlers:
            handler.setLevel(logging.DEBUG)
        logger.debug("Verbose mode enabled. All loggers set to DEBUG.")


def _parse_int_list(value: Optional[str]):
    if not value:
        return None
    try:
        return tuple(int(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected a comma separated list of integers, got '{value}'")


def _parse_float_list(value: Optional[str]):
    if not value:
        return None
    try:
        return tuple(float(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected a comma separated list of numbers, got '{value}'")


@click.group()
def cli():
    """BDDC-preconditioned GMRES for HDG optimal control problems."""


@cli.command()
@click.option('--test', 'test', type=click.Choice(['1', '2']), default='1', help='1: zeta=(1,0), 2: zeta=(x2,-x1)')
@click.option('--k', 'k', type=int, default=config.DEFAULT_DEGREE, help='Polynomial degree')
@click.option('--beta', type=float, default=config.DEFAULT_BETA, help='Regularization parameter')
@click.option('--nsub', type=int, default=4, help='Subdomains per side')
@click.option('--hh', type=int, default=6, help='Elements per subdomain side (H/h)')
@click.option('--tol', type=float, default=config.DEFAULT_GMRES_TOL, help='Relative preconditioned residual reduction')
@click.option('--primal', type=click.Choice(PRIMAL_CHOICES), default=DEFAULT_PRIMAL, help='Primal constraint families')
@click.option('--all-primal', is_flag=True, help='Make every interface dof primal (exact preconditioner)')
@click.option('--max-iters', type=int, default=None, help='GMRES iteration cap (default: interface size)')
@click.option('--m-norm-history', is_flag=True, help='Also record the residual history in the M-norm')
@click.option('--fov-samples', type=int, default=0, help='Random vectors for the observed c_l and C_u (0: skip)')
@click.option('--csv', 'csv_path', type=click.Path(), default=None, help='Write a one-row CSV')
@click.option('--json', 'json_path', type=click.Path(), default=None, help='Write the full result as JSON')
@click.option('--dump-mesh', 'dump_mesh_path', type=click.Path(), default=None, help='Write the mesh as JSON')
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose (DEBUG level) output')
def solve(test: str, k: int, beta: float, nsub: int, hh: int, tol: float, primal: str, all_primal: bool,
          max_iters: Optional[int], m_norm_history: bool, fov_samples: int, csv_path: Optional[str],
          json_path: Optional[str], dump_mesh_path: Optional[str], verbose: bool):
    """Solve one manufactured test case."""
    _set_verbose(verbose)
    try:
        cfg = CaseConfig(test=int(test), k=k, beta=beta, nsub=nsub, hh=hh, tol=tol, primal=primal,
                         all_primal=all_primal, m_norm_history=m_norm_history, max_iters=max_iters,
                         fov_samples=fov_samples)
        result = run_case(cfg, dump_mesh_path=dump_mesh_path)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except SolverError as e:
        logger.error(f"Solver failed: {e}", exc_info=True)
        sys.exit(EXIT_FAILURE)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        sys.exit(EXIT_FAILURE)

    if csv_path:
        save_csv([result], csv_path)
    if json_path:
        save_json([result], json_path)

    ref = result.paper_ref_iters
    ref_text = f" (reference {ref}, delta {result.delta:+d})" if ref is not None else ""
    click.echo(f"test={cfg.test} k={cfg.k} beta={cfg.beta:g} nsub={cfg.nsub} H/h={cfg.hh}: "
               f"{result.iterations} iterations{ref_text}, true residual {result.final_true_res:.2e}, "
               f"L2 error y {result.l2err_y:.3e}, p {result.l2err_p:.3e}")
    if result.observed_bounds:
        click.echo(f"observed c_l={result.observed_bounds['cl_observed']:.3e} "
                   f"C_u={result.observed_bounds['Cu_observed']:.3e}")
    if not result.converged:
        click.echo("GMRES did not converge", err=True)
        sys.exit(EXIT_NOT_CONVERGED)
    sys.exit(EXIT_OK)


@cli.command()
@click.option('--preset', type=click.Choice(sorted(PRESETS)), default='table1', help='Sweep layout')
@click.option('--test', 'test', type=click.Choice(['1', '2']), default='1', help='1: zeta=(1,0), 2: zeta=(x2,-x1)')
@click.option('--k', 'k', type=int, default=config.DEFAULT_DEGREE, help='Polynomial degree')
@click.option('--nsub', default=None, help='Comma separated subdomain counts (overrides the preset)')
@click.option('--hh', default=None, help='Comma separated H/h values (overrides the preset)')
@click.option('--betas', default=None, help=f"Comma separated betas (default: {','.join(f'{b:g}' for b in BETAS)})")
@click.option('--tol', type=float, default=config.DEFAULT_GMRES_TOL, help='Relative preconditioned residual reduction')
@click.option('--primal', type=click.Choice(PRIMAL_CHOICES), default=DEFAULT_PRIMAL, help='Primal constraint families')
@click.option('--workers', type=int, default=config.DEFAULT_WORKERS, help='Cases solved concurrently')
@click.option('--csv', 'csv_path', type=click.Path(), default=None, help='CSV output path')
@click.option('--json', 'json_path', type=click.Path(), default=None, help='JSON output path')
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose (DEBUG level) output')
def table(preset: str, test: str, k: int, nsub: Optional[str], hh: Optional[str], betas: Optional[str], tol: float,
          primal: str, workers: int, csv_path: Optional[str], json_path: Optional[str], verbose: bool):
    """Sweep beta and one mesh parameter in the layout of a published table."""
    _set_verbose(verbose)
    try:
        cfg = ExperimentConfig.from_preset(preset, int(test), k, nsub=_parse_int_list(nsub), hh=_parse_int_list(hh),
                                           betas=_parse_float_list(betas), tol=tol, primal=primal)
        cases = cfg.cases()
    except ConfigurationError as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)

    runner = TableRunner(workers=workers)
    results = asyncio.run(runner.process_batch(cases))

    csv_path = csv_path or os.path.join(cfg.output_dir, f"{preset}_test{test}_k{k}.csv")
    save_csv(results, csv_path)
    if json_path:
        save_json(results, json_path)
    click.echo(runner.generate_report(results))

    if any(r.error is not None for r in results):
        sys.exit(EXIT_FAILURE)
    if any(not r.converged for r in results):
        sys.exit(EXIT_NOT_CONVERGED)
    sys.exit(EXIT_OK)


@cli.command()
@click.option('--beta', type=float, required=True, help='Regularization parameter')
@click.option('--H', 'H', type=float, required=True, help='Subdomain size')
@click.option('--h', 'h', type=float, required=True, help='Mesh size')
@click.option('--delta', type=float, default=None, help='Also evaluate the beta = O(h^(2-delta)) simplification')
@click.option('--iterations', '-m', type=int, default=10, help='Iteration count for the predicted rate')
def bounds(beta: float, H: float, h: float, delta: Optional[float], iterations: int):
    """Evaluate the convergence bound factors (generic constants set to 1)."""
    try:
        factors = bound_factors(beta, H, h)
        simple = remark_bounds(beta, H, h, delta)
    except ConfigurationError as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(EXIT_CONFIG)

    row = factors.csv_row()
    click.echo(",".join(row.keys()))
    click.echo(",".join(f"{v:.6g}" for v in row.values()))
    click.echo(f"gamma1={factors.gamma1:.6g} alpha1={factors.alpha1:.6g} alpha2={factors.alpha2:.6g} "
               f"c1={factors.c1:.6g} c2={factors.c2:.6g} c3={factors.c3:.6g} c4={factors.c4:.6g}")
    click.echo(f"predicted rate after {iterations} iterations: {factors.predicted_rate(iterations):.6g}")
    label = "beta=O(1)" if delta is None else f"beta=O(h^{2 - delta:g})"
    click.echo(f"simplified ({label}): Cu={simple['Cu']:.6g} cl={simple['cl']:.6g}")


if __name__ == '__main__':
    cli()
