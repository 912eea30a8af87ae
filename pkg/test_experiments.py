#!/usr/bin/env python3
"""
Test script for the experiment harness: manufactured solution, single cases,
sweeps and result files. The table reproductions are slow and only run when
HDG_BDDC_RUN_SLOW=1 is set.
"""

import os
import csv
import json
import asyncio
import logging
import tempfile

import numpy as np
import pytest

from config import ConfigurationError
from config_experiments import BETAS, CSV_COLUMNS, reference_iterations
from experiments import (
    CaseConfig, CaseResult, ExperimentConfig, TableRunner, exact_solution, rhs, run_case, run_table,
    save_csv, save_json,
)
from hdg_assembly import resolve_velocity

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('test-experiments')

RUN_SLOW = os.getenv("HDG_BDDC_RUN_SLOW") == "1"


def test_exact_solution():
    """The manufactured state and adjoint vanish on the boundary and at the centre."""
    s = np.linspace(0.0, 1.0, 11)
    boundary = np.concatenate([
        np.column_stack([s, np.zeros_like(s)]), np.column_stack([s, np.ones_like(s)]),
        np.column_stack([np.zeros_like(s), s]), np.column_stack([np.ones_like(s), s]),
    ])
    y, p = exact_solution(boundary)
    assert np.abs(y).max() <= 1e-15 and np.abs(p).max() <= 1e-15
    y, p = exact_solution(np.array([0.5, 0.5]))
    assert abs(y) <= 1e-15 and abs(p) <= 1e-15
    logger.info("Exact solution test passed!")


def fd_sources(x, beta, velocity, step=1e-4):
    """Sources rebuilt from central differences of the exact solution."""
    zeta = resolve_velocity(velocity)(x)
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    y0, p0 = exact_solution(x)
    out = []
    for field in (0, 1):
        c = (y0, p0)[field]
        xp, xm = exact_solution(x + ex)[field], exact_solution(x - ex)[field]
        yp, ym = exact_solution(x + ey)[field], exact_solution(x - ey)[field]
        lap = (xp + xm + yp + ym - 4.0 * c) / step ** 2
        grad = np.stack([(xp - xm) / (2 * step), (yp - ym) / (2 * step)], axis=-1)
        out.append((lap, np.sum(zeta * grad, axis=-1)))
    (lap_y, adv_y), (lap_p, adv_p) = out
    f = np.sqrt(beta) * (-lap_y + adv_y) - p0
    g = np.sqrt(beta) * (-lap_p - adv_p) + y0
    return f, g


@pytest.mark.parametrize("velocity", ["test1", "test2"])
def test_sources_against_finite_differences(velocity):
    """Hard-coded derivatives agree with finite differences at random points."""
    x = np.random.default_rng(0).uniform(0.1, 0.9, size=(5, 2))
    for beta in (1.0, 1e-4):
        f, g = rhs(x, beta, velocity)
        f_fd, g_fd = fd_sources(x, beta, velocity)
        assert np.linalg.norm(f - f_fd) <= 1e-6 * np.linalg.norm(f)
        assert np.linalg.norm(g - g_fd) <= 1e-6 * np.linalg.norm(g)
    logger.info(f"Source test passed for {velocity}!")


def test_reference_lookup():
    assert reference_iterations(1, 1, 1.0, 4, 6) == 19
    assert reference_iterations(2, 1, 1.0, 8, 6) == 6
    assert reference_iterations(2, 1, 1e-8, 32, 6) == 5
    assert reference_iterations(1, 1, 1.0, 6, 20) == 29
    assert reference_iterations(1, 1, 1.0, 5, 6) is None
    assert reference_iterations(1, 3, 1.0, 4, 6) is None
    logger.info("Reference lookup test passed!")


def test_sweep_shape():
    """A table1-shaped sweep has 4 betas x 4 subdomain counts, beta outermost."""
    cases = ExperimentConfig.from_preset("table1", 1, 1).cases()
    assert len(cases) == 16
    assert [c.beta for c in cases[::4]] == BETAS
    assert [c.nsub for c in cases[:4]] == [4, 8, 16, 32]
    assert all(reference_iterations(c.test, c.k, c.beta, c.nsub, c.hh) is not None for c in cases)

    cases = ExperimentConfig.from_preset("table2", 2, 1, hh=(4, 8)).cases()
    assert len(cases) == 8 and {c.nsub for c in cases} == {6}
    logger.info("Sweep shape test passed!")


def test_run_case_small():
    """A small case converges with a small true residual and is reproducible."""
    cfg = CaseConfig(test=2, k=1, beta=1e-4, nsub=2, hh=3, tol=1e-11)
    first = run_case(cfg)
    assert first.error is None and first.converged
    assert 0 < first.iterations <= first.n_gamma
    assert first.final_true_res <= 1e-9
    assert np.isfinite(first.l2err_y) and np.isfinite(first.l2err_p)
    assert len(first.predicted_rate) == first.iterations + 1
    assert first.paper_ref_iters is None and first.delta is None

    second = run_case(cfg)
    assert second.iterations == first.iterations
    assert second.residual_history == first.residual_history
    assert second.l2err_y == first.l2err_y
    logger.info(f"Small case converged in {first.iterations} iterations")


def test_run_case_variants():
    """All-primal, M-norm history and the single subdomain case."""
    exact = run_case(CaseConfig(test=1, k=1, beta=1.0, nsub=2, hh=2, all_primal=True))
    assert exact.iterations == 1 and exact.converged

    tracked = run_case(CaseConfig(test=1, k=1, beta=1.0, nsub=2, hh=2, m_norm_history=True))
    assert len(tracked.m_norm_history) == tracked.iterations
    assert all(v >= 0.0 for v in tracked.m_norm_history)

    single = run_case(CaseConfig(test=1, k=1, beta=1.0, nsub=1, hh=4))
    assert single.n_gamma == 0 and single.iterations == 0 and single.converged
    assert single.final_true_res <= 1e-10
    assert single.observed_bounds == {}
    logger.info("Run case variant test passed!")


def test_run_case_reports_stabilizers_and_bounds():
    """Stabilizer checks are always reported; observed c_l and C_u on request."""
    result = run_case(CaseConfig(test=2, k=1, beta=1e-2, nsub=2, hh=2, fov_samples=4))
    report = result.stabilizer_report
    assert report["C_K_min"] >= 0.5
    assert report["identity_error"] <= 1e-14
    assert report["tau1_max"] >= 1.0
    bounds = result.observed_bounds
    assert set(bounds) == {"cl_observed", "Cu_observed"}
    assert 0.0 < bounds["cl_observed"] <= bounds["Cu_observed"]
    with pytest.raises(ConfigurationError):
        CaseConfig(fov_samples=-1)
    logger.info("Stabilizer and bound report test passed!")


def test_true_residual_on_finer_partition():
    """Eight by eight subdomains with the rotating flow still reach a true residual below 1e-9."""
    result = run_case(CaseConfig(test=2, k=1, beta=1.0, nsub=8, hh=6))
    assert result.converged
    assert result.final_true_res <= 1e-9, result.final_true_res
    logger.info(f"Finer partition reached true residual {result.final_true_res:.2e}")


def test_run_table_records_failures():
    """A failing case is recorded in its row and the sweep continues."""
    cases = [CaseConfig(test=1, k=1, beta=1.0, nsub=2, hh=2), CaseConfig(test=1, k=0, beta=1.0, nsub=2, hh=2)]
    runner = TableRunner(workers=2)
    results = asyncio.run(runner.process_batch(cases))
    assert results[0].error is None and results[0].converged
    assert results[1].error is not None and "assemble" in results[1].error
    assert results[1].to_csv_row()["iters"] == ""
    report = runner.generate_report(results)
    assert "SWEEP REPORT" in report and "Failed: 1" in report

    sweep = ExperimentConfig(test=1, k=1, betas=(1.0,), sweep="subdomains", nsub=(2,), hh=(2,))
    rows = run_table(sweep)
    assert len(rows) == 1 and rows[0].iterations == results[0].iterations
    logger.info("Failure recording test passed!")


def test_result_files():
    """CSV in the fixed column order and JSON with the residual histories."""
    result = CaseResult(config=CaseConfig(test=1, k=1, beta=1.0, nsub=4, hh=6), iterations=21, converged=True,
                        residual_history=[1.0, 0.1], final_true_res=1e-12, l2err_y=1e-3, l2err_p=2e-3, wall_ms=12.0)
    assert result.delta == 2
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = save_csv([result], os.path.join(tmp, "out", "table.csv"))
        with open(csv_path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            rows = list(reader)
            assert reader.fieldnames == CSV_COLUMNS
        assert rows[0]["iters"] == "21" and rows[0]["paper_ref_iters"] == "19" and rows[0]["delta"] == "2"

        json_path = save_json([result], os.path.join(tmp, "out", "table.json"))
        with open(json_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        assert data[0]["residual_history"] == [1.0, 0.1]
        assert data[0]["config"]["nsub"] == 4
    logger.info("Result file test passed!")


# Allowed (low, high) deviation from the published counts. Test I converges
# in fewer iterations than published for beta >= 1e-6 (see DESIGN.md).
DELTA_BANDS = {
    "table1": {1: (-9, 4), 2: (-4, 4)},
    "table2": {1: (-9, 5), 2: (-5, 5)},
}


def _check_row(preset, r):
    low, high = DELTA_BANDS[preset][r.config.test]
    assert r.error is None and r.converged, (r.config, r.error)
    assert r.final_true_res <= 1e-9, (r.config, r.final_true_res)
    assert low <= r.delta <= high, (r.config, r.iterations, r.paper_ref_iters)
    assert r.iterations <= 30


@pytest.mark.skipif(not RUN_SLOW, reason="set HDG_BDDC_RUN_SLOW=1 to run the table reproductions")
def test_table1_reproduction():
    """Iteration counts near the published table and independent of the subdomain count."""
    for test in (1, 2):
        cfg = ExperimentConfig.from_preset("table1", test, 1, nsub=(4, 8, 16))
        results = run_table(cfg)
        by_beta = {}
        for r in results:
            _check_row("table1", r)
            by_beta.setdefault(r.config.beta, {})[r.config.nsub] = r.iterations
        for beta, counts in by_beta.items():
            assert abs(counts[8] - counts[16]) <= 5, (test, beta, counts)
    logger.info("Table 1 reproduction passed!")


@pytest.mark.skipif(not RUN_SLOW, reason="set HDG_BDDC_RUN_SLOW=1 to run the table reproductions")
def test_table2_reproduction():
    """Iteration counts grow mildly and monotonically with H/h."""
    for test in (1, 2):
        cfg = ExperimentConfig.from_preset("table2", test, 1, hh=(4, 8, 16))
        results = run_table(cfg)
        by_beta = {}
        for r in results:
            _check_row("table2", r)
            by_beta.setdefault(r.config.beta, {})[r.config.hh] = r.iterations
        for beta, counts in by_beta.items():
            assert counts[4] <= counts[8] <= counts[16], (test, beta, counts)
            assert counts[16] - counts[4] <= 15
    logger.info("Table 2 reproduction passed!")


def main():
    """Run all tests."""
    logger.info("Starting experiment tests...")
    test_exact_solution()
    test_sources_against_finite_differences("test1")
    test_sources_against_finite_differences("test2")
    test_reference_lookup()
    test_sweep_shape()
    test_run_case_small()
    test_run_case_variants()
    test_run_case_reports_stabilizers_and_bounds()
    test_true_residual_on_finer_partition()
    test_run_table_records_failures()
    test_result_files()
    if RUN_SLOW:
        test_table1_reproduction()
        test_table2_reproduction()
    logger.info("All experiment tests passed!")


if __name__ == "__main__":
    main()
