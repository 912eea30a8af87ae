#!/usr/bin/env python3
"""
Test script for static condensation and the trace system.
The condensed solve is checked against the uncondensed global system.
"""

import logging

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from condensation import (
    bh_energy, condense, extend, l_form, m_inner, monolithic_system, recover_interior, split_BZ,
)
from experiments import l2_errors, manufactured_problem
from fespace import FeConfig, reference_tables
from hdg_assembly import ProblemConfig, condensation_layout, element_system, stabilizers_for
from mesh import MeshConfig, build_structured_mesh

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('test-condensation')


def make_system(n=2, m=2, k=1, beta=1.0, velocity="test1", manufactured=True):
    mesh = build_structured_mesh(MeshConfig(n, m))
    fe = FeConfig(k)
    prob = manufactured_problem(beta, velocity) if manufactured else ProblemConfig(beta=beta, velocity=velocity)
    stab = stabilizers_for(mesh, velocity, fe)
    return condense(mesh, fe, prob, stab)


def random_trace(ts, seed=0):
    return np.random.default_rng(seed).standard_normal(ts.num_dofs)


@pytest.mark.parametrize("n", [1, 2])
@pytest.mark.parametrize("m", [1, 2])
@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("beta", [1.0, 1e-4])
def test_monolithic_equivalence(n, m, k, beta):
    """Trace solution and recovered fields agree with the uncondensed solve."""
    ts = make_system(n, m, k, beta)
    K, rhs, n_int = monolithic_system(ts.mesh, ts.fe, ts.prob, ts.stab, ts.trace)
    full = spsolve(K.tocsc(), rhs)
    lam = spsolve(ts.A.tocsc(), ts.b)

    oracle_lam = full[n_int:]
    assert np.linalg.norm(lam - oracle_lam) <= 1e-9 * np.linalg.norm(oracle_lam)

    nP = ts.fe.n_element_basis
    n_el = ts.mesh.triangles.shape[0]
    blocks = full[:n_int].reshape(n_el, 2, 3, nP)
    fields = recover_interior(ts, lam)
    scale = np.max(np.abs(blocks))
    np.testing.assert_allclose(fields.value, blocks[:, :, 2], atol=1e-9 * scale)
    np.testing.assert_allclose(fields.flux, blocks[:, :, :2], atol=1e-9 * scale)
    logger.info(f"Monolithic equivalence passed for n={n}, m={m}, k={k}, beta={beta:g}")


def test_zero_data():
    """Zero sources give a zero load; a zero trace extends to zero fields."""
    ts = make_system(manufactured=False)
    assert np.all(ts.b == 0.0)
    fields = extend(ts, np.zeros(ts.num_dofs))
    assert np.all(fields.value == 0.0) and np.all(fields.flux == 0.0)
    fields = recover_interior(ts, np.zeros(ts.num_dofs))
    assert np.all(fields.value == 0.0)
    logger.info("Zero data test passed!")


def test_extension_solves_local_equations():
    """The extension satisfies the interior rows of every element system."""
    ts = make_system(k=2, velocity="test2", manufactured=False)
    lam = random_trace(ts, 1)
    fields = extend(ts, lam)
    interior, tr = condensation_layout(ts.fe)
    elements = np.array([0, 5, 11, 20])
    A, _, _ = element_system(ts.mesh, ts.fe, ts.prob, ts.stab, elements)
    nP = ts.fe.n_element_basis
    for c, element in enumerate(elements):
        x = np.concatenate([
            fields.flux[element, 0].ravel(), fields.value[element, 0],
            fields.flux[element, 1].ravel(), fields.value[element, 1],
        ])
        dofs = ts.trace.element_dofs[element]
        lam_K = np.where(dofs >= 0, lam[np.maximum(dofs, 0)], 0.0)
        residual = A[c][np.ix_(interior, interior)] @ x + A[c][np.ix_(interior, tr)] @ lam_K
        scale = np.linalg.norm(A[c]) * (np.linalg.norm(x) + np.linalg.norm(lam_K))
        assert np.linalg.norm(residual) <= 1e-12 * scale
        assert x.size == 6 * nP
    logger.info("Extension test passed!")


def test_symmetric_skew_split():
    """B is symmetric, Z is skew and A = B + Z."""
    ts = make_system(n=3, m=2, velocity="test2", beta=1e-4)
    B, Z = split_BZ(ts)
    assert abs(B - B.T).max() <= 1e-14 * abs(B).max()
    assert abs(Z + Z.T).max() <= 1e-14 * abs(B).max()
    assert abs(B + Z - ts.A).max() <= 1e-14 * abs(ts.A).max()
    lam = random_trace(ts, 2)
    norm_Z = abs(Z).max() * Z.shape[0]
    assert abs(lam @ (Z @ lam)) <= 1e-12 * norm_Z * (lam @ lam)
    logger.info("B/Z split test passed!")


@pytest.mark.parametrize("velocity", ["test1", "test2"])
def test_bh_energy_matches_quadratic_form(velocity):
    """b_h(lam, lam) from the element fields equals lam^T B lam."""
    ts = make_system(n=2, m=2, k=1, beta=0.01, velocity=velocity, manufactured=False)
    B, _ = split_BZ(ts)
    for seed in range(3):
        lam = random_trace(ts, seed)
        quad = float(lam @ (B @ lam))
        assert bh_energy(ts, lam) == pytest.approx(quad, rel=1e-10)
        assert quad > 0.0
    logger.info(f"b_h energy test passed for {velocity}!")


def test_l_form():
    """Zero, symmetry and agreement with a direct quadrature of the scalar extensions."""
    ts = make_system(n=2, m=1, k=2, velocity="test2", manufactured=False)
    lam = random_trace(ts, 4)
    s = random_trace(ts, 5)
    assert l_form(ts, np.zeros(ts.num_dofs), s) == 0.0
    assert l_form(ts, lam, s) == pytest.approx(l_form(ts, s, lam), rel=1e-12)

    tables = reference_tables(ts.fe.degree)
    mesh = ts.mesh
    values = extend(ts, lam).value
    detJ = 2.0 * mesh.triangle_areas()
    u_q = np.einsum('qi,cfi->cfq', tables.phi, values)
    expected = float(np.sum(tables.tri_rule.weights[None, None, :] * detJ[:, None, None] * u_q ** 2))
    assert l_form(ts, lam, lam) == pytest.approx(expected, rel=1e-12)

    B, _ = split_BZ(ts)
    assert m_inner(ts, lam, lam, B=B) == pytest.approx(float(lam @ (B @ lam)) + expected, rel=1e-12)
    logger.info("L-form test passed!")


def test_convergence_order():
    """L2 error of the recovered state decreases at second order for k = 1."""
    errors = []
    for m in (2, 4, 8):
        ts = make_system(n=2, m=m, k=1, beta=1.0, velocity="test1")
        lam = spsolve(ts.A.tocsc(), ts.b)
        err_y, err_p = l2_errors(ts, recover_interior(ts, lam))
        errors.append(err_y)
        logger.info(f"m={m}: L2 error y={err_y:.3e}, p={err_p:.3e}")
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    # the coarsest step is still pre-asymptotic
    assert orders[-1] >= 1.8, orders
    assert np.all(orders >= 1.5), orders
    logger.info("Convergence order test passed!")


def main():
    """Run all tests."""
    logger.info("Starting condensation tests...")
    for n in (1, 2):
        for m in (1, 2):
            for k in (1, 2):
                for beta in (1.0, 1e-4):
                    test_monolithic_equivalence(n, m, k, beta)
    test_zero_data()
    test_extension_solves_local_equations()
    test_symmetric_skew_split()
    test_bh_energy_matches_quadratic_form("test1")
    test_bh_energy_matches_quadratic_form("test2")
    test_l_form()
    test_convergence_order()
    logger.info("All condensation tests passed!")


if __name__ == "__main__":
    main()
