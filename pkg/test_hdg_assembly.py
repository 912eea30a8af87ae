#!/usr/bin/env python3
"""
Test script for the HDG element assembly.
Compares the vectorised element matrices against a term-by-term loop
assembly and checks the stabilizer choice and the block structure.
"""

import logging

import numpy as np
import pytest

from config import ConfigurationError
from fespace import FeConfig, edge_quadrature, eval_basis, reference_tables, triangle_quadrature
from hdg_assembly import (
    FIELD_SIGNS, ProblemConfig, assemble_load, assemble_local, check_stabilizers, element_edge_geometry,
    local_sizes, resolve_velocity, rotating_flow, stabilizers_for,
)
from mesh import LOCAL_EDGES, MeshConfig, build_structured_mesh

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('test-hdg-assembly')


def make_case(velocity="test1", beta=1.0, k=1, n=2, m=2):
    mesh = build_structured_mesh(MeshConfig(n, m))
    fe = FeConfig(k)
    prob = ProblemConfig(beta=beta, velocity=velocity)
    stab = stabilizers_for(mesh, velocity, fe)
    return mesh, fe, prob, stab


def oracle_field_matrix(mesh, element, k, s, zeta, tau1):
    """
    One field's local matrix assembled entry by entry from the weak form,
    with its own (finer) quadrature and without the reference edge tables.
    Ordering [q_x, q_y, u, trace].
    """
    fe = FeConfig(k)
    nP, nb, nloc = local_sizes(fe)
    P = mesh.vertices[mesh.triangles[element]]
    J = np.column_stack([P[1] - P[0], P[2] - P[0]])
    invJ = np.linalg.inv(J)
    area = 0.5 * abs(np.linalg.det(J))

    rule = triangle_quadrature(k + 6)
    phi, dphi = eval_basis(fe, "triangle", rule.points)
    grads = np.einsum('qir,rd->qid', dphi, invJ)
    xq = P[0] + rule.points @ J.T
    wq = 2.0 * area * rule.weights
    zq = zeta(xq)

    A = np.zeros((nloc, nloc))
    qx, qy, u = 0, nP, 2 * nP
    lam = 3 * nP
    for i in range(nP):
        for j in range(nP):
            mass = np.sum(wq * phi[:, i] * phi[:, j])
            A[qx + i, qx + j] = -mass
            A[qy + i, qy + j] = -mass
            # (u, div r)
            A[qx + i, u + j] = np.sum(wq * grads[:, i, 0] * phi[:, j])
            A[qy + i, u + j] = np.sum(wq * grads[:, i, 1] * phi[:, j])
            # (div q, w)
            A[u + i, qx + j] = np.sum(wq * phi[:, i] * grads[:, j, 0])
            A[u + i, qy + j] = np.sum(wq * phi[:, i] * grads[:, j, 1])
            # -(s zeta u, grad w)
            A[u + i, u + j] = -s * np.sum(wq * np.einsum('qd,qd->q', zq, grads[:, i]) * phi[:, j])

    erule = edge_quadrature(k + 6)
    psi, _ = eval_basis(fe, "edge", erule.points)
    tri = mesh.triangles[element]
    for ell, (a, b) in enumerate(LOCAL_EDGES):
        low, high = sorted([tri[a], tri[b]])
        x0, x1 = mesh.vertices[low], mesh.vertices[high]
        length = np.hypot(*(x1 - x0))
        xe = x0 + erule.points[:, None] * (x1 - x0)
        we = erule.weights * length
        ref = (xe - P[0]) @ invJ.T
        phie, _ = eval_basis(fe, "triangle", ref)
        tangent_normal = np.array([(P[b] - P[a])[1], -(P[b] - P[a])[0]])
        normal = tangent_normal / np.hypot(*tangent_normal)
        flux = zeta(xe) @ normal
        tau = tau1[ell] - flux if s < 0 else np.full_like(flux, tau1[ell])
        for i in range(nP):
            for j in range(nP):
                A[u + i, u + j] += np.sum(we * tau * phie[:, i] * phie[:, j])
            for j in range(nb):
                col = lam + ell * nb + j
                A[qx + i, col] = -np.sum(we * phie[:, i] * psi[:, j] * normal[0])
                A[qy + i, col] = -np.sum(we * phie[:, i] * psi[:, j] * normal[1])
                A[u + i, col] = np.sum(we * (s * flux - tau) * phie[:, i] * psi[:, j])
                A[col, qx + i] = -np.sum(we * psi[:, j] * phie[:, i] * normal[0])
                A[col, qy + i] = -np.sum(we * psi[:, j] * phie[:, i] * normal[1])
                A[col, u + i] = -np.sum(we * tau * psi[:, j] * phie[:, i])
        for i in range(nb):
            for j in range(nb):
                A[lam + ell * nb + i, lam + ell * nb + j] = np.sum(we * (tau - s * flux) * psi[:, i] * psi[:, j])
    return A


def test_stabilizer_examples():
    """tau values for the two built-in velocities and for zeta = 0."""
    mesh, fe, _, stab = make_case("test1", n=2, m=1)
    normals = mesh.element_normals
    east = np.isclose(normals[..., 0], 1.0)
    assert np.any(east)
    np.testing.assert_allclose(stab.tau1[east], 2.0)
    np.testing.assert_allclose(stab.tau2[east], 1.0)

    _, _, _, still = make_case("zero", n=2, m=1)
    np.testing.assert_allclose(still.tau1, 1.0)
    np.testing.assert_allclose(still.tau2, 1.0)

    # Rotating flow on the edge y = 0.5, 0 <= x <= 0.5, seen from below
    mesh, fe, _, stab = make_case("test2", n=2, m=1)
    target = np.array(sorted([
        int(np.flatnonzero(np.all(np.isclose(mesh.vertices, [0.0, 0.5]), axis=1))[0]),
        int(np.flatnonzero(np.all(np.isclose(mesh.vertices, [0.5, 0.5]), axis=1))[0]),
    ]))
    edge = int(np.flatnonzero(np.all(mesh.edges == target, axis=1))[0])
    hits = np.argwhere(mesh.triangle_edges == edge)
    found = False
    for element, ell in hits:
        if np.allclose(normals[element, ell], [0.0, 1.0]):
            assert stab.tau1[element, ell] == pytest.approx(1.0)
            t = reference_tables(fe.degree).edge_rule.points
            pts, _, _, _ = element_edge_geometry(mesh, np.array([element]), t)
            np.testing.assert_allclose(stab.tau2[element, ell], 1.0 + pts[0, ell, :, 0], atol=1e-14)
            found = True
    assert found
    logger.info("Stabilizer example test passed!")


def test_stabilizer_assumptions():
    """tau1 = tau2 + zeta.n exactly and tau1 - zeta.n/2 bounded away from zero."""
    for velocity in ("test1", "test2", "zero"):
        _, _, _, stab = make_case(velocity, n=2, m=3)
        report = check_stabilizers(stab)
        assert report["identity_error"] <= 1e-14
        assert report["C_K_min"] > 0.0
        assert report["C_star"] > 0.0
    logger.info("Stabilizer assumption test passed!")


def test_symmetric_diffusion_case():
    """zeta = 0 gives equal, symmetric diagonal field blocks."""
    mesh, fe, prob, stab = make_case("zero", k=2)
    blocks = assemble_local(mesh, 3, fe, prob, stab)
    A1 = blocks.field_block(0, 0)
    A2 = blocks.field_block(1, 1)
    np.testing.assert_allclose(A1, A2, atol=1e-14)
    np.testing.assert_allclose(A1, A1.T, atol=1e-13)
    logger.info("Symmetric diffusion test passed!")


def test_coupling_block():
    """The +-L blocks realize the element mass matrix between the scalar fields."""
    mesh, fe, prob, stab = make_case("test2")
    element = 5
    blocks = assemble_local(mesh, element, fe, prob, stab)
    nP, _, nloc = local_sizes(fe)
    u = slice(2 * nP, 3 * nP)
    L = blocks.field_block(1, 0)[u, u]
    ones = np.ones(nP)
    assert ones @ L @ ones == pytest.approx(mesh.triangle_areas()[element], rel=1e-13)
    np.testing.assert_allclose(blocks.field_block(0, 1), -blocks.field_block(1, 0).T, atol=1e-15)

    # Only scalar-scalar entries couple the fields
    off = blocks.field_block(1, 0).copy()
    off[u, u] = 0.0
    assert np.all(off == 0.0)

    # Without coupling the matrix is block diagonal
    plain = assemble_local(mesh, element, fe, prob, stab, coupling=False)
    assert np.all(plain.field_block(0, 1) == 0.0)
    np.testing.assert_allclose(plain.field_block(0, 0), blocks.field_block(0, 0))
    logger.info("Coupling block test passed!")


def test_beta_scaling():
    """Only the field blocks scale with sqrt(beta); the L block does not."""
    mesh, fe, _, stab = make_case("test1")
    a = assemble_local(mesh, 2, fe, ProblemConfig(beta=1.0, velocity="test1"), stab)
    b = assemble_local(mesh, 2, fe, ProblemConfig(beta=1e-4, velocity="test1"), stab)
    np.testing.assert_allclose(b.field_block(0, 0), 1e-2 * a.field_block(0, 0), rtol=1e-13, atol=1e-16)
    np.testing.assert_allclose(b.field_block(1, 1), 1e-2 * a.field_block(1, 1), rtol=1e-13, atol=1e-16)
    np.testing.assert_allclose(b.field_block(1, 0), a.field_block(1, 0))
    logger.info("Beta scaling test passed!")


def test_skew_structure():
    """v2^T A v1 - v1^T A v2 on scalar-only vectors reduces to the L contribution."""
    mesh, fe, prob, stab = make_case("zero")
    blocks = assemble_local(mesh, 1, fe, prob, stab)
    nP, _, nloc = local_sizes(fe)
    rng = np.random.default_rng(3)
    v1 = np.zeros(2 * nloc)
    v2 = np.zeros(2 * nloc)
    v1[2 * nP:3 * nP] = rng.standard_normal(nP)
    v1[nloc + 2 * nP:nloc + 3 * nP] = rng.standard_normal(nP)
    v2[2 * nP:3 * nP] = rng.standard_normal(nP)
    v2[nloc + 2 * nP:nloc + 3 * nP] = rng.standard_normal(nP)
    A = blocks.matrix
    M = blocks.mass
    expected = 2.0 * (v2[nloc + 2 * nP:nloc + 3 * nP] @ M @ v1[2 * nP:3 * nP]
                      - v2[2 * nP:3 * nP] @ M @ v1[nloc + 2 * nP:nloc + 3 * nP])
    assert v2 @ A @ v1 - v1 @ A @ v2 == pytest.approx(expected, abs=1e-13)
    logger.info("Skew structure test passed!")


@pytest.mark.parametrize("velocity,k", [("test1", 1), ("test2", 1), ("test2", 2)])
def test_against_loop_oracle(velocity, k):
    """Vectorised element matrices match the term-by-term assembly."""
    beta = 0.25
    mesh, fe, prob, stab = make_case(velocity, beta=beta, k=k, n=2, m=2)
    zeta = resolve_velocity(velocity)
    for element in (0, 7, 13):
        blocks = assemble_local(mesh, element, fe, prob, stab)
        for field, s in enumerate(FIELD_SIGNS):
            oracle = np.sqrt(beta) * oracle_field_matrix(mesh, element, k, s, zeta, stab.tau1[element])
            got = blocks.field_block(field, field)
            scale = np.max(np.abs(oracle))
            np.testing.assert_allclose(got, oracle, atol=1e-12 * scale)
    logger.info(f"Loop oracle test passed for {velocity}, k={k}!")


def test_load_vector():
    """Zero sources, constant sources and a polynomial source against a finer rule."""
    mesh, fe, _, _ = make_case("test1")
    nP, _, nloc = local_sizes(fe)
    element = 4
    area = mesh.triangle_areas()[element]

    zero = assemble_load(mesh, element, fe, ProblemConfig(beta=1.0, velocity="test1"))
    assert np.all(zero == 0.0)

    ones = lambda x: np.ones(np.asarray(x).shape[:-1])
    F = assemble_load(mesh, element, fe, ProblemConfig(beta=1.0, velocity="test1", f=ones))
    np.testing.assert_allclose(F[2 * nP:3 * nP], area / 3.0, rtol=1e-13)
    mask = np.ones(2 * nloc, dtype=bool)
    mask[2 * nP:3 * nP] = False
    assert np.all(F[mask] == 0.0)

    g = lambda x: x[..., 0] ** 2 * x[..., 1] + 3.0 * x[..., 1]
    F = assemble_load(mesh, element, fe, ProblemConfig(beta=1.0, velocity="test1", g=g))
    P = mesh.vertices[mesh.triangles[element]]
    J = np.column_stack([P[1] - P[0], P[2] - P[0]])
    rule = triangle_quadrature(8)
    phi, _ = eval_basis(fe, "triangle", rule.points)
    xq = P[0] + rule.points @ J.T
    expected = 2.0 * area * np.einsum('q,q,qi->i', rule.weights, g(xq), phi)
    np.testing.assert_allclose(F[nloc + 2 * nP:nloc + 3 * nP], expected, rtol=1e-12)
    logger.info("Load vector test passed!")


def test_velocity_validation():
    """Unknown names and divergent fields are rejected."""
    assert resolve_velocity("test2") is rotating_flow
    assert resolve_velocity(lambda x: np.stack([np.sin(x[..., 1]), np.cos(x[..., 0])], axis=-1)) is not None
    with pytest.raises(ConfigurationError):
        resolve_velocity("vortex")
    with pytest.raises(ConfigurationError):
        resolve_velocity(lambda x: np.asarray(x, dtype=float))
    with pytest.raises(ConfigurationError):
        ProblemConfig(beta=0.0)
    logger.info("Velocity validation test passed!")


def main():
    """Run all tests."""
    logger.info("Starting HDG assembly tests...")
    test_stabilizer_examples()
    test_stabilizer_assumptions()
    test_symmetric_diffusion_case()
    test_coupling_block()
    test_beta_scaling()
    test_skew_structure()
    for velocity, k in [("test1", 1), ("test2", 1), ("test2", 2)]:
        test_against_loop_oracle(velocity, k)
    test_load_vector()
    test_velocity_validation()
    logger.info("All HDG assembly tests passed!")


if __name__ == "__main__":
    main()
