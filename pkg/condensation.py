"""
Static condensation for the hdg-bddc solver.

Eliminates the element unknowns (fluxes and scalars of both fields) and
assembles the global trace system A lambda = b, caching what is needed to
extend a trace vector back into the elements.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from config import ConfigurationError, ELEMENT_CHUNK, MAX_TRACE_DOFS
from fespace import FeConfig, TraceSpace, build_trace_space, reference_tables
from hdg_assembly import (
    FIELD_SIGNS, ProblemConfig, Stabilizers, condensation_layout, element_edge_geometry,
    element_system, local_sizes,
)
from mesh import Mesh

logger = logging.getLogger('hdg-bddc.condensation')


@dataclass(frozen=True)
class TraceSystem:
    """Condensed trace operator, its load and the per-element recovery data."""
    mesh: Mesh
    fe: FeConfig
    prob: ProblemConfig
    stab: Stabilizers
    trace: TraceSpace
    A: sp.csr_matrix
    b: np.ndarray
    element_matrices: np.ndarray  # (nT, nt, nt) condensed element matrices
    element_loads: np.ndarray     # (nT, nt)
    extension: np.ndarray         # (nT, ni, nt), A_II^-1 A_IT
    particular: np.ndarray        # (nT, ni), A_II^-1 F_I
    mass: np.ndarray              # (nT, nP, nP)

    @property
    def num_dofs(self) -> int:
        return self.trace.num_dofs


@dataclass(frozen=True)
class InteriorFields:
    """Element coefficients of the recovered fields, field 0 = state, 1 = adjoint."""
    flux: np.ndarray   # (nT, 2, 2, nP)
    value: np.ndarray  # (nT, 2, nP)

    @property
    def y(self) -> np.ndarray:
        return self.value[:, 0]

    @property
    def p(self) -> np.ndarray:
        return self.value[:, 1]


def _solve_batch(A_II: np.ndarray, rhs: np.ndarray, elements: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(A_II, rhs)
    except np.linalg.LinAlgError:
        for local, element in enumerate(elements):
            try:
                np.linalg.solve(A_II[local], rhs[local])
            except np.linalg.LinAlgError:
                raise ConfigurationError(
                    f"local interior block is singular on element {int(element)} (check the stabilizers)")
        raise


def condense(mesh: Mesh, fe: FeConfig, prob: ProblemConfig, stab: Stabilizers,
             trace: Optional[TraceSpace] = None) -> TraceSystem:
    """
    Form the trace system by eliminating the element unknowns.

    Args:
        mesh (Mesh): The mesh.
        fe (FeConfig): Degree.
        prob (ProblemConfig): Problem data.
        stab (Stabilizers): Stabilization parameters.
        trace (TraceSpace): Trace numbering, built if omitted.

    Returns:
        TraceSystem: The condensed system.
    """
    trace = trace or build_trace_space(mesh, fe)
    if trace.num_dofs > MAX_TRACE_DOFS:
        logger.warning(f"{trace.num_dofs} trace dofs exceeds the configured guard of {MAX_TRACE_DOFS}")

    interior, tr = condensation_layout(fe)
    nP, _, _ = local_sizes(fe)
    n_el = mesh.triangles.shape[0]
    ni, nt = interior.size, tr.size

    element_matrices = np.empty((n_el, nt, nt))
    element_loads = np.empty((n_el, nt))
    extension = np.empty((n_el, ni, nt))
    particular = np.empty((n_el, ni))
    mass = np.empty((n_el, nP, nP))

    for start in range(0, n_el, ELEMENT_CHUNK):
        elements = np.arange(start, min(start + ELEMENT_CHUNK, n_el))
        A, F, M = element_system(mesh, fe, prob, stab, elements)
        A_II = A[:, interior][:, :, interior]
        A_IT = A[:, interior][:, :, tr]
        A_TI = A[:, tr][:, :, interior]
        A_TT = A[:, tr][:, :, tr]
        rhs = np.concatenate([A_IT, F[:, interior, None]], axis=2)
        sol = _solve_batch(A_II, rhs, elements)
        X, xf = sol[:, :, :nt], sol[:, :, nt]
        element_matrices[elements] = A_TT - A_TI @ X
        element_loads[elements] = F[:, tr] - np.einsum('cij,cj->ci', A_TI, xf)
        extension[elements] = X
        particular[elements] = xf
        mass[elements] = M
        logger.debug(f"Condensed elements {start}..{elements[-1]}")

    dofs = trace.element_dofs
    rows = np.broadcast_to(dofs[:, :, None], element_matrices.shape)
    cols = np.broadcast_to(dofs[:, None, :], element_matrices.shape)
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix((element_matrices[keep], (rows[keep], cols[keep])),
                      shape=(trace.num_dofs, trace.num_dofs)).tocsr()
    valid = dofs >= 0
    b = np.bincount(dofs[valid], weights=element_loads[valid], minlength=trace.num_dofs)

    logger.info(f"Condensed {n_el} elements into a trace system of size {trace.num_dofs} ({A.nnz} nonzeros)")
    return TraceSystem(mesh=mesh, fe=fe, prob=prob, stab=stab, trace=trace, A=A, b=b,
                       element_matrices=element_matrices, element_loads=element_loads,
                       extension=extension, particular=particular, mass=mass)


def _gather(ts: TraceSystem, lam: np.ndarray) -> np.ndarray:
    dofs = ts.trace.element_dofs
    return np.where(dofs >= 0, np.asarray(lam)[np.maximum(dofs, 0)], 0.0)


def _split(ts: TraceSystem, interior: np.ndarray) -> InteriorFields:
    nP = ts.fe.n_element_basis
    blocks = interior.reshape(interior.shape[0], 2, 3, nP)
    return InteriorFields(flux=blocks[:, :, :2].copy(), value=blocks[:, :, 2].copy())


def extend(ts: TraceSystem, lam: np.ndarray) -> InteriorFields:
    """
    Element fields (Q lambda, U lambda) solving the local equations with zero load.

    Args:
        ts (TraceSystem): The condensed system.
        lam (np.ndarray): Trace vector over all dofs.

    Returns:
        InteriorFields: Flux and scalar coefficients of both fields.
    """
    lam_K = _gather(ts, lam)
    return _split(ts, -np.einsum('cij,cj->ci', ts.extension, lam_K))


def recover_interior(ts: TraceSystem, lam: np.ndarray, loads: bool = True) -> InteriorFields:
    """Element fields for a trace solution, including the load contribution."""
    lam_K = _gather(ts, lam)
    interior = -np.einsum('cij,cj->ci', ts.extension, lam_K)
    if loads:
        interior += ts.particular
    return _split(ts, interior)


def split_BZ(ts: TraceSystem) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Symmetric part B = (A + A^T)/2 and skew part Z = (A - A^T)/2."""
    At = ts.A.T.tocsr()
    return ((ts.A + At) * 0.5).tocsr(), ((ts.A - At) * 0.5).tocsr()


def l_form(ts: TraceSystem, lam: np.ndarray, s: np.ndarray) -> float:
    """<lam, s>_L = (U_1 lam, U_1 s) + (U_2 lam, U_2 s) with U the scalar extensions."""
    ul = extend(ts, lam).value
    us = extend(ts, s).value
    return float(np.einsum('cfi,cij,cfj->', ul, ts.mass, us))


def m_inner(ts: TraceSystem, lam: np.ndarray, s: np.ndarray, B: Optional[sp.csr_matrix] = None) -> float:
    """<lam, s>_M = s^T B lam + <lam, s>_L."""
    if B is None:
        B, _ = split_BZ(ts)
    return float(np.dot(s, B @ lam)) + l_form(ts, lam, s)


def bh_energy(ts: TraceSystem, lam: np.ndarray) -> float:
    """
    b_h(lam, lam) evaluated by quadrature on the extensions:
    sum over elements and fields of sqrt(beta) (|q|^2 + <(tau - s zeta.n/2)(u - lam)^2>).
    """
    mesh, fe = ts.mesh, ts.fe
    tables = reference_tables(fe.degree)
    fields = extend(ts, lam)
    lam_K = _gather(ts, lam)
    nP, nb, _ = local_sizes(fe)
    n_el = mesh.triangles.shape[0]
    lam_K = lam_K.reshape(n_el, 3, nb, 2)
    sqb = ts.prob.sqrt_beta

    total = 0.0
    for start in range(0, n_el, ELEMENT_CHUNK):
        el = np.arange(start, min(start + ELEMENT_CHUNK, n_el))
        # Flux part uses the element mass matrix
        q = fields.flux[el]
        total += sqb * float(np.einsum('cfdi,cij,cfdj->', q, ts.mass[el], q))

        _, lengths, _, flipped = element_edge_geometry(mesh, el, tables.edge_rule.points)
        we = tables.edge_rule.weights[None, None, :] * lengths[:, :, None]
        phiE = tables.phi_on_edge[np.arange(3)[None, :], flipped.astype(np.int64)]
        flux = ts.stab.flux[el]
        for field, s in enumerate(FIELD_SIGNS):
            u_edge = np.einsum('clqi,ci->clq', phiE, fields.value[el, field])
            l_edge = np.einsum('qj,clj->clq', tables.psi, lam_K[el, :, :, field])
            tau = ts.stab.field_tau(field)[el]
            jump = u_edge - l_edge
            total += sqb * float(np.sum(we * (tau - 0.5 * s * flux) * jump * jump))
    return total


def monolithic_system(mesh: Mesh, fe: FeConfig, prob: ProblemConfig, stab: Stabilizers,
                      trace: Optional[TraceSpace] = None) -> Tuple[sp.csr_matrix, np.ndarray, int]:
    """
    The uncondensed global system: every element's interior unknowns in
    element order, followed by the trace dofs.

    Returns:
        Tuple: matrix, right-hand side and the number of element unknowns.
    """
    trace = trace or build_trace_space(mesh, fe)
    interior, tr = condensation_layout(fe)
    n_el = mesh.triangles.shape[0]
    ni = interior.size
    A, F, _ = element_system(mesh, fe, prob, stab, np.arange(n_el))
    order = np.concatenate([interior, tr])
    A = A[:, order][:, :, order]
    F = F[:, order]

    n_int = n_el * ni
    gmap = np.concatenate([
        (np.arange(n_el)[:, None] * ni + np.arange(ni)[None, :]),
        np.where(trace.element_dofs >= 0, n_int + trace.element_dofs, -1),
    ], axis=1)
    rows = np.broadcast_to(gmap[:, :, None], A.shape)
    cols = np.broadcast_to(gmap[:, None, :], A.shape)
    keep = (rows >= 0) & (cols >= 0)
    size = n_int + trace.num_dofs
    K = sp.coo_matrix((A[keep], (rows[keep], cols[keep])), shape=(size, size)).tocsr()
    valid = gmap >= 0
    rhs = np.bincount(gmap[valid], weights=F[valid], minlength=size)
    return K, rhs, n_int
