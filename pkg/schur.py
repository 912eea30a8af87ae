"""
Subdomain interface operators for the hdg-bddc solver.

Each subdomain assembles its own elements' condensed matrices plus Robin
terms on its part of the interface, factors the interior block and exposes
the local Schur complement S_i = A_GG - A_GI A_II^-1 A_IG.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from config import ConfigurationError
from condensation import TraceSystem
from fespace import reference_tables
from mesh import INTERFACE, SIDES

logger = logging.getLogger('hdg-bddc.schur')

SIDE_NORMALS = {
    "south": np.array([0.0, -1.0]),
    "east": np.array([1.0, 0.0]),
    "north": np.array([0.0, 1.0]),
    "west": np.array([-1.0, 0.0]),
}


@dataclass
class SubdomainOperator:
    """Interior factorization and interface blocks of one subdomain."""
    subdomain: int
    interior_dofs: np.ndarray   # global trace dofs of the subdomain interior
    gamma: np.ndarray           # sorted interface positions (R_i)
    lu: Optional[object]        # splu of A_II
    A_IG: sp.csr_matrix
    A_GI: sp.csr_matrix
    A_GG: np.ndarray
    robin: np.ndarray           # Robin correction on the interface block
    schur: Optional[np.ndarray] = None

    @property
    def n_interior(self) -> int:
        return int(self.interior_dofs.shape[0])

    @property
    def n_gamma(self) -> int:
        return int(self.gamma.shape[0])

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        if self.n_interior == 0:
            return np.zeros((0,) + np.shape(rhs)[1:])
        return self.lu.solve(np.asarray(rhs, dtype=float))


def robin_edge_matrix(ts: TraceSystem, edge: int, normal: np.ndarray) -> np.ndarray:
    """int_e zeta.n psi_i psi_j over one mesh edge for the given normal."""
    mesh = ts.mesh
    tables = reference_tables(ts.fe.degree)
    low, high = mesh.vertices[mesh.edges[edge]]
    t = tables.edge_rule.points
    pts = low[None, :] + t[:, None] * (high - low)[None, :]
    flux = ts.prob.velocity_field(pts) @ normal
    w = tables.edge_rule.weights * np.hypot(*(high - low))
    return np.einsum('q,q,qi,qj->ij', w, flux, tables.psi, tables.psi)


def _local_matrix(ts: TraceSystem, sub: int, local_of: np.ndarray) -> sp.csr_matrix:
    elements = ts.mesh.subdomain_triangles(sub)
    dofs = ts.trace.element_dofs[elements]
    loc = np.where(dofs >= 0, local_of[np.maximum(dofs, 0)], -1)
    mats = ts.element_matrices[elements]
    rows = np.broadcast_to(loc[:, :, None], mats.shape)
    cols = np.broadcast_to(loc[:, None, :], mats.shape)
    keep = (rows >= 0) & (cols >= 0)
    size = int(local_of.max()) + 1
    return sp.coo_matrix((mats[keep], (rows[keep], cols[keep])), shape=(size, size)).tocsr()


def build_subdomain_ops(ts: TraceSystem, robin: bool = True, form_schur: bool = True) -> List[SubdomainOperator]:
    """
    Assemble and factor every subdomain problem.

    Args:
        ts (TraceSystem): The condensed system.
        robin (bool): Add the Robin terms on the subdomain interface.
        form_schur (bool): Also form S_i densely (needed by the preconditioner).

    Returns:
        List[SubdomainOperator]: One operator per subdomain, in subdomain order.
    """
    mesh, trace = ts.mesh, ts.trace
    nb = ts.fe.n_edge_basis
    sqb = ts.prob.sqrt_beta
    ops = []
    for sub in range(mesh.num_subdomains):
        interior = trace.subdomain_interior[sub]
        gamma = trace.subdomain_gamma[sub]
        nI, nG = interior.size, gamma.size
        local_of = np.full(trace.num_dofs, -1, dtype=np.int64)
        local_of[interior] = np.arange(nI)
        local_of[trace.gamma_dofs[gamma]] = nI + np.arange(nG)
        A_loc = _local_matrix(ts, sub, local_of)

        R = np.zeros((nG, nG))
        for side in SIDES:
            for e in mesh.subdomain_boundaries[sub][side]:
                if mesh.edge_class[e] != INTERFACE:
                    continue
                m_e = robin_edge_matrix(ts, int(e), SIDE_NORMALS[side])
                for field, sign in enumerate((1.0, -1.0)):
                    idx = local_of[trace.edge_dofs(int(e), field)] - nI
                    R[np.ix_(idx, idx)] += sign * 0.5 * sqb * m_e

        A_II = A_loc[:nI, :nI].tocsc()
        try:
            lu = splu(A_II) if nI > 0 else None
        except RuntimeError as e:
            raise ConfigurationError(f"interior block of subdomain {sub} is singular: {e}")
        op = SubdomainOperator(
            subdomain=sub, interior_dofs=interior, gamma=gamma, lu=lu,
            A_IG=A_loc[:nI, nI:].tocsr(), A_GI=A_loc[nI:, :nI].tocsr(),
            A_GG=A_loc[nI:, nI:].toarray() + (R if robin else 0.0),
            robin=R if robin else np.zeros_like(R),
        )
        if form_schur:
            op.schur = dense_schur(op)
        ops.append(op)
        logger.debug(f"Subdomain {sub}: {nI} interior dofs, {nG} interface dofs")
    logger.info(f"Factored {len(ops)} subdomain interior problems")
    return ops


def dense_schur(op: SubdomainOperator) -> np.ndarray:
    """S_i formed column by column from one multi right-hand side interior solve."""
    if op.n_gamma == 0:
        return np.zeros((0, 0))
    if op.n_interior == 0:
        return op.A_GG.copy()
    X = op.solve_interior(op.A_IG.toarray())
    return op.A_GG - op.A_GI @ X


def apply_local_schur(op: SubdomainOperator, v: np.ndarray) -> np.ndarray:
    """S_i v through one interior solve (uses the dense S_i when it exists)."""
    v = np.asarray(v, dtype=float)
    if op.schur is not None:
        return op.schur @ v
    out = op.A_GG @ v
    if op.n_interior:
        out = out - op.A_GI @ op.solve_interior(op.A_IG @ v)
    return out


def interface_operator(ops: List[SubdomainOperator], n_gamma: int) -> Callable[[np.ndarray], np.ndarray]:
    """The assembled interface operator v -> sum_i R_i^T S_i R_i v, summed in subdomain order."""
    def apply(v: np.ndarray) -> np.ndarray:
        out = np.zeros(n_gamma)
        for op in ops:
            if op.n_gamma:
                out[op.gamma] += apply_local_schur(op, v[op.gamma])
        return out
    return apply


def interface_rhs(ops: List[SubdomainOperator], ts: TraceSystem, b: Optional[np.ndarray] = None) -> np.ndarray:
    """
    g = b_Gamma - sum_i R_i^T A_GI A_II^-1 b_I for the condensed load b.

    Args:
        ops (List[SubdomainOperator]): Subdomain operators.
        ts (TraceSystem): The condensed system (numbering and default load).
        b (np.ndarray): Trace load, ts.b if omitted.

    Returns:
        np.ndarray: The interface right-hand side.
    """
    b = ts.b if b is None else np.asarray(b)
    g = b[ts.trace.gamma_dofs].astype(float)
    for op in ops:
        if op.n_gamma and op.n_interior:
            g[op.gamma] -= op.A_GI @ op.solve_interior(b[op.interior_dofs])
    return g


def backsolve_interior(ops: List[SubdomainOperator], ts: TraceSystem, lam_gamma: np.ndarray,
                       b: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Complete an interface solution with lambda_I = A_II^-1 (b_I - A_IG lambda_Gamma)
    on every subdomain.

    Returns:
        np.ndarray: The full trace vector.
    """
    b = ts.b if b is None else np.asarray(b)
    lam = np.zeros(ts.trace.num_dofs)
    lam[ts.trace.gamma_dofs] = lam_gamma
    for op in ops:
        if op.n_interior == 0:
            continue
        rhs = b[op.interior_dofs] - (op.A_IG @ lam_gamma[op.gamma] if op.n_gamma else 0.0)
        lam[op.interior_dofs] = op.solve_interior(rhs)
    return lam


def extend_interface(ops: List[SubdomainOperator], ts: TraceSystem, lam_gamma: np.ndarray) -> np.ndarray:
    """Discrete harmonic extension lambda_I = -A_II^-1 A_IG lambda_Gamma."""
    return backsolve_interior(ops, ts, lam_gamma, b=np.zeros(ts.trace.num_dofs))
