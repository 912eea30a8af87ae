"""
BDDC preconditioner for the hdg-bddc interface problem.

Primal constraints are edge functionals on every macro-edge, enforced in the
subdomain problems through bordered (Lagrange multiplier) systems. The
preconditioner applies R_D^T S~^-1 R_D, where S~ is the interface Schur
complement on the partially assembled space and R_D carries the
inverse-counting weights.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu

from config import ConfigurationError, CONSTRAINT_DEPENDENT_TOL, CONSTRAINT_ZERO_TOL
from fespace import FeConfig, TraceSpace, reference_tables
from hdg_assembly import VelocityField, resolve_velocity
from mesh import Mesh, macro_edges
from schur import SubdomainOperator, dense_schur

logger = logging.getLogger('hdg-bddc.bddc')

CONSTRAINT_KINDS = ("avg", "flux", "moment")


@dataclass(frozen=True)
class PrimalFlags:
    """Enabled constraint families; the edge average is mandatory."""
    avg: bool = True
    flux: bool = True
    moment: bool = True

    def __post_init__(self):
        if not self.avg:
            raise ConfigurationError("the edge average constraint cannot be disabled")

    @classmethod
    def from_string(cls, text: str) -> "PrimalFlags":
        """Parse 'avg', 'avg+flux' or 'avg+flux+moment'."""
        parts = [p.strip() for p in text.split('+') if p.strip()]
        unknown = set(parts) - set(CONSTRAINT_KINDS)
        if unknown:
            raise ConfigurationError(f"Unknown primal constraint(s): {', '.join(sorted(unknown))}")
        return cls(avg="avg" in parts, flux="flux" in parts, moment="moment" in parts)

    def enabled(self) -> List[str]:
        return [kind for kind in CONSTRAINT_KINDS if getattr(self, kind)]


@dataclass(frozen=True)
class PrimalConstraintSet:
    """
    Retained constraint rows per macro-edge and the global constraint matrix.

    rows[e] holds orthonormal rows spanning the retained functionals over the
    scalar dofs of macro-edge e (mesh edge along it, then basis function) and
    is shared by both fields. The functionals computed from either side differ
    only by sign, so both sides constrain the same span. `matrix` maps
    interface vectors to primal values.
    """
    rows: List[np.ndarray]
    kinds: List[List[str]]
    masters: List[int]
    slaves: List[int]
    matrix: sp.csr_matrix
    subdomain_primal: List[np.ndarray]
    all_primal: bool = False

    @property
    def n_primal(self) -> int:
        return int(self.matrix.shape[0])


def _filter_rows(candidates: List[Tuple[str, np.ndarray]], length: float) -> Tuple[List[str], np.ndarray]:
    """
    Drop zero and dependent functionals, then orthonormalize the rest.
    The returned rows span the same space as the kept functionals.
    """
    kinds, kept, basis = [], [], []
    for kind, row in candidates:
        norm = np.linalg.norm(row)
        if norm <= CONSTRAINT_ZERO_TOL * length:
            continue
        residual = row.copy()
        for q in basis:
            residual -= np.dot(q, residual) * q
        res_norm = np.linalg.norm(residual)
        if res_norm / norm <= CONSTRAINT_DEPENDENT_TOL:
            continue
        basis.append(residual / res_norm)
        kinds.append(kind)
        kept.append(row)
    if not kept:
        return kinds, np.zeros((0, candidates[0][1].size if candidates else 0))
    Q, R = np.linalg.qr(np.array(kept).T)
    # first row stays a positive multiple of the first kept functional
    Q *= np.where(np.diag(R) < 0.0, -1.0, 1.0)[None, :]
    return kinds, Q.T.copy()


def select_primal(mesh: Mesh, fe: FeConfig, velocity: Union[str, VelocityField],
                  flags: Optional[PrimalFlags] = None) -> PrimalConstraintSet:
    """
    Edge average, flux-weighted average and flux-weighted first moment on
    every macro-edge, with zero and dependent rows dropped.

    Args:
        mesh (Mesh): The mesh.
        fe (FeConfig): Degree of the trace space.
        velocity: Velocity name or callable.
        flags (PrimalFlags): Enabled constraint families.

    Returns:
        PrimalConstraintSet: The retained constraints.
    """
    flags = flags or PrimalFlags()
    zeta = resolve_velocity(velocity)
    tables = reference_tables(fe.degree)
    t, wq, psi = tables.edge_rule.points, tables.edge_rule.weights, tables.psi
    nb = fe.n_edge_basis
    m = mesh.config.elements_per_subdomain_side
    per_edge = 2 * nb * m

    rows, kinds, masters, slaves = [], [], [], []
    coo_rows, coo_cols, coo_vals = [], [], []
    primal_of_edge = []
    n_primal = 0
    for me in macro_edges(mesh):
        weights = {kind: np.zeros(m * nb) for kind in CONSTRAINT_KINDS}
        for p, e in enumerate(me.edges):
            low, high = mesh.vertices[mesh.edges[e]]
            pts = low[None, :] + t[:, None] * (high - low)[None, :]
            w = wq * np.hypot(*(high - low))
            flux = zeta(pts) @ me.normal
            s = me.parameter(pts)
            weights["avg"][p * nb:(p + 1) * nb] = w @ psi
            weights["flux"][p * nb:(p + 1) * nb] = (w * flux) @ psi
            weights["moment"][p * nb:(p + 1) * nb] = (w * flux * s) @ psi
        edge_kinds, edge_rows = _filter_rows([(kind, weights[kind]) for kind in flags.enabled()], me.length)
        rows.append(edge_rows)
        kinds.append(edge_kinds)
        masters.append(me.master)
        slaves.append(me.slave)

        scalar = np.arange(m * nb)
        ids = []
        for fld in (0, 1):
            cols = me.index * per_edge + 2 * scalar + fld
            for row in edge_rows:
                coo_rows.append(np.full(scalar.size, n_primal))
                coo_cols.append(cols)
                coo_vals.append(row)
                ids.append(n_primal)
                n_primal += 1
        primal_of_edge.append(np.array(ids, dtype=np.int64))
        logger.debug(f"Macro-edge {me.index} ({me.orientation}): kept {edge_kinds}")

    n_gamma = len(rows) * per_edge
    if coo_rows:
        matrix = sp.coo_matrix((np.concatenate(coo_vals), (np.concatenate(coo_rows), np.concatenate(coo_cols))),
                               shape=(n_primal, n_gamma)).tocsr()
    else:
        matrix = sp.csr_matrix((0, n_gamma))

    subdomain_primal = []
    for sub in range(mesh.num_subdomains):
        ids = [primal_of_edge[i] for i in range(len(rows)) if sub in (masters[i], slaves[i])]
        subdomain_primal.append(np.sort(np.concatenate(ids)) if ids else np.empty(0, dtype=np.int64))

    logger.info(f"Selected {n_primal} primal constraints on {len(rows)} macro-edges ({'+'.join(flags.enabled())})")
    return PrimalConstraintSet(rows=rows, kinds=kinds, masters=masters, slaves=slaves, matrix=matrix,
                               subdomain_primal=subdomain_primal)


def all_primal_constraints(trace: TraceSpace) -> PrimalConstraintSet:
    """Every interface dof is its own primal constraint."""
    n_gamma = trace.n_gamma
    return PrimalConstraintSet(rows=[], kinds=[], masters=[], slaves=[],
                               matrix=sp.identity(n_gamma, format='csr'),
                               subdomain_primal=[g.copy() for g in trace.subdomain_gamma],
                               all_primal=True)


@dataclass
class _ConstrainedSolver:
    gamma: np.ndarray
    primal: np.ndarray
    scaling: np.ndarray
    factor: Tuple[np.ndarray, np.ndarray]
    phi: np.ndarray      # primal basis, columns over local interface dofs
    psi: np.ndarray      # adjoint primal basis
    coarse_local: np.ndarray
    schur: np.ndarray = field(repr=False, default=None)


def _factor_checked(K: np.ndarray, what: str):
    factor = lu_factor(K, check_finite=False)
    diag = np.abs(np.diag(factor[0]))
    if diag.size and diag.min() <= np.finfo(float).eps * max(diag.max(), 1.0) * K.shape[0]:
        raise ConfigurationError(f"{what} is singular (dependent primal constraints?)")
    return factor


class BddcPreconditioner:
    """
    Inverse-counting BDDC preconditioner for the assembled interface operator.

    Construction factors one bordered system [[S_i, C_i^T], [C_i, 0]] per
    subdomain and the coarse matrix sum_i R_i^T Psi_i^T S_i Phi_i R_i.
    """

    def __init__(self, ops: List[SubdomainOperator], primal: PrimalConstraintSet, trace: TraceSpace):
        self.primal = primal
        self.n_gamma = trace.n_gamma
        self.n_primal = primal.n_primal
        self.solvers: List[_ConstrainedSolver] = []
        self.coarse = None
        if self.n_gamma == 0:
            logger.info("No interface: preconditioner is empty")
            return

        multiplicity = trace.multiplicity()
        rows, cols, vals = [], [], []
        for op in ops:
            if op.n_gamma == 0:
                continue
            S = op.schur if op.schur is not None else dense_schur(op)
            prim = primal.subdomain_primal[op.subdomain]
            C = primal.matrix[prim][:, op.gamma].toarray()
            nG, nC = op.n_gamma, prim.size
            K = np.zeros((nG + nC, nG + nC))
            K[:nG, :nG] = S
            K[:nG, nG:] = C.T
            K[nG:, :nG] = C
            factor = _factor_checked(K, f"constrained problem of subdomain {op.subdomain}")
            unit = np.zeros((nG + nC, nC))
            unit[nG:] = np.eye(nC)
            sol = lu_solve(factor, unit, check_finite=False)
            sol_t = lu_solve(factor, unit, trans=1, check_finite=False)
            # Psi^T S Phi = -Lambda
            coarse_local = -sol[nG:]
            self.solvers.append(_ConstrainedSolver(
                gamma=op.gamma, primal=prim, scaling=1.0 / multiplicity[op.gamma], factor=factor,
                phi=sol[:nG], psi=sol_t[:nG], coarse_local=coarse_local, schur=S))
            rows.append(np.repeat(prim, nC))
            cols.append(np.tile(prim, nC))
            vals.append(coarse_local.ravel())

        coarse = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(self.n_primal, self.n_primal)).tocsc()
        try:
            self.coarse = splu(coarse)
        except RuntimeError as e:
            raise ConfigurationError(f"coarse matrix is singular: {e}")
        logger.info(f"BDDC ready: {len(self.solvers)} subdomain solvers, coarse size {self.n_primal}")

    def _local_solve(self, solver: _ConstrainedSolver, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        nG = solver.gamma.size
        rhs = np.concatenate([r, np.zeros(solver.primal.size)])
        sol = lu_solve(solver.factor, rhs, check_finite=False)
        return sol[:nG], sol[nG:]

    def solve_partially_assembled(self, residuals: List[np.ndarray]):
        """
        Solve S~ w = r on the partially assembled space.

        Args:
            residuals: One local interface vector per subdomain solver.

        Returns:
            Tuple: local solutions w_i, shared primal values u and the
            multipliers mu_i, which satisfy S_i w_i + C_i^T mu_i = r_i,
            C_i w_i = u[primal_i] and sum_i R_i^T mu_i = 0.
        """
        dual = []
        coarse_rhs = np.zeros(self.n_primal)
        for solver, r in zip(self.solvers, residuals):
            dual.append(self._local_solve(solver, r))
            coarse_rhs[solver.primal] += solver.psi.T @ r
        u = self.coarse.solve(coarse_rhs)
        ws, mus = [], []
        for solver, (w_d, mu_d) in zip(self.solvers, dual):
            u_i = u[solver.primal]
            ws.append(w_d + solver.phi @ u_i)
            mus.append(mu_d - solver.coarse_local @ u_i)
        return ws, u, mus

    def apply(self, r: np.ndarray) -> np.ndarray:
        """z = R_D^T S~^-1 R_D r"""
        r = np.asarray(r, dtype=float)
        if self.n_gamma == 0:
            return np.zeros(0)
        ws, _, _ = self.solve_partially_assembled([s.scaling * r[s.gamma] for s in self.solvers])
        z = np.zeros(self.n_gamma)
        for solver, w in zip(self.solvers, ws):
            z[solver.gamma] += solver.scaling * w
        return z

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.apply(r)


def build_preconditioner(ops: List[SubdomainOperator], primal: PrimalConstraintSet,
                         trace: TraceSpace) -> BddcPreconditioner:
    """Factor the constrained subdomain problems and the coarse problem."""
    return BddcPreconditioner(ops, primal, trace)


def apply_preconditioner(pre: BddcPreconditioner, r: np.ndarray) -> np.ndarray:
    return pre.apply(r)
