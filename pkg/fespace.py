"""
Finite element spaces for the hdg-bddc solver.
Nodal Lagrange bases on the reference triangle and edge, quadrature rules,
and the global numbering of the paired trace unknowns (y_hat, p_hat).
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from config import ConfigurationError, DEFAULT_DEGREE
from mesh import Mesh, DIRICHLET, INTERFACE, LOCAL_EDGES, macro_edges

logger = logging.getLogger('hdg-bddc.fespace')

# Reference triangle vertices
REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True)
class FeConfig:
    """Polynomial degree k of all HDG spaces."""
    degree: int = DEFAULT_DEGREE

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise ConfigurationError(f"degree must be an integer >= 1, got {self.degree}")

    @property
    def n_element_basis(self) -> int:
        k = self.degree
        return (k + 1) * (k + 2) // 2

    @property
    def n_edge_basis(self) -> int:
        return self.degree + 1

    @property
    def n_quad_1d(self) -> int:
        return self.degree + 3


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference entity."""
    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def edge_quadrature(n_points: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1], exact for degree 2*n_points - 1."""
    x, w = leggauss(n_points)
    return QuadratureRule(points=0.5 * (x + 1.0), weights=0.5 * w)


def triangle_quadrature(n_points: int) -> QuadratureRule:
    """
    Collapsed Gauss rule on the reference triangle.

    The square [0,1]^2 is mapped by (u, v) -> (u, v(1-u)); with n points per
    direction the rule is exact for total degree 2n - 2.
    """
    x, w = leggauss(n_points)
    t = 0.5 * (x + 1.0)
    wt = 0.5 * w
    u, v = np.meshgrid(t, t, indexing='ij')
    wu, wv = np.meshgrid(wt, wt, indexing='ij')
    points = np.column_stack([u.ravel(), (v * (1.0 - u)).ravel()])
    weights = (wu * wv * (1.0 - u)).ravel()
    return QuadratureRule(points=points, weights=weights)


def _triangle_exponents(k: int) -> List[Tuple[int, int]]:
    return [(i, j) for j in range(k + 1) for i in range(k + 1 - j)]


def triangle_nodes(k: int) -> np.ndarray:
    """Equispaced Lagrange nodes, row by row from y = 0."""
    return np.array([[i / k, j / k] for i, j in _triangle_exponents(k)])


@lru_cache(maxsize=None)
def _triangle_coefficients(k: int) -> np.ndarray:
    nodes = triangle_nodes(k)
    exps = _triangle_exponents(k)
    vander = np.column_stack([nodes[:, 0] ** a * nodes[:, 1] ** b for a, b in exps])
    return np.linalg.inv(vander)


@lru_cache(maxsize=None)
def _edge_coefficients(k: int) -> np.ndarray:
    nodes = np.linspace(0.0, 1.0, k + 1)
    return np.linalg.inv(np.vander(nodes, k + 1, increasing=True))


def eval_basis(fe: FeConfig, entity: str, points) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate the nodal P^k basis on a reference entity.

    Args:
        fe (FeConfig): Degree of the basis.
        entity (str): "triangle" (points of shape (q, 2)) or "edge" (points of shape (q,) in [0, 1]).
        points: Reference coordinates.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Values (q, nb) and derivatives, (q, nb, 2)
        on triangles and (q, nb) d/dt on edges.
    """
    k = fe.degree
    points = np.asarray(points, dtype=float)
    if entity == "triangle":
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        exps = _triangle_exponents(k)
        coeffs = _triangle_coefficients(k)
        mono = np.column_stack([x ** a * y ** b for a, b in exps])
        dx = np.column_stack([a * x ** max(a - 1, 0) * y ** b if a > 0 else np.zeros_like(x) for a, b in exps])
        dy = np.column_stack([b * x ** a * y ** max(b - 1, 0) if b > 0 else np.zeros_like(y) for a, b in exps])
        values = mono @ coeffs
        grads = np.stack([dx @ coeffs, dy @ coeffs], axis=-1)
        return values, grads
    if entity == "edge":
        t = np.atleast_1d(points)
        coeffs = _edge_coefficients(k)
        mono = np.vander(t, k + 1, increasing=True)
        dmono = np.column_stack([p * t ** max(p - 1, 0) if p > 0 else np.zeros_like(t) for p in range(k + 1)])
        return mono @ coeffs, dmono @ coeffs
    raise ValueError(f"Unknown entity '{entity}', expected 'triangle' or 'edge'")


@dataclass(frozen=True)
class ReferenceTables:
    """Basis values at quadrature points, shared by every element."""
    tri_rule: QuadratureRule
    edge_rule: QuadratureRule
    phi: np.ndarray          # (nq, nP)
    dphi: np.ndarray         # (nq, nP, 2)
    psi: np.ndarray          # (nqe, k+1), edge basis in the edge's own parameter
    phi_on_edge: np.ndarray  # (3, 2, nqe, nP), [local edge, flipped]


@lru_cache(maxsize=None)
def reference_tables(degree: int) -> ReferenceTables:
    """Tabulate element and edge bases at the quadrature points for degree k."""
    fe = FeConfig(degree)
    tri_rule = triangle_quadrature(fe.n_quad_1d)
    edge_rule = edge_quadrature(fe.n_quad_1d)
    phi, dphi = eval_basis(fe, "triangle", tri_rule.points)
    psi, _ = eval_basis(fe, "edge", edge_rule.points)

    t = edge_rule.points
    phi_on_edge = np.empty((3, 2, t.size, fe.n_element_basis))
    for ell, (a, b) in enumerate(LOCAL_EDGES):
        for flipped in (0, 1):
            # Edge parameter runs from the lower to the higher global vertex
            tl = 1.0 - t if flipped else t
            pts = REF_VERTICES[a] + tl[:, None] * (REF_VERTICES[b] - REF_VERTICES[a])
            phi_on_edge[ell, flipped] = eval_basis(fe, "triangle", pts)[0]
    return ReferenceTables(tri_rule=tri_rule, edge_rule=edge_rule, phi=phi, dphi=dphi,
                           psi=psi, phi_on_edge=phi_on_edge)


@dataclass(frozen=True)
class TraceSpace:
    """
    Global numbering of the paired trace unknowns.

    Each non-Dirichlet edge owns a slot; its basis function a carries the
    y_hat dof 2*((k+1)*slot + a) and the p_hat dof right after it. The
    interface vector orders dofs by macro-edge, then mesh edge along it, then
    basis function, with the same interleaving.
    """
    fe: FeConfig
    edge_slot: np.ndarray            # (nE,), -1 on Dirichlet edges
    element_dofs: np.ndarray         # (nT, 6(k+1)), local (edge, basis, field) -> global, -1 if absent
    element_flipped: np.ndarray      # (nT, 3), local edge runs against the edge parameter
    num_dofs: int
    gamma_dofs: np.ndarray           # (nGamma,), global dof at each interface position
    interior_dofs: np.ndarray        # sorted global dofs not on the interface
    gamma_position: np.ndarray       # (num_dofs,), interface position or -1
    subdomain_gamma: List[np.ndarray]     # sorted interface positions touched by each subdomain
    subdomain_interior: List[np.ndarray]  # sorted global interior dofs of each subdomain

    @property
    def n_gamma(self) -> int:
        return int(self.gamma_dofs.shape[0])

    def edge_dofs(self, edge: int, field: Optional[int] = None) -> np.ndarray:
        """Global dofs of one edge, interleaved, or only one field (0 = y_hat, 1 = p_hat)."""
        return _edge_dofs(self.edge_slot, self.fe.n_edge_basis, edge, field)

    def multiplicity(self) -> np.ndarray:
        """Number of subdomains sharing each interface position."""
        counts = np.zeros(self.n_gamma, dtype=np.int64)
        for positions in self.subdomain_gamma:
            counts[positions] += 1
        return counts


def build_trace_space(mesh: Mesh, fe: FeConfig) -> TraceSpace:
    """
    Number the trace unknowns and split them into interior and interface sets.

    Args:
        mesh (Mesh): The mesh.
        fe (FeConfig): Degree of the edge space.

    Returns:
        TraceSpace: The numbering.
    """
    nb = fe.n_edge_basis
    n_edges = mesh.edges.shape[0]
    active = mesh.edge_class != DIRICHLET
    edge_slot = np.full(n_edges, -1, dtype=np.int64)
    edge_slot[active] = np.arange(int(np.count_nonzero(active)))
    num_dofs = 2 * nb * int(np.count_nonzero(active))

    # Element -> global dofs, ordered (local edge, basis function, field). The
    # element matrices use the edge's own parameter, so no reversal is needed.
    tris = mesh.triangles
    flipped = np.stack([tris[:, a] > tris[:, b] for a, b in LOCAL_EDGES], axis=1)
    slots = edge_slot[mesh.triangle_edges]  # (nT, 3)
    scalar = nb * slots[:, :, None] + np.arange(nb)
    element_dofs = np.stack([2 * scalar, 2 * scalar + 1], axis=-1)
    element_dofs[slots < 0] = -1
    element_dofs = element_dofs.reshape(tris.shape[0], -1)

    gamma = []
    for me in macro_edges(mesh):
        for e in me.edges:
            gamma.append(_edge_dofs(edge_slot, nb, int(e)))
    gamma_dofs = np.concatenate(gamma) if gamma else np.empty(0, dtype=np.int64)
    gamma_position = np.full(num_dofs, -1, dtype=np.int64)
    gamma_position[gamma_dofs] = np.arange(gamma_dofs.shape[0])
    interior_dofs = np.flatnonzero(gamma_position < 0)

    subdomain_gamma = []
    subdomain_interior = []
    for sub in range(mesh.num_subdomains):
        dofs = element_dofs[mesh.subdomain_triangles(sub)].ravel()
        dofs = np.unique(dofs[dofs >= 0])
        pos = gamma_position[dofs]
        subdomain_gamma.append(np.sort(pos[pos >= 0]))
        subdomain_interior.append(dofs[pos < 0])

    n_gamma_edges = mesh.count_edges(INTERFACE)
    logger.info(f"Trace space: k={fe.degree}, {num_dofs} dofs, {gamma_dofs.shape[0]} on the interface "
                f"({n_gamma_edges} interface edges)")
    return TraceSpace(fe=fe, edge_slot=edge_slot, element_dofs=element_dofs, element_flipped=flipped,
                      num_dofs=num_dofs, gamma_dofs=gamma_dofs, interior_dofs=interior_dofs,
                      gamma_position=gamma_position, subdomain_gamma=subdomain_gamma,
                      subdomain_interior=subdomain_interior)


def _edge_dofs(edge_slot: np.ndarray, nb: int, edge: int, field: Optional[int] = None) -> np.ndarray:
    slot = int(edge_slot[edge])
    if slot < 0:
        return np.empty(0, dtype=np.int64)
    base = 2 * (nb * slot + np.arange(nb))
    if field is None:
        return np.column_stack([base, base + 1]).ravel()
    return base + field
