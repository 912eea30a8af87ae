"""
HDG element assembly for the hdg-bddc solver.

Every element carries two copies of the local advection-diffusion system,
one for the state (field 0) and one for the adjoint (field 1). The local
unknowns of one field are ordered

    [q_x (nP), q_y (nP), u (nP), trace (3 edges x (k+1))]

and the coupled element matrix is [[sqrt(beta) A1, -L], [L, sqrt(beta) A2]]
where L is the element mass matrix acting between the two scalar fields.
The adjoint copy is the state operator with the velocity reversed.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from config import ConfigurationError, DEFAULT_DEGREE
from fespace import FeConfig, reference_tables
from mesh import Mesh

logger = logging.getLogger('hdg-bddc.hdg_assembly')

VelocityField = Callable[[np.ndarray], np.ndarray]
ScalarField = Callable[[np.ndarray], np.ndarray]

# Field signs: the adjoint advects against the velocity
FIELD_SIGNS = (1.0, -1.0)


def uniform_flow(x: np.ndarray) -> np.ndarray:
    """zeta = (1, 0)"""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    out[..., 0] = 1.0
    return out


def rotating_flow(x: np.ndarray) -> np.ndarray:
    """zeta = (x2, -x1)"""
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 1], -x[..., 0]], axis=-1)


def zero_flow(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(x, dtype=float))


# Built-in velocities are divergence free by construction
VELOCITY_FIELDS: Dict[str, VelocityField] = {
    "test1": uniform_flow,
    "test2": rotating_flow,
    "zero": zero_flow,
}


def zero_source(x: np.ndarray) -> np.ndarray:
    return np.zeros(np.asarray(x).shape[:-1])


def resolve_velocity(velocity: Union[str, VelocityField]) -> VelocityField:
    """
    Turn a velocity name or callable into a callable, checking the divergence
    of user supplied fields by central differences.
    """
    if isinstance(velocity, str):
        if velocity not in VELOCITY_FIELDS:
            raise ConfigurationError(f"Unknown velocity '{velocity}', expected one of {sorted(VELOCITY_FIELDS)}")
        return VELOCITY_FIELDS[velocity]
    if not callable(velocity):
        raise ConfigurationError(f"velocity must be a name or a callable, got {type(velocity).__name__}")

    rng = np.random.default_rng(7)
    pts = rng.uniform(0.1, 0.9, size=(8, 2))
    step = 1e-5
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    div = ((velocity(pts + ex)[:, 0] - velocity(pts - ex)[:, 0])
           + (velocity(pts + ey)[:, 1] - velocity(pts - ey)[:, 1])) / (2.0 * step)
    scale = max(1.0, float(np.max(np.abs(velocity(pts)))))
    if np.max(np.abs(div)) > 1e-6 * scale:
        raise ConfigurationError(f"velocity is not divergence free (max |div| = {np.max(np.abs(div)):.3e})")
    return velocity


@dataclass(frozen=True)
class ProblemConfig:
    """Regularization beta, velocity zeta and the sources f (state) and g (adjoint)."""
    beta: float
    velocity: Union[str, VelocityField] = "test1"
    f: Optional[ScalarField] = None
    g: Optional[ScalarField] = None

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ConfigurationError(f"beta must be positive and finite, got {self.beta}")
        resolve_velocity(self.velocity)

    @property
    def sqrt_beta(self) -> float:
        return float(np.sqrt(self.beta))

    @property
    def velocity_field(self) -> VelocityField:
        return resolve_velocity(self.velocity)

    @property
    def sources(self) -> Tuple[ScalarField, ScalarField]:
        return (self.f or zero_source, self.g or zero_source)


@dataclass(frozen=True)
class Stabilizers:
    """
    Per element edge stabilization.

    tau1 is constant on each element edge; tau2 = tau1 - zeta.n is stored at
    the edge quadrature points together with zeta.n itself.
    """
    tau1: np.ndarray   # (nT, 3)
    flux: np.ndarray   # (nT, 3, nqe), zeta.n with n the element's outward normal
    tau2: np.ndarray   # (nT, 3, nqe)

    def field_tau(self, field: int) -> np.ndarray:
        if field == 0:
            return np.broadcast_to(self.tau1[:, :, None], self.flux.shape)
        return self.tau2


def element_edge_geometry(mesh: Mesh, elements: np.ndarray, edge_points: np.ndarray):
    """
    Physical quadrature data on the three edges of each element.

    Returns:
        Tuple: points (c, 3, nqe, 2), edge lengths (c, 3), outward normals
        (c, 3, 2) and the flip flags (c, 3) of the local edges.
    """
    edges = mesh.edges[mesh.triangle_edges[elements]]  # (c, 3, 2) low, high
    low = mesh.vertices[edges[..., 0]]
    high = mesh.vertices[edges[..., 1]]
    d = high - low
    lengths = np.hypot(d[..., 0], d[..., 1])
    points = low[:, :, None, :] + edge_points[None, None, :, None] * d[:, :, None, :]
    normals = mesh.element_normals[elements]
    tris = mesh.triangles[elements]
    flipped = np.stack([tris[:, 0] > tris[:, 1], tris[:, 1] > tris[:, 2], tris[:, 2] > tris[:, 0]], axis=1)
    return points, lengths, normals, flipped


def stabilizers_for(mesh: Mesh, velocity: Union[str, VelocityField], fe: Optional[FeConfig] = None) -> Stabilizers:
    """
    tau1 = max(sup_E zeta.n, 0) + 1 and tau2 = tau1 - zeta.n on every element edge.

    The supremum is taken over the edge end points, exact when zeta.n is
    affine along the edge (both built-in fields).

    Args:
        mesh (Mesh): The mesh.
        velocity: Velocity name or callable.
        fe (FeConfig): Degree, fixes the edge quadrature points.

    Returns:
        Stabilizers: The stabilization parameters.
    """
    fe = fe or FeConfig(DEFAULT_DEGREE)
    zeta = resolve_velocity(velocity)
    tables = reference_tables(fe.degree)
    elements = np.arange(mesh.triangles.shape[0])
    t = tables.edge_rule.points
    ends = np.array([0.0, 1.0])
    pts_end, _, normals, _ = element_edge_geometry(mesh, elements, ends)
    pts_q, _, _, _ = element_edge_geometry(mesh, elements, t)

    flux_end = np.einsum('clqd,cld->clq', zeta(pts_end), normals)
    tau1 = np.maximum(flux_end.max(axis=2), 0.0) + 1.0
    flux = np.einsum('clqd,cld->clq', zeta(pts_q), normals)
    tau2 = tau1[:, :, None] - flux

    margin = tau1[:, :, None] - 0.5 * flux
    if np.any(margin <= 0):
        bad = int(np.argwhere(margin <= 0)[0, 0])
        raise ConfigurationError(f"tau1 - zeta.n/2 is not positive on element {bad}")
    logger.debug(f"Stabilizers: tau1 in [{tau1.min():.3f}, {tau1.max():.3f}]")
    return Stabilizers(tau1=tau1, flux=flux, tau2=tau2)


def check_stabilizers(stab: Stabilizers) -> Dict[str, float]:
    """
    Report the stabilizer assumptions: the per-element constant
    C_K = min_E inf_E (tau1 - zeta.n/2), the largest C* with
    inf_E (tau1 - zeta.n/2) >= C* max_E |zeta.n|, the upper bound of tau1 and
    the error of the identity tau1 = tau2 + zeta.n.
    """
    margin = stab.tau1[:, :, None] - 0.5 * stab.flux
    inf_edge = margin.min(axis=2)
    max_flux = np.abs(stab.flux).max(axis=2)
    with np.errstate(divide='ignore'):
        ratios = np.where(max_flux > 0, inf_edge / np.where(max_flux > 0, max_flux, 1.0), np.inf)
    identity = np.abs(stab.tau1[:, :, None] - stab.tau2 - stab.flux)
    return {
        "C_K_min": float(inf_edge.min(axis=1).min()),
        "C_star": float(ratios.min()),
        "tau1_max": float(stab.tau1.max()),
        "identity_error": float(identity.max()),
    }


def local_sizes(fe: FeConfig) -> Tuple[int, int, int]:
    """(nP, k+1, size of one field's local system)."""
    nP = fe.n_element_basis
    nb = fe.n_edge_basis
    return nP, nb, 3 * nP + 3 * nb


def element_system(mesh: Mesh, fe: FeConfig, prob: ProblemConfig, stab: Stabilizers,
                   elements: np.ndarray, coupling: bool = True):
    """
    Coupled element matrices and loads for a batch of elements.

    Args:
        mesh (Mesh): The mesh.
        fe (FeConfig): Degree.
        prob (ProblemConfig): Beta, velocity and sources.
        stab (Stabilizers): Stabilization parameters.
        elements (np.ndarray): Element ids of the batch.
        coupling (bool): Include the +-L blocks between the fields.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: matrices (c, 2n, 2n),
        loads (c, 2n) and element mass matrices (c, nP, nP), with n the size
        of one field's local system.
    """
    elements = np.asarray(elements, dtype=np.int64)
    tables = reference_tables(fe.degree)
    nP, nb, nloc = local_sizes(fe)
    c = elements.shape[0]
    zeta = prob.velocity_field
    sqb = prob.sqrt_beta

    # Volume terms
    p = mesh.vertices[mesh.triangles[elements]]  # (c, 3, 2)
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are the reference axes
    detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    invJ = np.linalg.inv(J)
    xq = p[:, None, 0, :] + np.einsum('crs,qs->cqr', J, tables.tri_rule.points)
    w = tables.tri_rule.weights[None, :] * np.abs(detJ)[:, None]
    phi = tables.phi
    grad = np.einsum('qir,crd->cqid', tables.dphi, invJ)

    M = np.einsum('cq,qi,qj->cij', w, phi, phi)
    Dx = np.einsum('cq,qi,cqj->cij', w, phi, grad[..., 0])
    Dy = np.einsum('cq,qi,cqj->cij', w, phi, grad[..., 1])
    zg = np.einsum('cqd,cqid->cqi', zeta(xq), grad)
    conv = np.einsum('cq,cqi,qj->cij', w, zg, phi)

    # Edge terms
    t = tables.edge_rule.points
    pts, lengths, normals, flipped = element_edge_geometry(mesh, elements, t)
    we = tables.edge_rule.weights[None, None, :] * lengths[:, :, None]
    phiE = tables.phi_on_edge[np.arange(3)[None, :], flipped.astype(np.int64)]  # (c, 3, nqe, nP)
    psi = tables.psi
    flux = stab.flux[elements]
    Nx = np.einsum('clq,clqi,qj,cl->cilj', we, phiE, psi, normals[..., 0]).reshape(c, nP, 3 * nb)
    Ny = np.einsum('clq,clqi,qj,cl->cilj', we, phiE, psi, normals[..., 1]).reshape(c, nP, 3 * nb)

    qx, qy, u, lam = slice(0, nP), slice(nP, 2 * nP), slice(2 * nP, 3 * nP), slice(3 * nP, nloc)
    A = np.zeros((c, 2 * nloc, 2 * nloc))
    for field, s in enumerate(FIELD_SIGNS):
        tau = stab.field_tau(field)[elements]
        Tuu = np.einsum('clq,clqi,clqj->cij', we * tau, phiE, phiE)
        Tul = np.einsum('clq,clqi,qj->cilj', we * (s * flux - tau), phiE, psi).reshape(c, nP, 3 * nb)
        Tlu = -np.einsum('clq,qi,clqj->clij', we * tau, psi, phiE).reshape(c, 3 * nb, nP)
        Tll_blocks = np.einsum('clq,qi,qj->clij', we * (tau - s * flux), psi, psi)
        Tll = np.zeros((c, 3 * nb, 3 * nb))
        for ell in range(3):
            Tll[:, ell * nb:(ell + 1) * nb, ell * nb:(ell + 1) * nb] = Tll_blocks[:, ell]

        Af = np.zeros((c, nloc, nloc))
        Af[:, qx, qx] = -M
        Af[:, qy, qy] = -M
        Af[:, qx, u] = Dx.transpose(0, 2, 1)
        Af[:, qy, u] = Dy.transpose(0, 2, 1)
        Af[:, qx, lam] = -Nx
        Af[:, qy, lam] = -Ny
        Af[:, u, qx] = Dx
        Af[:, u, qy] = Dy
        Af[:, u, u] = -s * conv + Tuu
        Af[:, u, lam] = Tul
        Af[:, lam, qx] = -Nx.transpose(0, 2, 1)
        Af[:, lam, qy] = -Ny.transpose(0, 2, 1)
        Af[:, lam, u] = Tlu
        Af[:, lam, lam] = Tll
        off = field * nloc
        A[:, off:off + nloc, off:off + nloc] = sqb * Af

    u1 = slice(2 * nP, 3 * nP)
    u2 = slice(nloc + 2 * nP, nloc + 3 * nP)
    if coupling:
        A[:, u1, u2] = -M
        A[:, u2, u1] = M

    F = np.zeros((c, 2 * nloc))
    f, g = prob.sources
    F[:, u1] = np.einsum('cq,cq,qi->ci', w, f(xq), phi)
    F[:, u2] = np.einsum('cq,cq,qi->ci', w, g(xq), phi)
    return A, F, M


def condensation_layout(fe: FeConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Indices into the coupled element system for the interior unknowns
    [q1, u1, q2, u2] and for the interleaved trace unknowns
    (edge, basis function, field).
    """
    nP, nb, nloc = local_sizes(fe)
    interior = np.concatenate([np.arange(3 * nP), nloc + np.arange(3 * nP)])
    ell = np.repeat(np.arange(3), nb * 2)
    j = np.tile(np.repeat(np.arange(nb), 2), 3)
    fld = np.tile(np.arange(2), 3 * nb)
    trace = fld * nloc + 3 * nP + nb * ell + j
    return interior, trace


@dataclass(frozen=True)
class LocalBlocks:
    """
    Element matrices of one element in the [[sqrt(beta) A1, -L], [L, sqrt(beta) A2]] layout.

    `matrix` is the full coupled system, `load` its right-hand side
    (nonzero only in the scalar rows).
    """
    element: int
    fe: FeConfig
    matrix: np.ndarray
    load: np.ndarray
    mass: np.ndarray

    def field_block(self, row_field: int, col_field: int) -> np.ndarray:
        _, _, nloc = local_sizes(self.fe)
        return self.matrix[row_field * nloc:(row_field + 1) * nloc, col_field * nloc:(col_field + 1) * nloc]

    def block(self, field: int, row: str, col: str) -> np.ndarray:
        """Sub-block of one field: row/col in {"G", "u", "lam"} (flux, scalar, trace)."""
        nP, nb, _ = local_sizes(self.fe)
        parts = {"G": slice(0, 2 * nP), "u": slice(2 * nP, 3 * nP), "lam": slice(3 * nP, 3 * nP + 3 * nb)}
        return self.field_block(field, field)[parts[row], parts[col]]


def assemble_local(mesh: Mesh, element: int, fe: FeConfig, prob: ProblemConfig, stab: Stabilizers,
                   coupling: bool = True) -> LocalBlocks:
    """
    Element matrices of a single element.

    Args:
        mesh (Mesh): The mesh.
        element (int): Element id.
        fe (FeConfig): Degree.
        prob (ProblemConfig): Problem data.
        stab (Stabilizers): Stabilization parameters.
        coupling (bool): Include the +-L blocks; without them the matrix is
            block-diag(sqrt(beta) A1, sqrt(beta) A2).

    Returns:
        LocalBlocks: The element's blocks.
    """
    A, F, M = element_system(mesh, fe, prob, stab, np.array([element]), coupling=coupling)
    return LocalBlocks(element=int(element), fe=fe, matrix=A[0], load=F[0], mass=M[0])


def assemble_load(mesh: Mesh, element: int, fe: FeConfig, prob: ProblemConfig) -> np.ndarray:
    """Load vector (f, w1) and (g, w2) of one element; zero in the flux and trace rows."""
    stab = Stabilizers(tau1=np.ones((mesh.triangles.shape[0], 3)),
                       flux=np.zeros((mesh.triangles.shape[0], 3, fe.n_quad_1d)),
                       tau2=np.ones((mesh.triangles.shape[0], 3, fe.n_quad_1d)))
    _, F, _ = element_system(mesh, fe, prob, stab, np.array([element]))
    return F[0]
