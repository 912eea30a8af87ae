"""
Diagnostics for the hdg-bddc solver: mesh-dependent trace norms, the
closed-form convergence bound factors and empirical estimates of the same
constants. All generic constants are set to 1, so the factors describe
trends and are not certified bounds.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Union

import numpy as np

from config import ConfigurationError, ELEMENT_CHUNK
from condensation import TraceSystem, m_inner, split_BZ
from config_experiments import BOUNDS_CSV_COLUMNS
from fespace import TraceSpace, reference_tables
from hdg_assembly import element_edge_geometry
from krylov import Operator
from mesh import Mesh
from schur import SubdomainOperator, extend_interface

logger = logging.getLogger('hdg-bddc.diagnostics')


@dataclass(frozen=True)
class BoundFactors:
    beta: float
    H: float
    h: float
    c0: float
    gamma1: float
    alpha1: float
    alpha2: float
    c1: float
    c2: float
    c3: float
    c4: float
    C_ED: float
    C_EDM: float
    Cu_factor: float
    cl_factor: float

    def predicted_rate(self, m: int) -> float:
        """(1 - c_l^2 / C_u^2)^(m/2); nan when c_l is not positive."""
        if self.cl_factor <= 0:
            return float('nan')
        return float((1.0 - self.cl_factor ** 2 / self.Cu_factor ** 2) ** (m / 2.0))

    def csv_row(self) -> Dict[str, float]:
        values = asdict(self)
        return {key: values[key] for key in BOUNDS_CSV_COLUMNS}


def bound_factors(beta: float, H: float, h: float) -> BoundFactors:
    """
    Evaluate the bound factors of the convergence estimate with C = 1.

    Args:
        beta (float): Regularization parameter.
        H (float): Subdomain size.
        h (float): Mesh size.

    Returns:
        BoundFactors: All factors.
    """
    if beta <= 0 or H <= 0 or h <= 0:
        raise ConfigurationError(f"beta, H and h must be positive, got {beta}, {H}, {h}")
    if H < h:
        raise ConfigurationError(f"H must not be smaller than h, got H={H}, h={h}")
    log_factor = 1.0 + np.log(H / h)
    c0 = h * beta ** -0.5 + 1.0
    C_ED = c0 * (1.0 + H * beta ** -0.5) * log_factor
    C_EDM = (1.0 + c0 * H * beta ** -0.25) * C_ED
    gamma1 = (1.0 + beta ** 0.25) * c0
    alpha1 = H * ((1.0 + beta ** -0.5) * c0 ** 2 + beta ** -0.25)
    alpha2 = H * ((1.0 + beta ** -0.5) * c0 ** 2 + beta ** -0.25 * C_ED)
    c1 = c0 * H * beta ** -0.25 * C_ED
    c2 = gamma1 * alpha2
    c3 = c0 * H * (1.0 + beta ** -0.5)
    c4 = gamma1 * alpha1
    Cu = C_EDM ** 2
    cl = 1.0 - c2 * C_EDM - c3 * C_EDM ** 2
    return BoundFactors(beta=beta, H=H, h=h, c0=c0, gamma1=gamma1, alpha1=alpha1, alpha2=alpha2,
                        c1=c1, c2=c2, c3=c3, c4=c4, C_ED=C_ED, C_EDM=C_EDM, Cu_factor=Cu, cl_factor=cl)


def remark_bounds(beta: float, H: float, h: float, delta: Optional[float] = None) -> Dict[str, float]:
    """
    Simplified factors: for beta = O(1), C_u = (1 + log(H/h))^2 and
    c_l = 1 - H (1 + log(H/h))^2; for beta = O(h^(2-delta)) the H in c_l
    becomes H h^(-1+delta/2).
    """
    if beta <= 0 or H <= 0 or h <= 0 or H < h:
        raise ConfigurationError(f"invalid beta/H/h: {beta}, {H}, {h}")
    log2 = (1.0 + np.log(H / h)) ** 2
    if delta is None:
        return {"Cu": log2, "cl": 1.0 - H * log2}
    if not 0.0 < delta < 2.0:
        raise ConfigurationError(f"delta must lie in (0, 2), got {delta}")
    return {"Cu": log2, "cl": 1.0 - H * h ** (-1.0 + delta / 2.0) * log2}


def _region_elements(mesh: Mesh, region: Union[None, int, np.ndarray]) -> np.ndarray:
    if region is None:
        return np.arange(mesh.triangles.shape[0])
    if np.isscalar(region):
        return mesh.subdomain_triangles(int(region))
    return np.asarray(region, dtype=np.int64)


def region_measures(mesh: Mesh, elements: np.ndarray):
    """Area |D| and perimeter |dD| of a union of elements."""
    area = float(mesh.triangle_areas()[elements].sum())
    counts = np.bincount(mesh.triangle_edges[elements].ravel(), minlength=mesh.edges.shape[0])
    perimeter = float(mesh.edge_lengths()[counts == 1].sum())
    return area, perimeter


def _boundary_moments(mesh: Mesh, trace: TraceSpace, lam: np.ndarray, elements: np.ndarray,
                      field: Optional[int]):
    """Per element: int_{dK} lam^2, int_{dK} lam and |dK|."""
    tables = reference_tables(trace.fe.degree)
    nb = trace.fe.n_edge_basis
    fields = [0, 1] if field is None else [field]
    sq = np.zeros(elements.size)
    mean = np.zeros((elements.size, len(fields)))
    perim = np.zeros(elements.size)
    for start in range(0, elements.size, ELEMENT_CHUNK):
        el = elements[start:start + ELEMENT_CHUNK]
        _, lengths, _, _ = element_edge_geometry(mesh, el, tables.edge_rule.points)
        we = tables.edge_rule.weights[None, None, :] * lengths[:, :, None]
        dofs = trace.element_dofs[el]
        lam_K = np.where(dofs >= 0, lam[np.maximum(dofs, 0)], 0.0).reshape(el.size, 3, nb, 2)
        sl = slice(start, start + el.size)
        for col, f in enumerate(fields):
            vals = np.einsum('qj,clj->clq', tables.psi, lam_K[..., f])
            sq[sl] += np.sum(we * vals * vals, axis=(1, 2))
            mean[sl, col] = np.sum(we * vals, axis=(1, 2))
        perim[sl] = lengths.sum(axis=1)
    return sq, mean, perim


def h_norm(mesh: Mesh, trace: TraceSpace, lam: np.ndarray, region=None, field: Optional[int] = None,
           local: bool = False) -> float:
    """
    ||lam||_{h,D}^2 = sum_K ||lam||_{dK}^2 |D|/|dD|.

    Args:
        mesh (Mesh): The mesh.
        trace (TraceSpace): Trace numbering.
        lam (np.ndarray): Trace vector over all dofs.
        region: None (whole domain), a subdomain id or an array of element ids.
        field (int): 0 or 1 for one field, None for both.
        local (bool): Use |K|/|dK| per element instead of the region ratio.

    Returns:
        float: The norm.
    """
    elements = _region_elements(mesh, region)
    sq, _, perim = _boundary_moments(mesh, trace, np.asarray(lam, dtype=float), elements, field)
    if local:
        ratio = mesh.triangle_areas()[elements] / perim
    else:
        area, perimeter = region_measures(mesh, elements)
        ratio = area / perimeter
    return float(np.sqrt(np.sum(sq * ratio)))


def triple_norm(mesh: Mesh, trace: TraceSpace, lam: np.ndarray, region=None, field: Optional[int] = None,
                local: bool = False) -> float:
    """|||lam|||_D^2 = sum_K ||lam - m_K(lam)||_{dK}^2 (|D|/|dD|)^-1 with m_K the boundary mean."""
    elements = _region_elements(mesh, region)
    sq, mean, perim = _boundary_moments(mesh, trace, np.asarray(lam, dtype=float), elements, field)
    centered = np.maximum(sq - np.sum(mean ** 2, axis=1) / perim, 0.0)
    if local:
        ratio = mesh.triangle_areas()[elements] / perim
    else:
        area, perimeter = region_measures(mesh, elements)
        ratio = area / perimeter
    return float(np.sqrt(np.sum(centered / ratio)))


def m_gamma_norm(ts: TraceSystem, ops: List[SubdomainOperator], lam_gamma: np.ndarray, B=None) -> float:
    """M-norm of an interface vector through its subdomain extension."""
    full = extend_interface(ops, ts, lam_gamma)
    return float(np.sqrt(max(m_inner(ts, full, full, B=B), 0.0)))


def estimate_field_of_values(ts: TraceSystem, ops: List[SubdomainOperator], apply_S: Operator,
                             apply_P: Operator, samples: int = 10, seed: int = 0) -> Dict[str, float]:
    """
    Empirical lower and upper constants of T = P^-1 S in the M-inner product:
    c_l ~ min <x, Tx>_M / <x, x>_M and C_u ~ max ||Tx||_M / ||x||_M over
    random interface vectors.
    """
    B, _ = split_BZ(ts)
    rng = np.random.default_rng(seed)
    n_gamma = ts.trace.n_gamma
    lower, upper = np.inf, 0.0
    for _ in range(samples):
        x = rng.standard_normal(n_gamma)
        Tx = apply_P(apply_S(x))
        xf = extend_interface(ops, ts, x)
        Tf = extend_interface(ops, ts, Tx)
        xx = m_inner(ts, xf, xf, B=B)
        lower = min(lower, m_inner(ts, Tf, xf, B=B) / xx)
        upper = max(upper, np.sqrt(m_inner(ts, Tf, Tf, B=B) / xx))
    logger.info(f"Observed c_l ~ {lower:.3e}, C_u ~ {upper:.3e} over {samples} samples")
    return {"cl_observed": float(lower), "Cu_observed": float(upper)}
