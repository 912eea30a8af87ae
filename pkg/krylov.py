"""
Full GMRES with left preconditioning for the hdg-bddc interface problem.
Arnoldi by modified Gram-Schmidt with one reorthogonalization pass and a
Givens-rotation update of the least squares problem.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.linalg import solve_triangular

from config import ConfigurationError, DEFAULT_GMRES_TOL

logger = logging.getLogger('hdg-bddc.krylov')

Operator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GmresConfig:
    """Stopping rule ||P(b - A x)|| <= rel_tol ||P b|| and iteration cap (None = problem size)."""
    rel_tol: float = DEFAULT_GMRES_TOL
    max_iters: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ConfigurationError(f"rel_tol must lie in (0, 1), got {self.rel_tol}")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be positive, got {self.max_iters}")


@dataclass
class GmresReport:
    solution: np.ndarray
    iterations: int
    residual_history: List[float]
    converged: bool
    breakdown: bool
    true_residual: float = float('nan')
    orthogonality_error: float = 0.0
    extra_history: List[float] = field(default_factory=list)

    @property
    def relative_history(self) -> List[float]:
        if not self.residual_history or self.residual_history[0] == 0:
            return list(self.residual_history)
        r0 = self.residual_history[0]
        return [r / r0 for r in self.residual_history]


def _apply_rotations(h: np.ndarray, cs: np.ndarray, sn: np.ndarray, j: int) -> None:
    for i in range(j):
        temp = cs[i] * h[i] + sn[i] * h[i + 1]
        h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
        h[i] = temp


def gmres(apply_A: Operator, apply_P: Optional[Operator], b: np.ndarray,
          cfg: Optional[GmresConfig] = None,
          callback: Optional[Callable[[np.ndarray], float]] = None) -> GmresReport:
    """
    Solve P A x = P b from a zero initial guess.

    Args:
        apply_A (Operator): The system operator.
        apply_P (Operator): The preconditioner, identity if None.
        b (np.ndarray): Right-hand side.
        cfg (GmresConfig): Stopping rule.
        callback: Called with the current iterate after every step; its
            return values are collected in `extra_history`.

    Returns:
        GmresReport: Solution, residual history and flags.
    """
    cfg = cfg or GmresConfig()
    apply_P = apply_P or (lambda v: v)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    max_iters = min(cfg.max_iters or n, n) if n else 0

    r0 = np.array(apply_P(b.copy()), dtype=float)
    beta = float(np.linalg.norm(r0))
    history = [beta]
    if beta == 0.0 or max_iters == 0:
        logger.info("GMRES: zero right-hand side")
        return GmresReport(solution=np.zeros(n), iterations=0, residual_history=history,
                           converged=True, breakdown=False, true_residual=0.0)

    V = np.zeros((n, max_iters + 1))
    H = np.zeros((max_iters + 1, max_iters))
    cs = np.zeros(max_iters)
    sn = np.zeros(max_iters)
    g = np.zeros(max_iters + 1)
    g[0] = beta
    V[:, 0] = r0 / beta

    target = cfg.rel_tol * beta
    converged = False
    breakdown = False
    extra = []
    j = 0
    for j in range(max_iters):
        w = np.array(apply_P(apply_A(V[:, j].copy())), dtype=float)
        w_norm0 = np.linalg.norm(w)
        for _ in range(2):
            for i in range(j + 1):
                h = np.dot(V[:, i], w)
                H[i, j] += h
                w -= h * V[:, i]
        h_next = np.linalg.norm(w)
        H[j + 1, j] = h_next

        _apply_rotations(H[:, j], cs, sn, j)
        nu = np.hypot(H[j, j], H[j + 1, j])
        if nu == 0.0:
            breakdown = True
            logger.warning(f"GMRES: singular Hessenberg matrix at step {j + 1}")
            break
        cs[j] = H[j, j] / nu
        sn[j] = H[j + 1, j] / nu
        H[j, j] = nu
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]

        res = abs(g[j + 1])
        history.append(float(res))
        logger.debug(f"GMRES step {j + 1}: preconditioned residual {res:.3e} (relative {res / beta:.3e})")

        if callback is not None:
            y = solve_triangular(H[:j + 1, :j + 1], g[:j + 1])
            extra.append(callback(V[:, :j + 1] @ y))

        if res <= target:
            converged = True
            break
        if h_next <= 1e-14 * max(w_norm0, 1e-300):
            breakdown = True
            logger.info(f"GMRES: Arnoldi breakdown at step {j + 1}")
            break
        V[:, j + 1] = w / h_next

    k = j + 1 if not (breakdown and H[j, j] == 0.0) else j
    if k > 0:
        y = solve_triangular(H[:k, :k], g[:k])
        x = V[:, :k] @ y
    else:
        x = np.zeros(n)

    b_norm = float(np.linalg.norm(b))
    true_res = float(np.linalg.norm(b - apply_A(x.copy())) / b_norm) if b_norm > 0 else 0.0
    basis = V[:, :k]
    ortho = float(np.max(np.abs(basis.T @ basis - np.eye(k)))) if k else 0.0

    report = GmresReport(solution=x, iterations=k, residual_history=history, converged=converged,
                         breakdown=breakdown, true_residual=true_res, orthogonality_error=ortho,
                         extra_history=extra)
    if converged:
        logger.info(f"GMRES converged in {k} iterations (true relative residual {true_res:.2e})")
    else:
        logger.warning(f"GMRES stopped after {k} iterations without reaching rel_tol={cfg.rel_tol:g}")
    return report
