#!/usr/bin/env python3
"""
Example script demonstrating the hdg-bddc solver on a small problem.

This script shows how to:
1. Run one manufactured test case with BDDC-preconditioned GMRES
2. Compare the primal constraint families on the same case
3. Print the residual history next to the predicted convergence rate

Usage:
    python example_solve.py
"""

import os

from diagnostics import bound_factors
from experiments import CaseConfig, run_case, save_json


def main():
    """Main example function."""
    cfg = CaseConfig(test=2, k=1, beta=1e-4, nsub=4, hh=4)
    print(f"🧮 Solving test {cfg.test} (k={cfg.k}, beta={cfg.beta:g}) on {cfg.nsub}x{cfg.nsub} subdomains, H/h={cfg.hh}")

    try:
        result = run_case(cfg)
    except Exception as e:
        print(f"❌ Error: {str(e)}")
        return

    print("\n" + "="*60)
    print("📈 GMRES RESIDUAL HISTORY")
    print("="*60)
    r0 = result.residual_history[0] if result.residual_history else 1.0
    for i, (r, rate) in enumerate(zip(result.residual_history, result.predicted_rate)):
        print(f"  {i:3d}  {r / r0:.3e}   predicted bound {rate:.3e}")

    print(f"\n📊 Interface unknowns: {result.n_gamma}, primal unknowns: {result.n_primal}")
    print(f"   Iterations: {result.iterations} ({'converged' if result.converged else 'not converged'})")
    print(f"   True residual: {result.final_true_res:.2e}")
    print(f"   L2 errors: y {result.l2err_y:.3e}, p {result.l2err_p:.3e}")

    factors = bound_factors(cfg.beta, 1.0 / cfg.nsub, 1.0 / (cfg.nsub * cfg.hh))
    print(f"   Bound factors: Cu={factors.Cu_factor:.3g}, cl={factors.cl_factor:.3g}")

    print("\n" + "="*60)
    print("🔧 PRIMAL CONSTRAINT FAMILIES")
    print("="*60)
    for primal in ("avg", "avg+flux", "avg+flux+moment"):
        variant = run_case(CaseConfig(test=cfg.test, k=cfg.k, beta=cfg.beta, nsub=cfg.nsub, hh=cfg.hh, primal=primal))
        print(f"  {primal:<16} {variant.iterations:3d} iterations, {variant.n_primal} primal unknowns")

    output_path = save_json([result], os.path.join("results", "example_solve.json"))
    print(f"\n✅ Saved full result to: {output_path}")


if __name__ == "__main__":
    main()
