"""
Sweep presets and reference iteration counts for the hdg-bddc experiments.
"""

from typing import Optional

# Regularization parameters swept in both tables
BETAS = [1.0, 1e-4, 1e-6, 1e-8]

# Built-in velocity fields by test number
VELOCITY_BY_TEST = {
    1: "test1",  # zeta = (1, 0)
    2: "test2",  # zeta = (x2, -x1)
}

# Primal constraint families accepted on the command line
PRIMAL_CHOICES = ["avg", "avg+flux", "avg+flux+moment"]
DEFAULT_PRIMAL = "avg+flux+moment"

PRESETS = {
    "table1": {
        "sweep": "subdomains",
        "nsub": [4, 8, 16, 32],
        "hh": [6],
    },
    "table2": {
        "sweep": "hh",
        "nsub": [6],
        "hh": [4, 8, 16, 20],
    },
}

# Published GMRES iteration counts, indexed [preset][test][k][beta] and then
# by the swept column (nsub for table1, hh for table2).
REFERENCE_ITERATIONS = {
    "table1": {
        1: {
            1: {1.0: [19, 21, 18, 17], 1e-4: [25, 21, 18, 16], 1e-6: [17, 21, 18, 15], 1e-8: [8, 11, 15, 18]},
            2: {1.0: [24, 27, 23, 22], 1e-4: [27, 21, 22, 26], 1e-6: [22, 22, 18, 21], 1e-8: [10, 15, 18, 21]},
        },
        2: {
            1: {1.0: [7, 6, 6, 5], 1e-4: [7, 6, 6, 5], 1e-6: [7, 6, 6, 5], 1e-8: [6, 6, 6, 5]},
            2: {1.0: [11, 10, 10, 12], 1e-4: [10, 10, 10, 10], 1e-6: [10, 9, 9, 9], 1e-8: [6, 8, 8, 8]},
        },
    },
    "table2": {
        1: {
            1: {1.0: [18, 23, 28, 29], 1e-4: [18, 22, 27, 29], 1e-6: [16, 21, 25, 27], 1e-8: [8, 11, 14, 15]},
            2: {1.0: [23, 29, 32, 33], 1e-4: [24, 28, 32, 33], 1e-6: [22, 23, 25, 26], 1e-8: [11, 16, 18, 19]},
        },
        2: {
            1: {1.0: [5, 7, 9, 9], 1e-4: [5, 7, 9, 9], 1e-6: [6, 7, 9, 9], 1e-8: [5, 7, 9, 9]},
            2: {1.0: [10, 11, 10, 10], 1e-4: [11, 9, 10, 14], 1e-6: [10, 9, 8, 8], 1e-8: [6, 7, 7, 7]},
        },
    },
}

CSV_COLUMNS = [
    "test", "k", "beta", "nsub", "hh", "iters", "final_true_res",
    "l2err_y", "l2err_p", "wall_ms", "paper_ref_iters", "delta",
]

BOUNDS_CSV_COLUMNS = ["beta", "H", "h", "c0", "C_ED", "C_EDM", "Cu_factor", "cl_factor"]


def reference_iterations(test: int, k: int, beta: float, nsub: int, hh: int) -> Optional[int]:
    """
    Look up the published iteration count for one case.

    Args:
        test (int): Test number (1 or 2).
        k (int): Polynomial degree.
        beta (float): Regularization parameter.
        nsub (int): Subdomains per side.
        hh (int): Elements per subdomain side (H/h).

    Returns:
        Optional[int]: The reference count, or None if the case is not tabulated.
    """
    for name, preset in PRESETS.items():
        if preset["sweep"] == "subdomains":
            if hh not in preset["hh"] or nsub not in preset["nsub"]:
                continue
            column = preset["nsub"].index(nsub)
        else:
            if nsub not in preset["nsub"] or hh not in preset["hh"]:
                continue
            column = preset["hh"].index(hh)
        by_beta = REFERENCE_ITERATIONS[name].get(test, {}).get(k, {})
        for ref_beta, counts in by_beta.items():
            if abs(ref_beta - beta) <= 1e-12 * max(ref_beta, beta):
                return counts[column]
    return None
