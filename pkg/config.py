"""
Configuration settings for the hdg-bddc solver.
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file if it exists
load_dotenv()

# GMRES stopping rule: relative reduction of the preconditioned residual
DEFAULT_GMRES_TOL = float(os.getenv("HDG_BDDC_GMRES_TOL", "1e-11"))

# Default settings
DEFAULT_OUTPUT_DIR = os.getenv("HDG_BDDC_OUTPUT_DIR", "results")
DEFAULT_DEGREE = 1
DEFAULT_BETA = 1.0

# Warn above this many trace unknowns
MAX_TRACE_DOFS = int(os.getenv("HDG_BDDC_MAX_TRACE_DOFS", "2000000"))

# Concurrent cases in a sweep
DEFAULT_WORKERS = int(os.getenv("HDG_BDDC_WORKERS", "1"))

# Element batch size for vectorised assembly
ELEMENT_CHUNK = 2048

# Primal constraint filtering
CONSTRAINT_ZERO_TOL = 1e-12   # times macro-edge length
CONSTRAINT_DEPENDENT_TOL = 1e-10


class SolverError(Exception):
    """Base class for solver failures."""


class ConfigurationError(SolverError):
    """Invalid mesh, discretization or constraint configuration."""
