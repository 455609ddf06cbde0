"""Run-wide settings: numeric constants and environment overrides."""

import logging
import os

from dotenv import load_dotenv

# ----- CONFIG -----

TOOL_VERSION = "0.4.0"

# Any state component above this magnitude aborts the path
BLOW_UP_LIMIT = 1e300

# Diagonal jitter for Cholesky factorizations of node covariances
CHOLESKY_JITTER = 1e-12

# Per-cell absolute tolerance of the discretization quadrature
CELL_QUAD_TOL = 1e-12

# kernel_l2_error integrates on [L2_FLOOR * T, T]
L2_FLOOR = 1e-6

# Coupled paths leaving a ball of this factor times the initial scale are truncated
TRUNCATION_FACTOR = 1e6

# Importance-weight estimates below this effective sample size are unreliable
MIN_EFFECTIVE_SAMPLES = 100

# Burkholder constant plugged into the Picard weighted norm
BDG_CONSTANT = 2.0

# Monte-Carlo acceptance margin in standard errors
MC_SIGMAS = 3.0

DEFAULT_OUT_DIR = "runs"
DEFAULT_THREADS = 1
DEFAULT_BATCH_SIZE = 2048

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SOFT_FAIL = 2


# ----- ENVIRONMENT -----

# This function fetches a setting from the process environment.
# A local .env file is loaded first so it can provide defaults.
def get_setting(key_name, default=None):
    """Fetch a setting from the environment or a local .env file."""
    load_dotenv(".env")
    value = os.getenv(key_name)
    return default if value in (None, "") else value


def default_out_dir():
    return get_setting("VOLTERRA_LIFT_OUT", DEFAULT_OUT_DIR)


def default_threads():
    raw = get_setting("VOLTERRA_LIFT_THREADS", DEFAULT_THREADS)
    try:
        return max(1, int(raw))
    except (TypeError, ValueError):
        return DEFAULT_THREADS


def configure_logging(quiet=False):
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
