"""Markovian lifts of stochastic Volterra equations with completely monotone kernels."""

from .coupling import CouplingConfig, coupling_config, harnack_check, simulate_coupled
from .dynamics import Coefficients, SimConfig, SimPath, simulate_lift, simulate_svie_direct
from .errors import (
    CoefficientError,
    ConfigError,
    CovarianceError,
    KernelError,
    MeasureMismatchError,
    NoInvariantMeasureError,
    VolterraLiftError,
)
from .gauss import sample_invariant, stationary_variance, strong_feller_witness, trace_qt
from .kernels import Damped, DiscreteMeasure, ExponentialSum, Fractional, Gamma, Shifted, discretize
from .liftspace import LiftState, norms
from .settings import TOOL_VERSION

__version__ = TOOL_VERSION
