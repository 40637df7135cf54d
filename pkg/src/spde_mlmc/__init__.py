"""Multilevel Monte Carlo for the stochastic heat equation on (0, 1).

The package simulates dX = (AX + F(X)) dt + dW with additive space-time
white noise, discretised by P1 finite elements in space and a semi-implicit
Euler-Maruyama scheme in time on a dyadic hierarchy with dt = h^2, and
compares sample schedules derived from weak versus strong convergence rates.
"""

from .errors import CapacityError, NumericalError, UsageError
from .fem import (
    DriftSpec,
    TridiagonalMatrix,
    ZERO_DRIFT,
    assemble,
    euler_step,
    initial_field,
    mass_norm,
    mass_norm_sq,
    run_deterministic,
    thomas_solve,
)
from .grid import LevelGeometry, NodalField, make_level, prolong, prolong_to, zero_field
from .metrics import (
    ErrorReport,
    exact_mean,
    exact_mean_values,
    fit_slope,
    rms_aggregate,
    rms_error,
)
from .mlmc import (
    FunctionalSpec,
    IDENTITY,
    LevelStat,
    MlmcResult,
    SQUARED_NORM,
    SampleSchedule,
    WorkPrediction,
    apply_functional,
    build_schedule,
    mc_estimate,
    mlmc_estimate,
    pair_op_work,
    pair_variances,
    predict_work,
    sample_pair,
)
from .noise import (
    KLBlock,
    ProjectionMatrix,
    coarsen_block,
    kl_modes,
    noise_load,
    path_stream,
    projection_matrix,
    sample_kl_block,
)

__version__ = "0.1.0"
