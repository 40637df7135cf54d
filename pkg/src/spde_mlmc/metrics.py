"""Exact-mean evaluation, RMS error estimators, and rate-slope fitting.

The mean of the solution has the closed form exp(-pi^2 t) sin(pi x), so
estimator quality is measured as the root mean square deviation from it at
the nodal points of a dyadic reference grid (2**r + 1 points including both
boundary points, where estimator and mean both vanish).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .grid import LevelGeometry, NodalField, prolong_to


def exact_mean(t: float, level: LevelGeometry) -> NodalField:
    """Nodal values of exp(-pi^2 t) sin(pi x) at time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"time {t} outside [0, 1]")
    return NodalField(level, math.exp(-math.pi**2 * t) * np.sin(np.pi * level.nodes))


def exact_mean_values(t: float, x: np.ndarray) -> np.ndarray:
    return math.exp(-math.pi**2 * t) * np.sin(np.pi * np.asarray(x, dtype=np.float64))


def reference_points(m: int) -> int:
    """Validate an evaluation grid size m = 2**r + 1 and return r."""
    r = (m - 1).bit_length() - 1
    if m < 2 or 2**r + 1 != m:
        raise UsageError(f"evaluation grid size must be 2**r + 1, got {m}")
    return r


def rms_error(estimate: NodalField, m: int) -> float:
    """RMS deviation of an estimator field from the exact mean at T = 1.

    The field is evaluated at the m nodal points of the reference grid by
    exact prolongation (linear interpolation on nested dyadic grids); both
    boundary points are included in the average.
    """
    r = reference_points(m)
    if r < estimate.level.level:
        raise UsageError(
            f"reference grid 2**{r}+1 is coarser than the estimate level "
            f"{estimate.level.level}"
        )
    lifted = prolong_to(estimate, r)
    values = np.zeros(m)
    values[1:-1] = lifted.values
    x = np.linspace(0.0, 1.0, m)
    exact = exact_mean_values(1.0, x)
    exact[0] = exact[-1] = 0.0  # Dirichlet boundary, exact in spite of sin(pi*1.0)
    diff = exact - values
    return float(np.sqrt(np.mean(diff**2)))


def rms_aggregate(values) -> float:
    """Root of the mean of squares over replicates."""
    vals = [float(v) for v in values]
    if not vals:
        raise UsageError("aggregate RMS of an empty list")
    return math.sqrt(sum(v * v for v in vals) / len(vals))


def fit_slope(points) -> float:
    """Least-squares slope of y against x (callers pass log2-scaled data)."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise UsageError("slope fit needs at least two points")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0.0:
        raise UsageError("slope fit needs distinct x values")
    return float((xc @ y) / denom)


@dataclass(frozen=True)
class ErrorReport:
    """RMS errors of one estimator configuration across replicates."""

    top_level: int
    per_replicate: tuple      # RMS error of each replicate's estimator
    aggregate: float          # root mean square of the per-replicate errors
    eval_points: int
    level_op_work: tuple      # (level, samples, op_work) triples

    def __post_init__(self):
        expected = rms_aggregate(self.per_replicate)
        if not math.isclose(expected, self.aggregate, rel_tol=1e-12, abs_tol=1e-300):
            raise UsageError("aggregate does not match the replicate errors")
