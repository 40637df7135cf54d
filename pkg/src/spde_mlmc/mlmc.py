"""Monte Carlo and multilevel Monte Carlo estimation over coupled paths.

The estimator telescopes over mesh levels lmin..L: the base term is a plain
Monte Carlo mean of the level-lmin solution (the hierarchy starts at the
first level with a nonempty interior-node space), and each higher level
contributes the mean of coupled fine/coarse differences driven by the same
Wiener increments.

Sample counts come from a-priori schedules: either the generic rule
``N_0 = ceil(a_L**-2)``, ``N_l = ceil(a_L**-2 * a_l**(2*eta) * l**(1+eps))``
for a user-supplied decay sequence, or its two dyadic specialisations
("strong": a_l = h_l**gamma with eta = 1, "weak": a_l = h_l**(2*gamma) with
eta = 1/2), plus a singlelevel baseline ``N = ceil(h_L**(-4*gamma))``.

All sampling is counter-based and reduced in a fixed order (level-major,
chunk-major), so results are bitwise independent of the worker count.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import zeta

from .errors import UsageError
from .fem import (
    DriftSpec,
    ZERO_DRIFT,
    assemble,
    initial_field,
    mass_norm_sq,
    step_operator,
)
from .grid import NodalField, make_level, prolong_to, prolong_values
from .noise import coarsen_rows, draw_increment_rows, kl_modes, path_stream, projection_matrix

#: Paths simulated per batch. Fixed so that reductions are identical no
#: matter how chunks are distributed over workers.
CHUNK_SIZE = 64

#: Time steps generated per RNG slab. Has no effect on the values drawn
#: (blocks are drawn in step-major order); it only bounds memory.
SLAB_STEPS = 1024

SCHEDULE_MODES = ("singlelevel", "strong", "weak", "general")


def _ceil_count(value: float) -> int:
    """Ceiling with a guard against floating-point overshoot of integers."""
    c = math.ceil(value)
    if c - value > 1.0 - 1e-9:
        c -= 1
    return max(int(c), 1)


@dataclass(frozen=True)
class SampleSchedule:
    """Per-level sample counts with their provenance.

    For multilevel modes ``counts`` has L+1 entries indexed by level, where
    ``counts[0]`` plays the base-term role; for singlelevel mode it holds the
    single count at the top level.
    """

    top_level: int
    counts: tuple
    mode: str
    gamma: float
    eps: float
    eta: Optional[float]
    a: tuple

    def count_for(self, level: int, lmin: int) -> int:
        if self.mode == "singlelevel":
            if level != self.top_level:
                raise UsageError("singlelevel schedule only defines the top level")
            return self.counts[0]
        if level == lmin:
            return self.counts[0]
        return self.counts[level]


def build_schedule(
    mode: str,
    top_level: int,
    gamma: float = 0.5,
    eps: float = 1.0,
    a: Optional[Sequence[float]] = None,
    eta: Optional[float] = None,
    scale: float = 1.0,
) -> SampleSchedule:
    """Sample counts for one estimator run.

    ``a`` and ``eta`` are only consumed in general mode; the dyadic modes
    derive them from ``gamma``. ``scale`` multiplies every count before
    rounding (unit proportionality constant by default; a sensitivity knob).
    """
    if mode not in SCHEDULE_MODES:
        raise UsageError(f"unknown schedule mode {mode!r}")
    if top_level < 1:
        raise UsageError("top level must be at least 1")
    if not 0.0 < gamma < 1.0:
        raise UsageError(f"gamma must lie in (0, 1), got {gamma}")
    if eps < 0.0:
        raise UsageError(f"eps must be nonnegative, got {eps}")
    if scale <= 0.0:
        raise UsageError(f"count scale must be positive, got {scale}")
    make_level(top_level)  # capacity check

    h = [2.0 ** (-l) for l in range(top_level + 1)]
    if mode == "singlelevel":
        n = _ceil_count(scale * h[top_level] ** (-4.0 * gamma))
        return SampleSchedule(top_level, (n,), mode, gamma, eps, None,
                              (h[top_level] ** (2.0 * gamma),))

    if mode == "strong":
        seq = [h[l] ** gamma for l in range(top_level + 1)]
        eta_eff = 1.0
    elif mode == "weak":
        seq = [h[l] ** (2.0 * gamma) for l in range(top_level + 1)]
        eta_eff = 0.5
    else:
        if a is None or eta is None:
            raise UsageError("general mode needs the decay sequence a and eta")
        seq = [float(v) for v in a]
        if len(seq) != top_level + 1:
            raise UsageError(f"decay sequence must have {top_level + 1} entries")
        if any(v <= 0 for v in seq) or any(x < y for x, y in zip(seq, seq[1:])):
            raise UsageError("decay sequence must be positive and nonincreasing")
        if not 0.0 <= eta <= 1.0:
            raise UsageError(f"eta must lie in [0, 1], got {eta}")
        eta_eff = float(eta)

    base = scale * seq[top_level] ** -2.0
    counts = [_ceil_count(base)]
    for l in range(1, top_level + 1):
        counts.append(_ceil_count(base * seq[l] ** (2.0 * eta_eff) * l ** (1.0 + eps)))
    return SampleSchedule(top_level, tuple(counts), mode, gamma, eps, eta_eff, tuple(seq))


@dataclass(frozen=True)
class FunctionalSpec:
    """What to estimate: the solution itself, its squared L2 norm, or a
    user-supplied scalar functional of the nodal field."""

    kind: str
    func: Optional[Callable[[NodalField], float]] = None


IDENTITY = FunctionalSpec("identity")
SQUARED_NORM = FunctionalSpec("squared_norm")


def apply_functional(spec: FunctionalSpec, field: NodalField):
    if spec.kind == "identity":
        return field
    if spec.kind == "squared_norm":
        return mass_norm_sq(field)
    if spec.kind == "custom":
        if spec.func is None:
            raise UsageError("custom functional without a callable")
        return float(spec.func(field))
    raise UsageError(f"unknown functional kind {spec.kind!r}")


def _simulate_chunk(pair_level, lmin, start, count, replicate, master_seed,
                    kl_rule, drift, zero_noise):
    """Simulate ``count`` coupled paths with sample indices start..start+count-1.

    Returns (fine, coarse) state matrices at T = 1 with one column per path;
    coarse is None at the base level.
    """
    fine = make_level(pair_level)
    has_coarse = pair_level > lmin
    op_f = step_operator(fine)
    xf = np.repeat(initial_field(fine).values[:, None], count, axis=1)
    if has_coarse:
        coarse = make_level(pair_level - 1)
        op_c = step_operator(coarse)
        xc = np.repeat(initial_field(coarse).values[:, None], count, axis=1)

    if zero_noise:
        zf = np.zeros((fine.dofs, count))
        for _ in range(fine.steps):
            xf = op_f.step(xf, zf, drift)
        if not has_coarse:
            return xf, None
        zc = np.zeros((coarse.dofs, count))
        for _ in range(coarse.steps):
            xc = op_c.step(xc, zc, drift)
        return xf, xc

    jf = kl_modes(fine, kl_rule)
    proj_f = projection_matrix(fine, jf).matrix
    if has_coarse:
        jc = kl_modes(coarse, kl_rule)
        proj_c = projection_matrix(coarse, jc).matrix
    streams = [
        path_stream(master_seed, pair_level, replicate, start + i)
        for i in range(count)
    ]
    dt = fine.time_step
    done = 0
    while done < fine.steps:
        nsteps = min(SLAB_STEPS, fine.steps - done)
        loads_f = np.empty((nsteps, fine.dofs, count))
        if has_coarse:
            loads_c = np.empty((nsteps // 4, coarse.dofs, count))
        for b, stream in enumerate(streams):
            rows = draw_increment_rows(stream, nsteps, jf, dt)
            loads_f[:, :, b] = rows @ proj_f
            if has_coarse:
                loads_c[:, :, b] = coarsen_rows(rows, jc) @ proj_c
        for k in range(nsteps):
            xf = op_f.step(xf, loads_f[k], drift)
        if has_coarse:
            for k in range(nsteps // 4):
                xc = op_c.step(xc, loads_c[k], drift)
        done += nsteps
    return xf, (xc if has_coarse else None)


def sample_pair(
    pair_level: int,
    lmin: int,
    master_seed: int,
    sample: int,
    replicate: int = 0,
    kl_rule: Optional[int] = None,
    drift: DriftSpec = ZERO_DRIFT,
    zero_noise: bool = False,
):
    """One coupled sample: the fine path at ``pair_level`` and, above the base
    level, the coarse path driven by the aggregated fine increments.

    Identical stream coordinates reproduce the pair bitwise.
    """
    if pair_level < lmin:
        raise UsageError(f"pair level {pair_level} below the base level {lmin}")
    xf, xc = _simulate_chunk(pair_level, lmin, sample, 1, replicate, master_seed,
                             kl_rule, drift, zero_noise)
    fine = NodalField(make_level(pair_level), xf[:, 0])
    if xc is None:
        return fine, None
    return fine, NodalField(make_level(pair_level - 1), xc[:, 0])


def _pair_moment_task(args):
    """Chunk partial sums for a coupled-pair variance study (picklable)."""
    pair_level, lmin, start, count, master_seed, kl_rule, zero_noise = args
    xf, xc = _simulate_chunk(pair_level, lmin, start, count, 0, master_seed,
                             kl_rule, ZERO_DRIFT, zero_noise)
    mass, _ = assemble(make_level(pair_level))
    diff = xf if xc is None else xf - prolong_values(xc)
    return (
        diff.sum(axis=1),
        float(np.sum(np.einsum("ib,ib->b", diff, mass.matvec(diff)))),
        xf.sum(axis=1),
        float(np.sum(np.einsum("ib,ib->b", xf, mass.matvec(xf)))),
    )


def pair_variances(pair_level, lmin, n, master_seed, kl_rule=None,
                   zero_noise=False, workers=1):
    """Sample variances of the coupled level difference and of the fine path.

    Both are Hilbert-space variances (mean squared L2 distance from the
    sample mean) estimated from ``n`` coupled pairs; the coarse member is
    prolonged to the fine grid before differencing. At the base level the
    difference degenerates to the path itself.
    """
    if n < 2:
        raise UsageError("variance estimation needs at least two pairs")
    tasks = [(pair_level, lmin, s, min(CHUNK_SIZE, n - s), master_seed,
              kl_rule, zero_noise) for s in range(0, n, CHUNK_SIZE)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_pair_moment_task, tasks))
    else:
        partials = [_pair_moment_task(t) for t in tasks]
    mass, _ = assemble(make_level(pair_level))
    dofs = make_level(pair_level).dofs
    diff_sum, fine_sum = np.zeros(dofs), np.zeros(dofs)
    diff_sq = fine_sq = 0.0
    for dvec, dsq, fvec, fsq in partials:
        diff_sum += dvec
        diff_sq += dsq
        fine_sum += fvec
        fine_sq += fsq

    def unbiased(total, sq):
        mean = total / n
        return max(0.0, (sq - n * float(mean @ mass.matvec(mean))) / (n - 1))

    return unbiased(diff_sum, diff_sq), unbiased(fine_sum, fine_sq)


def pair_op_work(pair_level: int, lmin: int) -> int:
    """Abstract per-sample cost: dofs*steps for every path simulated."""
    fine = make_level(pair_level)
    w = fine.dofs * fine.steps
    if pair_level > lmin:
        coarse = make_level(pair_level - 1)
        w += coarse.dofs * coarse.steps
    return w


def mc_estimate(sampler: Callable[[int], object], n: int,
                functional: Optional[Callable] = None):
    """Plain Monte Carlo mean of ``sampler(0..n-1)`` with unbiased variance.

    Works for scalar or array-valued samples; the variance of array samples
    is the mean squared Euclidean distance from the sample mean.
    """
    if n < 1:
        raise UsageError("Monte Carlo estimate needs at least one sample")
    values = []
    for i in range(n):
        v = sampler(i)
        if functional is not None:
            v = functional(v)
        values.append(np.asarray(v, dtype=np.float64))
    total = values[0].copy()
    for v in values[1:]:
        total += v
    estimate = total / n
    if n == 1:
        variance = 0.0
    else:
        variance = sum(float(np.sum((v - estimate) ** 2)) for v in values) / (n - 1)
    if estimate.ndim == 0:
        return float(estimate), variance
    return estimate, variance


@dataclass(frozen=True)
class LevelStat:
    """Per-level statistics of one estimator run."""

    level: int
    samples: int
    mean_contribution: object  # ndarray at the level's dofs, or float
    variance: float
    op_work: int
    wall_seconds: float


@dataclass(frozen=True)
class MlmcResult:
    estimate: object  # NodalField on the top level (identity mode) or float
    level_stats: tuple
    total_op_work: int
    summation_op_work: int
    wall_seconds: float
    schedule: SampleSchedule
    lmin: int
    master_seed: int
    replicate: int


def _level_task(args):
    (pair_level, lmin, start, count, replicate, master_seed, kl_rule,
     functional, drift, zero_noise) = args
    xf, xc = _simulate_chunk(pair_level, lmin, start, count, replicate,
                             master_seed, kl_rule, drift, zero_noise)
    if functional.kind == "identity":
        diff = xf if xc is None else xf - prolong_values(xc)
        mass, _ = assemble(make_level(pair_level))
        norms = np.einsum("ib,ib->b", diff, mass.matvec(diff))
        return diff.sum(axis=1), float(np.sum(norms))
    if functional.kind == "squared_norm":
        mass_f, _ = assemble(make_level(pair_level))
        vals = np.einsum("ib,ib->b", xf, mass_f.matvec(xf))
        if xc is not None:
            mass_c, _ = assemble(make_level(pair_level - 1))
            vals = vals - np.einsum("ib,ib->b", xc, mass_c.matvec(xc))
    else:
        fine_level = make_level(pair_level)
        vals = np.array([functional.func(NodalField(fine_level, xf[:, b]))
                         for b in range(count)])
        if xc is not None:
            coarse_level = make_level(pair_level - 1)
            vals = vals - np.array([functional.func(NodalField(coarse_level, xc[:, b]))
                                    for b in range(count)])
    return float(np.sum(vals)), float(np.sum(vals**2))


def mlmc_estimate(
    top_level: int,
    lmin: int,
    schedule: SampleSchedule,
    functional: FunctionalSpec = IDENTITY,
    master_seed: int = 0,
    replicate: int = 0,
    kl_rule: Optional[int] = None,
    drift: DriftSpec = ZERO_DRIFT,
    zero_noise: bool = False,
    workers: int = 1,
) -> MlmcResult:
    """Run the multilevel (or singlelevel) estimator for one replicate.

    Parameters
    ----------
    top_level : finest mesh level L; must match ``schedule.top_level``.
    lmin : base level of the hierarchy (1 by default in the CLI); the term
        below it is zero, so the base level is estimated on its own.
    schedule : per-level sample counts from :func:`build_schedule`.
    functional : what to average; identity yields a nodal field on level L.
    master_seed, replicate : stream coordinates. Distinct replicates are
        independent; a fixed pair reproduces the result bitwise.
    kl_rule : fixed KL truncation for every level, or None for J = dofs.
    workers : process count for chunk simulation. Results do not depend on
        it; chunk boundaries and the reduction order are fixed.
    """
    if schedule.top_level != top_level:
        raise UsageError("schedule was built for a different top level")
    if lmin < 1:
        raise UsageError("the base level must be at least 1 (level 0 is empty)")
    if lmin > top_level:
        raise UsageError("base level exceeds the top level")

    levels = [top_level] if schedule.mode == "singlelevel" else list(range(lmin, top_level + 1))
    base = levels[0]
    t_total = time.perf_counter()
    stats = []
    estimate_field = np.zeros(make_level(top_level).dofs)
    estimate_scalar = 0.0
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for level in levels:
            n = schedule.count_for(level, base)
            tasks = [
                (level, base, s, min(CHUNK_SIZE, n - s), replicate, master_seed,
                 kl_rule, functional, drift, zero_noise)
                for s in range(0, n, CHUNK_SIZE)
            ]
            t_level = time.perf_counter()
            if pool is not None:
                partials = list(pool.map(_level_task, tasks))
            else:
                partials = [_level_task(t) for t in tasks]
            wall = time.perf_counter() - t_level

            if functional.kind == "identity":
                vec = np.zeros(make_level(level).dofs)
                sq = 0.0
                for pvec, psq in partials:
                    vec += pvec
                    sq += psq
                mean = vec / n
                mass, _ = assemble(make_level(level))
                mean_norm_sq = float(mean @ mass.matvec(mean))
                contribution = mean
            else:
                total = 0.0
                sq = 0.0
                for psum, psq in partials:
                    total += psum
                    sq += psq
                mean = total / n
                mean_norm_sq = mean * mean
                contribution = mean
            variance = 0.0 if n < 2 else max(0.0, (sq - n * mean_norm_sq) / (n - 1))
            stats.append(LevelStat(
                level=level,
                samples=n,
                mean_contribution=contribution,
                variance=variance,
                op_work=n * pair_op_work(level, base),
                wall_seconds=wall,
            ))
            if functional.kind == "identity":
                lifted = prolong_to(NodalField(make_level(level), mean), top_level)
                estimate_field = estimate_field + lifted.values
            else:
                estimate_scalar += mean
    finally:
        if pool is not None:
            pool.shutdown()

    # Summing the per-level means on the top grid touches dofs(L) entries per level.
    summation_work = len(levels) * make_level(top_level).dofs
    estimate = (NodalField(make_level(top_level), estimate_field)
                if functional.kind == "identity" else float(estimate_scalar))
    return MlmcResult(
        estimate=estimate,
        level_stats=tuple(stats),
        total_op_work=sum(s.op_work for s in stats) + summation_work,
        summation_op_work=summation_work,
        wall_seconds=time.perf_counter() - t_total,
        schedule=schedule,
        lmin=base,
        master_seed=master_seed,
        replicate=replicate,
    )


@dataclass(frozen=True)
class WorkPrediction:
    """Theoretical work of a schedule plus its asymptotic complexity."""

    per_level: tuple           # N_l * cost * h_l**-(d+2), schedule index order
    summation: float           # sum_cost * h_L**-delta
    total: float
    accuracy_exponent: float   # work ~ accuracy**exponent for the mode
    log_factor: bool           # whether a |log2 accuracy| factor multiplies it
    bound_exponent: float      # exponent of a_L in the schedule work bound
    bound_poly_power: Optional[float]  # power of L multiplying the bound
    error_constant: float      # C1 + sqrt(C3 + C2 * zeta(1 + eps)), unit C's
    kappa: float


def predict_work(
    schedule: SampleSchedule,
    d: int = 1,
    kappa: Optional[float] = None,
    delta: float = 0.0,
    cost: float = 1.0,
    sum_cost: float = 1.0,
) -> WorkPrediction:
    """Evaluate the work model for a schedule.

    The per-sample cost at level l is ``cost * h_l**-(d+2)`` (space times
    time), and adding up the level estimators costs ``sum_cost * h_L**-delta``.
    The accuracy exponents reproduce the complexity table: plain Monte Carlo
    scales as eps**-((d+2)/(2*gamma)+2), the strong-rate schedule as
    eps**-(d+2)/gamma with a log factor, and the weak-rate schedule as
    eps**-((d+2)/(2*gamma)+1) with a log factor.
    """
    if d < 0:
        raise UsageError("spatial work dimension d must be nonnegative")
    if delta < 0.0:
        raise UsageError("summation exponent delta must be nonnegative")
    gamma = schedule.gamma
    top = schedule.top_level
    h_top = 2.0 ** (-top)

    if schedule.mode == "singlelevel":
        per_level = (schedule.counts[0] * cost * h_top ** -(d + 2),)
    else:
        per_level = tuple(
            schedule.counts[l] * cost * (2.0 ** (-l)) ** -(d + 2)
            for l in range(top + 1)
        )
    summation = sum_cost * h_top**-delta

    if kappa is None:
        if schedule.mode == "strong":
            kappa = (d + 2) / gamma
        elif schedule.mode in ("weak", "singlelevel"):
            kappa = (d + 2) / (2.0 * gamma)
        else:
            raise UsageError("general mode needs an explicit kappa")
    if kappa <= 0.0:
        raise UsageError("kappa must be positive")

    if schedule.mode == "singlelevel":
        accuracy_exponent = -((d + 2) / (2.0 * gamma) + 2.0)
        log_factor = False
    elif schedule.mode == "strong":
        accuracy_exponent = -(d + 2) / gamma
        log_factor = True
    elif schedule.mode == "weak":
        accuracy_exponent = -((d + 2) / (2.0 * gamma) + 1.0)
        log_factor = True
    else:
        eta = schedule.eta if schedule.eta is not None else 1.0
        accuracy_exponent = (-max(2.0, delta) if kappa < 2.0 * eta
                             else -(2.0 + kappa - 2.0 * eta))
        log_factor = False

    eta = schedule.eta if schedule.eta is not None else 0.5
    if kappa < 2.0 * eta:
        bound_exponent = -max(2.0, delta)
        bound_poly_power = None
    else:
        bound_exponent = -(2.0 + kappa - 2.0 * eta)
        bound_poly_power = 2.0 + schedule.eps

    error_constant = (math.inf if schedule.eps == 0.0
                      else 1.0 + math.sqrt(1.0 + float(zeta(1.0 + schedule.eps, 1))))

    return WorkPrediction(
        per_level=per_level,
        summation=summation,
        total=float(sum(per_level) + summation),
        accuracy_exponent=accuracy_exponent,
        log_factor=log_factor,
        bound_exponent=bound_exponent,
        bound_poly_power=bound_poly_power,
        error_constant=error_constant,
        kappa=kappa,
    )
