"""Command line interface: experiment orchestration and CSV output.

Four subcommands cover the studies: ``det-conv`` (deterministic convergence),
``variance`` (level-difference variance decay), ``run`` (estimator error and
work per level for one or more schedules), and ``compare`` (strong versus
weak schedules at matched accuracy).

Every output CSV starts with ``#``-prefixed metadata lines recording the
artifact version, the config hash, and the seed. Given identical config and
seed, the contract CSVs are byte-identical across reruns and worker counts;
wall-clock measurements are machine-dependent and therefore go to a separate
``timings.csv`` that is excluded from that contract.
"""

import argparse
import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import NumericalError, UsageError
from .fem import assemble, run_deterministic
from .grid import make_level
from .metrics import (
    ErrorReport,
    exact_mean,
    fit_slope,
    reference_points,
    rms_aggregate,
    rms_error,
)
from .mlmc import (
    IDENTITY,
    SQUARED_NORM,
    build_schedule,
    mlmc_estimate,
    pair_variances,
)

SCHEMA_VERSION = 1


def parse_range(text: str) -> tuple:
    """Parse an inclusive level range 'a..b' or a single level 'a'."""
    try:
        if ".." in text:
            lo_s, hi_s = text.split("..", 1)
            lo, hi = int(lo_s), int(hi_s)
        else:
            lo = hi = int(text)
    except ValueError as exc:
        raise UsageError(f"bad level range {text!r}, expected 'a..b'") from exc
    if lo < 1 or hi < lo:
        raise UsageError(f"bad level range {text!r}: need 1 <= a <= b")
    return lo, hi


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Validated configuration of one subcommand invocation."""

    command: str
    seed: int
    out: Path
    levels: Optional[tuple] = None
    pairs: int = 1000
    l_range: Optional[tuple] = None
    strong_l_range: Optional[tuple] = None
    lmin: int = 1
    gamma: float = 0.5
    eps: float = 1.0
    reps: int = 10
    modes: tuple = ("weak",)
    functional: str = "identity"
    kl_modes: Optional[int] = None
    m: int = 2**5 + 1
    a_seq: Optional[tuple] = None
    eta: Optional[float] = None
    zero_noise: bool = False
    workers: int = 1

    def hash_items(self) -> dict:
        """Config items entering the hash: everything that can change the
        numbers. Output directory and worker count are excluded on purpose."""
        items = {
            "command": self.command,
            "seed": self.seed,
            "levels": self.levels,
            "pairs": self.pairs,
            "L": self.l_range,
            "strong_L": self.strong_l_range,
            "lmin": self.lmin,
            "gamma": self.gamma,
            "eps": self.eps,
            "reps": self.reps,
            "modes": ",".join(self.modes),
            "functional": self.functional,
            "kl_modes": self.kl_modes,
            "m": self.m,
            "a_seq": self.a_seq,
            "eta": self.eta,
            "zero_noise": self.zero_noise,
        }
        return {k: v for k, v in items.items() if v is not None}

    def config_hash(self) -> str:
        canon = ";".join(f"{k}={v}" for k, v in sorted(self.hash_items().items()))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def write_csv(path: Path, columns, rows, cfg: RunConfig, notes=()):
    lines = [f"# spde-mlmc {__version__} schema={SCHEMA_VERSION}"]
    lines.append(f"# command={cfg.command}")
    lines.append(f"# config_hash={cfg.config_hash()}")
    lines.append(f"# seed={cfg.seed}")
    for note in notes:
        lines.append(f"# {note}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_timings(path: Path, rows, cfg: RunConfig):
    lines = [
        f"# spde-mlmc {__version__} schema={SCHEMA_VERSION}",
        "# machine-dependent wall-clock seconds; excluded from the determinism contract",
        "label,seconds",
    ]
    for label, seconds in rows:
        lines.append(f"{label},{seconds:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_config_file(path: str) -> dict:
    values = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"bad config line {line!r}, expected key=value")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


# Flag registry per subcommand: dest -> (flag, converter, default, help).
_COMMON = {
    "seed": ("--seed", int, None, "master seed (required; no entropy default)"),
    "out": ("--out", str, None, "output directory (required)"),
    "config": ("--config", str, None, "key=value file; flags override it"),
    "workers": ("--workers", int, 1, "worker processes (never changes results)"),
    "lmin": ("--lmin", int, 1, "base level of the hierarchy"),
    "kl_modes": ("--kl-modes", int, None, "fixed KL truncation (default: dofs per level)"),
}

_OPTIONS = {
    "det-conv": {
        "levels": ("--levels", str, None, "level range a..b"),
        **{k: _COMMON[k] for k in ("seed", "out", "config")},
    },
    "variance": {
        "levels": ("--levels", str, None, "pair-level range a..b"),
        "pairs": ("--pairs", int, 1000, "coupled pairs per level"),
        "gamma": ("--gamma", float, 0.5, "rate parameter (recorded in metadata)"),
        "zero_noise": ("--zero-noise", "flag", False, "diagnostic: zero all increments"),
        **_COMMON,
    },
    "run": {
        "l_range": ("--L", str, None, "top-level range a..b"),
        "mode": ("--mode", str, "weak", "schedule mode(s), comma separated"),
        "gamma": ("--gamma", float, 0.5, "rate parameter in (0,1)"),
        "eps": ("--eps", float, 1.0, "schedule exponent offset (0 is outside the theory)"),
        "reps": ("--reps", int, 10, "independent replicates"),
        "functional": ("--functional", str, "identity", "identity or squared-norm"),
        "m": ("--m", int, 33, "reference grid size 2**r+1 (raised to match L)"),
        "a_seq": ("--a-seq", str, None, "decay sequence a_0,a_1,... for general mode"),
        "eta": ("--eta", float, None, "variance order for general mode"),
        "zero_noise": ("--zero-noise", "flag", False, "diagnostic: zero all increments"),
        **_COMMON,
    },
    "compare": {
        "l_range": ("--L", str, None, "top-level range for the weak schedule"),
        "strong_l": ("--strong-L", str, None, "top-level range for the strong schedule (default: --L)"),
        "modes": ("--modes", str, "strong,weak", "must request both modes"),
        "gamma": ("--gamma", float, 0.5, "rate parameter in (0,1)"),
        "eps": ("--eps", float, 1.0, "schedule exponent offset"),
        "reps": ("--reps", int, 10, "independent replicates"),
        "m": ("--m", int, 33, "reference grid size 2**r+1 (raised to match L)"),
        **_COMMON,
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spde-mlmc",
        description="Multilevel Monte Carlo studies for the stochastic heat equation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command)
        for dest, (flag, conv, _default, help_text) in options.items():
            if conv == "flag":
                p.add_argument(flag, dest=dest, action="store_const", const=True,
                               default=None, help=help_text)
            else:
                p.add_argument(flag, dest=dest, type=conv, default=None, help=help_text)
    return parser


def _merge(args: argparse.Namespace, command: str) -> dict:
    """Resolve option values: CLI flag, then config file, then default."""
    options = _OPTIONS[command]
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in file_values:
        if key not in options and key != "config":
            raise UsageError(f"unknown config key {key!r} for {command}")
    merged = {}
    for dest, (_flag, conv, default, _help) in options.items():
        if dest == "config":
            continue
        value = getattr(args, dest, None)
        if value is None and dest in file_values:
            raw = file_values[dest]
            value = (raw.lower() in ("1", "true", "yes")) if conv == "flag" else conv(raw)
        if value is None:
            value = default
        merged[dest] = value
    return merged


def make_config(args: argparse.Namespace) -> RunConfig:
    command = args.command
    v = _merge(args, command)
    if v.get("seed") is None:
        raise UsageError("--seed is required (runs never draw entropy from the system)")
    if v.get("out") is None:
        raise UsageError("--out is required")
    cfg = RunConfig(command=command, seed=v["seed"], out=Path(v["out"]))
    if not 0 <= cfg.seed < 2**64:
        raise UsageError("seed must fit in 64 bits")
    cfg.workers = v.get("workers", 1) or 1
    if cfg.workers < 1:
        raise UsageError("workers must be at least 1")
    cfg.lmin = v.get("lmin", 1) or 1
    cfg.kl_modes = v.get("kl_modes")
    if command == "det-conv":
        if v["levels"] is None:
            raise UsageError("--levels is required")
        cfg.levels = parse_range(v["levels"])
    elif command == "variance":
        if v["levels"] is None:
            raise UsageError("--levels is required")
        cfg.levels = parse_range(v["levels"])
        cfg.pairs = v["pairs"]
        if cfg.pairs < 2:
            raise UsageError("--pairs must be at least 2")
        cfg.gamma = v["gamma"]
        cfg.zero_noise = bool(v["zero_noise"])
        if cfg.levels[0] < cfg.lmin:
            raise UsageError("pair levels must not go below the base level")
    elif command in ("run", "compare"):
        if v["l_range"] is None:
            raise UsageError("--L is required")
        cfg.l_range = parse_range(v["l_range"])
        cfg.gamma = v["gamma"]
        cfg.eps = v["eps"]
        cfg.reps = v["reps"]
        cfg.m = v["m"]
        reference_points(cfg.m)
        if cfg.reps < 1:
            raise UsageError("--reps must be at least 1")
        if not 0.0 < cfg.gamma < 1.0:
            raise UsageError("--gamma must lie in (0, 1)")
        if cfg.eps < 0.0:
            raise UsageError("--eps must be nonnegative")
        if cfg.lmin > cfg.l_range[0]:
            raise UsageError("--lmin exceeds the smallest requested top level")
        if command == "run":
            cfg.modes = tuple(m.strip() for m in v["mode"].split(",") if m.strip())
            if not cfg.modes:
                raise UsageError("--mode must name at least one schedule mode")
            cfg.functional = v["functional"]
            if cfg.functional not in ("identity", "squared-norm"):
                raise UsageError("--functional must be identity or squared-norm")
            cfg.zero_noise = bool(v["zero_noise"])
            if v["a_seq"] is not None:
                cfg.a_seq = tuple(float(x) for x in v["a_seq"].split(","))
            cfg.eta = v["eta"]
            if "general" in cfg.modes and (cfg.a_seq is None or cfg.eta is None):
                raise UsageError("general mode needs --a-seq and --eta")
        else:
            cfg.modes = tuple(m.strip() for m in v["modes"].split(",") if m.strip())
            if set(cfg.modes) != {"strong", "weak"}:
                raise UsageError("compare needs both modes: --modes strong,weak")
            cfg.strong_l_range = (parse_range(v["strong_l"])
                                  if v["strong_l"] is not None else cfg.l_range)
    return cfg


def _eval_grid_size(cfg: RunConfig, top_level: int) -> int:
    """Reference grid size, raised so it never discards estimator resolution."""
    r = max(reference_points(cfg.m), top_level)
    return 2**r + 1


def cmd_det_conv(cfg: RunConfig) -> int:
    lo, hi = cfg.levels
    rows = []
    points = []
    for l in range(lo, hi + 1):
        level = make_level(l)
        approx = run_deterministic(level)
        exact = exact_mean(1.0, level)
        err_field = approx.values - exact.values
        mass, _ = assemble(level)
        err = float(np.sqrt(err_field @ mass.matvec(err_field)))
        rows.append((l, level.mesh_width, level.time_step, err))
        points.append((l, np.log2(err)))
    if len(points) >= 2:
        rows.append(("slope", None, None, fit_slope(points)))
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "det_conv.csv", ("level", "h", "dt", "l2_error"), rows, cfg)
    return 0


def cmd_variance(cfg: RunConfig) -> int:
    lo, hi = cfg.levels
    rows = []
    points = []
    for l in range(lo, hi + 1):
        var_diff, var_fine = pair_variances(
            l, cfg.lmin, cfg.pairs, cfg.seed, kl_rule=cfg.kl_modes,
            zero_noise=cfg.zero_noise, workers=cfg.workers,
        )
        rows.append((l, var_diff, var_fine))
        if var_diff > 1e-18:  # zero-noise runs leave only cancellation residue
            points.append((l, np.log2(var_diff)))
    if len(points) == len(rows) and len(points) >= 2:
        rows.append(("slope", fit_slope(points), None))
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "variance.csv",
              ("level", "var_difference", "var_level"), rows, cfg,
              notes=(f"pairs={cfg.pairs}", "recommended: at least 100 pairs"))
    return 0


def _functional_spec(cfg: RunConfig):
    return SQUARED_NORM if cfg.functional == "squared-norm" else IDENTITY


def _run_one_mode(cfg: RunConfig, mode: str, l_lo: int, l_hi: int):
    """Estimator runs for one schedule mode over a top-level range.

    Returns (replicate_rows, level_rows, summary_rows, timing_rows).
    """
    functional = _functional_spec(cfg)
    rep_rows, level_rows, summary_rows, timing_rows = [], [], [], []
    for top in range(l_lo, l_hi + 1):
        a_seq = cfg.a_seq[: top + 1] if cfg.a_seq is not None else None
        schedule = build_schedule(mode, top, gamma=cfg.gamma, eps=cfg.eps,
                                  a=a_seq, eta=cfg.eta)
        errors = []
        total_work = None
        level_work = []
        for rep in range(cfg.reps):
            result = mlmc_estimate(
                top, cfg.lmin, schedule, functional=functional,
                master_seed=cfg.seed, replicate=rep, kl_rule=cfg.kl_modes,
                zero_noise=cfg.zero_noise, workers=cfg.workers,
            )
            timing_rows.append((f"{mode} L={top} rep={rep}", result.wall_seconds))
            if functional.kind == "identity":
                err = rms_error(result.estimate, _eval_grid_size(cfg, top))
                errors.append(err)
                rep_rows.append((mode, top, rep, err, None))
            else:
                rep_rows.append((mode, top, rep, None, result.estimate))
            if total_work is None:
                total_work = result.total_op_work
                for stat in result.level_stats:
                    level_rows.append((mode, top, stat.level, stat.samples,
                                       stat.op_work, stat.variance))
                    level_work.append((stat.level, stat.samples, stat.op_work))
        if errors:
            report = ErrorReport(top, tuple(errors), rms_aggregate(errors),
                                 _eval_grid_size(cfg, top), tuple(level_work))
            agg = report.aggregate
        else:
            agg = None
        outside = int(cfg.eps == 0.0 and mode != "singlelevel")
        summary_rows.append((mode, top, agg, total_work, cfg.reps, outside))
    return rep_rows, level_rows, summary_rows, timing_rows


_PLOT_SCRIPT = """\
# Companion gnuplot script: error and op-count work versus level.
# Usage: gnuplot plot_run.gp   (run inside the output directory)
set datafile separator ","
set key left bottom
set xlabel "level L"
set logscale y 2
set terminal pngcairo size 900,600

set output "error_vs_level.png"
set ylabel "aggregate RMS error"
plot for [m in "strong weak singlelevel general"] \\
    "run_summary.csv" using 2:(strcol(1) eq m ? column(3) : 1/0) \\
    with linespoints title m

set output "work_vs_level.png"
set ylabel "op-count work"
plot for [m in "strong weak singlelevel general"] \\
    "run_summary.csv" using 2:(strcol(1) eq m ? column(4) : 1/0) \\
    with linespoints title m
"""


def cmd_run(cfg: RunConfig) -> int:
    rep_rows, level_rows, summary_rows, timing_rows = [], [], [], []
    for mode in cfg.modes:
        r, l, s, t = _run_one_mode(cfg, mode, *cfg.l_range)
        rep_rows += r
        level_rows += l
        summary_rows += s
        timing_rows += t
    notes = []
    if cfg.eps == 0.0:
        notes.append("warning: eps=0 is the border case outside the theory")
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "run_replicates.csv",
              ("mode", "L", "replicate", "rms_error", "value"), rep_rows, cfg, notes)
    write_csv(cfg.out / "run_levels.csv",
              ("mode", "L", "level", "samples", "op_work", "var_difference"),
              level_rows, cfg, notes)
    write_csv(cfg.out / "run_summary.csv",
              ("mode", "L", "rms_error_agg", "op_work_total", "replicates",
               "outside_theory"), summary_rows, cfg, notes)
    (cfg.out / "plot_run.gp").write_text(_PLOT_SCRIPT, encoding="utf-8")
    write_timings(cfg.out / "timings.csv", timing_rows, cfg)
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    all_summary = {}
    summary_rows, timing_rows = [], []
    level_rows = []
    for mode in ("strong", "weak"):
        lo, hi = cfg.strong_l_range if mode == "strong" else cfg.l_range
        _r, l, s, t = _run_one_mode(cfg, mode, lo, hi)
        level_rows += l
        summary_rows += s
        timing_rows += t
        for row in s:
            all_summary[(mode, row[1])] = row
    matched_rows = []
    weak_ls = sorted(top for mode, top in all_summary if mode == "weak")
    strong_ls = sorted(top for mode, top in all_summary if mode == "strong")
    for wl in weak_ls:
        _, _, weak_rms, weak_work, _, _ = all_summary[("weak", wl)]
        partner = None
        for sl in strong_ls:
            if all_summary[("strong", sl)][2] <= weak_rms:
                partner = sl
                break
        if partner is None:
            continue
        _, _, strong_rms, strong_work, _, _ = all_summary[("strong", partner)]
        matched_rows.append((wl, partner, weak_rms, strong_rms, weak_work,
                             strong_work, strong_work / weak_work))
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "compare.csv",
              ("mode", "L", "rms_error_agg", "op_work_total", "replicates",
               "outside_theory"), summary_rows, cfg)
    write_csv(cfg.out / "compare_levels.csv",
              ("mode", "L", "level", "samples", "op_work", "var_difference"),
              level_rows, cfg)
    write_csv(cfg.out / "compare_matched.csv",
              ("weak_L", "strong_L", "weak_rms", "strong_rms", "weak_op_work",
               "strong_op_work", "work_ratio"), matched_rows, cfg,
              notes=("matched accuracy: smallest strong L whose aggregate RMS "
                     "is at most the weak one",))
    write_timings(cfg.out / "timings.csv", timing_rows, cfg)
    return 0


_HANDLERS = {
    "det-conv": cmd_det_conv,
    "variance": cmd_variance,
    "run": cmd_run,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = make_config(args)
        started = time.perf_counter()
        code = _HANDLERS[cfg.command](cfg)
        print(f"{cfg.command}: wrote {cfg.out} "
              f"({time.perf_counter() - started:.1f}s)")
        return code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
