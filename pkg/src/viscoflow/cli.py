"""Command-line entry point.

Subcommands:
  run    one trajectory (mode nonlinear | linear); writes ledger.csv
  sweep  a convergence report (mode sweep-delta | sweep-tau | diagonal | audit)
  check  the constitutive / discretization property suite
  plot   re-render an emitted sweep CSV as an SVG

Configuration is a flat JSON object of the keys below; every key can be
overridden by a long flag of the same name (lists as comma-separated
values).  Exit codes: 0 success, 1 hard assertion failed, 2 configuration
error, 3 solver failure.  The default output root is $VISCOFLOW_OUT or
./out; outputs embed the config hash, so re-running a config reproduces
them byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields as dc_fields

from . import __version__, checks, lab, linear, nonlinear, report
from . import grid as g
from .lab import AmplitudeTooLarge, SweepSpec
from .solvers import SingularSystem

MODES = ("nonlinear", "linear", "sweep-delta", "sweep-tau", "diagonal", "audit", "check")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config: field '{key}': {message}")


@dataclass
class RunConfig:
    """Validated experiment description (defaults shown by --help)."""

    mode: str = "check"
    dim: int = 1
    n: int = 64
    p: float = 0.0            # 0 selects the per-dimension default (2 / 4)
    alpha: float = 0.5
    delta: float = 0.02
    tau: float = 0.05
    T: float = 1.0
    deltas: tuple = ()
    taus: tuple = ()
    times: tuple = (0.25, 0.5, 1.0)
    family: str = "bump"
    amplitude: float = 0.1
    seed: int = 0
    grad_tol: float = 1e-9
    max_iters: int = 4000
    guard_radius: float = 0.5
    snapshots: int = 0        # field snapshot stride for `run` (0 = off)
    workers: int = 0          # 0 = all available cores
    out: str = ""             # empty = $VISCOFLOW_OUT or ./out

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


_HELP = {
    "mode": f"one of {', '.join(MODES)}",
    "dim": "spatial dimension (1 or 2 for shipped experiments; data model allows 3)",
    "n": "grid cells per axis (n >= 8)",
    "p": "second-gradient exponent, must exceed dim; 0 = default (2 in 1D, 4 in 2D)",
    "alpha": "scale-coupling exponent in (0,1)",
    "delta": "strain scale for single runs",
    "tau": "time step for single runs",
    "T": "time horizon",
    "deltas": "comma-separated strictly decreasing scale list for sweeps",
    "taus": "comma-separated strictly decreasing step list for sweeps",
    "times": "comparison times in (0, T]",
    "family": "initial-data family: bump | sine",
    "amplitude": "initial-data amplitude",
    "seed": "seed for all sampling",
    "grad_tol": "relative gradient tolerance of the inner solver",
    "max_iters": "inner solver iteration budget",
    "guard_radius": "neighborhood guard radius around the identity",
    "snapshots": "snapshot stride for `run` outputs (0 = off)",
    "workers": "sweep worker processes (0 = all cores)",
    "out": "output directory (default $VISCOFLOW_OUT or ./out)",
}

_TUPLE_KEYS = ("deltas", "taus", "times")


def _coerce(key, value, target_type):
    try:
        if key in _TUPLE_KEYS:
            if isinstance(value, (list, tuple)):
                return tuple(float(v) for v in value)
            if isinstance(value, str):
                return tuple(float(v) for v in value.split(",") if v.strip())
            raise ValueError("expected a list")
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot parse {value!r} ({exc})") from None
    return value


def parse_config(path: str | None, overrides: dict) -> RunConfig:
    """Merge file values and flag overrides into a validated RunConfig."""
    values = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path}: invalid JSON at line {exc.lineno}, "
                                        f"column {exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", f"{path}: top level must be a JSON object")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})

    known = {f.name: f.type for f in dc_fields(RunConfig)}
    cfg = RunConfig()
    for key, val in values.items():
        if key not in known:
            raise ConfigError(key, "unknown key")
        target = type(getattr(cfg, key))
        setattr(cfg, key, _coerce(key, val, target))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES} (got {cfg.mode!r})")
    if cfg.dim not in (1, 2, 3):
        raise ConfigError("dim", f"must be 1, 2 or 3 (got {cfg.dim})")
    if cfg.n < 8:
        raise ConfigError("n", f"must be >= 8 (got {cfg.n})")
    if not 0.0 < cfg.alpha < 1.0:
        raise ConfigError("alpha", f"must lie strictly inside (0,1) (got {cfg.alpha})")
    if cfg.p and cfg.p <= cfg.dim:
        raise ConfigError("p", f"must exceed dim={cfg.dim} (got {cfg.p})")
    for key in ("delta", "tau", "T", "amplitude", "grad_tol", "guard_radius"):
        if getattr(cfg, key) <= 0.0:
            raise ConfigError(key, f"must be positive (got {getattr(cfg, key)})")
    for key in ("deltas", "taus"):
        seq = getattr(cfg, key)
        if seq and any(x <= 0 for x in seq):
            raise ConfigError(key, "entries must be positive")
        if any(b >= a for a, b in zip(seq, seq[1:])):
            raise ConfigError(key, "must be strictly decreasing")
    if any(t <= 0.0 or t > cfg.T + 1e-12 for t in cfg.times):
        raise ConfigError("times", f"must lie in (0, T] with T={cfg.T}")
    if cfg.family not in ("bump", "sine"):
        raise ConfigError("family", f"must be 'bump' or 'sine' (got {cfg.family!r})")
    for key in ("max_iters",):
        if getattr(cfg, key) <= 0:
            raise ConfigError(key, f"must be positive (got {getattr(cfg, key)})")
    for key in ("snapshots", "workers", "seed"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, f"must be nonnegative (got {getattr(cfg, key)})")


def _outdir(cfg: RunConfig) -> str:
    root = cfg.out or os.environ.get("VISCOFLOW_OUT") or "out"
    os.makedirs(root, exist_ok=True)
    return root


def _sweep_spec(cfg: RunConfig) -> SweepSpec:
    deltas = cfg.deltas or (cfg.delta,)
    taus = cfg.taus or (cfg.tau,)
    return SweepSpec(
        dim=cfg.dim, n=cfg.n, deltas=deltas, taus=taus, alpha=cfg.alpha,
        p=cfg.p, family=cfg.family, amplitude=cfg.amplitude, T=cfg.T,
        times=cfg.times, seed=cfg.seed, grad_tol=cfg.grad_tol,
        max_iters=cfg.max_iters, guard_radius=cfg.guard_radius,
    )


# ---------------------------------------------------------------------------
# Mode drivers
# ---------------------------------------------------------------------------

def _write_ledger(outdir, traj, hash_):
    rows = [e.row() for e in traj.ledger]
    from .trajectory import LEDGER_COLUMNS
    report.write_csv(os.path.join(outdir, "ledger.csv"), LEDGER_COLUMNS, rows, hash_)


def _run_single(cfg: RunConfig, outdir: str, hash_: str) -> int:
    spec = _sweep_spec(cfg)
    y0, u0 = lab.prepare_initial_data(spec, cfg.delta)
    if cfg.mode == "nonlinear":
        ncfg = lab._nl_config(spec, cfg.delta, cfg.tau)
        traj = nonlinear.run_flow(ncfg, spec.bundle(), y0)
    else:
        lcfg = lab._lin_config(spec, cfg.tau)
        traj = linear.run_flow(lcfg, u0)
    _write_ledger(outdir, traj, hash_)
    if cfg.snapshots:
        for k in range(0, len(traj.fields), cfg.snapshots):
            g.save_field(os.path.join(outdir, f"snap_{k:05d}.fld"), traj.fields[k],
                         time=k * cfg.tau, meta={"config_hash": hash_})
    if not traj.completed:
        report.failed_marker(outdir, "inner solver did not converge; partial trajectory flushed")
        return EXIT_SOLVER
    return EXIT_OK


def _emit_sweep(rep, outdir, hash_):
    spec = rep.spec
    if rep.kind == "sweep-delta":
        for t, table in rep.tables["errors"].items():
            rows = [[d] + list(row) for d, row in zip(spec["deltas"], table)]
            header = ["delta"] + [f"tau={tau:g}" for tau in spec["taus"]]
            report.write_csv(os.path.join(outdir, f"errors_t{t:g}.csv"), header, rows, hash_)
        series = [(f"t={t:g}", spec["deltas"], [row[0] for row in tab])
                  for t, tab in rep.tables["errors"].items()]
        report.svg_loglog(os.path.join(outdir, "plot.svg"), series,
                          "rescaled H1 error vs delta", "delta", "H1 error", hash_)
    elif rep.kind == "sweep-tau":
        rows = [[tau, res] for tau, res in rep.tables["identity_residuals"].items()]
        report.write_csv(os.path.join(outdir, "identity_residuals.csv"),
                         ["tau", "energy_identity_residual"], rows, hash_)
        for t, seq in rep.tables["cauchy"].items():
            rows = [[spec["taus"][k], seq[k]] for k in range(len(seq))]
            report.write_csv(os.path.join(outdir, f"cauchy_t{t:g}.csv"),
                             ["tau", "h1_cauchy_diff"], rows, hash_)
        series = [("identity residual", list(rep.tables["identity_residuals"].keys()),
                   list(rep.tables["identity_residuals"].values()))]
        report.svg_loglog(os.path.join(outdir, "plot.svg"), series,
                          "energy-identity residual vs tau", "tau", "residual", hash_)
    elif rep.kind == "diagonal":
        for t in spec["times"]:
            rows = [[row["delta"], row["tau"], row["diagonal"]]
                    for row in rep.tables["limbs"] if row["t"] == t]
            report.write_csv(os.path.join(outdir, f"diagonal_t{t:g}.csv"),
                             ["delta", "tau", "h1_error"], rows, hash_)
        limb_cols = ["k", "delta", "tau", "t", "diagonal", "delta_limb",
                     "tau_limb_linear", "tau_limb_nonlinear", "delta_limb_fine"]
        rows = [[row[c] for c in limb_cols] for row in rep.tables["limbs"]]
        report.write_csv(os.path.join(outdir, "limbs.csv"), limb_cols, rows, hash_)
        series = [(f"t={t:g}", spec["deltas"], rep.tables["diagonal_errors"][t])
                  for t in spec["times"]]
        report.svg_loglog(os.path.join(outdir, "plot.svg"), series,
                          "diagonal H1 error vs delta", "delta", "H1 error", hash_)
    report.write_json(os.path.join(outdir, "report.json"),
                      {"kind": rep.kind, "spec": spec, "rates": rep.rates,
                       "flags": rep.flags}, hash_)


def _run_sweep(cfg: RunConfig, outdir: str, hash_: str) -> int:
    spec = _sweep_spec(cfg)
    workers = cfg.workers or os.cpu_count() or 1
    try:
        if cfg.mode == "sweep-delta":
            rep = lab.sweep_delta(spec, workers)
        elif cfg.mode == "sweep-tau":
            rep = lab.sweep_tau(spec, workers)
        elif cfg.mode == "diagonal":
            rep = lab.sweep_diagonal(spec, workers)
        else:
            audit = lab.convexity_audit(spec)
            report.write_json(os.path.join(outdir, "audit.json"), {
                "delta": audit.delta,
                "pairs": audit.pairs,
                "convexity_violations": audit.convexity_violations,
                "convexity_fraction": audit.convexity_fraction,
                "metric_constant": audit.metric_constant,
                "triangle_violations": audit.triangle_violations,
                "threshold_table": audit.threshold_table,
                "first_violating_delta": audit.first_violating_delta,
            }, hash_)
            rows = [[r["delta"], r["violations"], r["checks"]] for r in audit.threshold_table]
            report.write_csv(os.path.join(outdir, "threshold.csv"),
                             ["delta", "violations", "checks"], rows, hash_)
            if not audit.passed:
                report.failed_marker(outdir, "convexity or triangle violations at the base delta")
                return EXIT_ASSERT
            return EXIT_OK
    except AmplitudeTooLarge as exc:
        report.failed_marker(outdir, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit_sweep(rep, outdir, hash_)
    if not rep.flags.get("solver_ok", True):
        report.failed_marker(outdir, "solver failure in at least one sweep cell")
        return EXIT_SOLVER
    if not rep.passed:
        bad = [k for k, v in rep.flags.items() if not v]
        report.failed_marker(outdir, f"hard assertions failed: {', '.join(bad)}")
        return EXIT_ASSERT
    return EXIT_OK


def dispatch(cfg: RunConfig) -> int:
    """Run the configured pipeline; returns the process exit code."""
    if cfg.mode == "check":
        results = checks.run_all(seed=cfg.seed, dims=(1, 2))
        return EXIT_OK if checks.print_table(results) else EXIT_ASSERT
    outdir = _outdir(cfg)
    hash_ = report.config_hash(cfg.as_dict())
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump(cfg.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    try:
        if cfg.mode in ("nonlinear", "linear"):
            return _run_single(cfg, outdir, hash_)
        return _run_sweep(cfg, outdir, hash_)
    except SingularSystem as exc:
        report.failed_marker(outdir, f"solver failure: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (g.DetGuardViolation,) as exc:
        report.failed_marker(outdir, f"determinant guard: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSERT


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(parser):
    parser.add_argument("--config", metavar="FILE", help="JSON config file (flat keys)")
    cfg = RunConfig()
    for f in dc_fields(RunConfig):
        default = getattr(cfg, f.name)
        parser.add_argument(f"--{f.name}", default=None, metavar=f.name.upper(),
                            help=f"{_HELP[f.name]} (default: {default!r})")


def _collect_overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in dc_fields(RunConfig)
            if getattr(args, f.name, None) is not None}


def _cmd_plot(args) -> int:
    header, rows = report.read_csv(args.csv)
    xs = [row[0] for row in rows]
    series = [(header[j], xs, [row[j] for row in rows]) for j in range(1, len(header))]
    out = args.output or os.path.splitext(args.csv)[0] + ".svg"
    report.svg_loglog(out, series, os.path.basename(args.csv), header[0], "value",
                      report.config_hash({"csv": os.path.basename(args.csv)}))
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="viscoflow",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"viscoflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one nonlinear or linear trajectory")
    _add_config_flags(p_run)
    p_sweep = sub.add_parser("sweep", help="convergence sweeps and the audit")
    _add_config_flags(p_sweep)
    p_check = sub.add_parser("check", help="constitutive/discretization property suite")
    _add_config_flags(p_check)
    p_plot = sub.add_parser("plot", help="render an emitted CSV as a log-log SVG")
    p_plot.add_argument("csv")
    p_plot.add_argument("--output", default=None)

    args = parser.parse_args(argv)
    if args.command == "plot":
        return _cmd_plot(args)

    try:
        cfg = parse_config(args.config, _collect_overrides(args))
        if args.command == "check":
            cfg.mode = "check"
        elif args.command == "run" and cfg.mode not in ("nonlinear", "linear"):
            raise ConfigError("mode", f"`run` expects nonlinear|linear (got {cfg.mode!r})")
        elif args.command == "sweep" and cfg.mode not in ("sweep-delta", "sweep-tau",
                                                          "diagonal", "audit"):
            raise ConfigError("mode", "`sweep` expects sweep-delta|sweep-tau|diagonal|audit "
                                      f"(got {cfg.mode!r})")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
