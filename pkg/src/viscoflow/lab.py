"""Parameter sweeps behind the commutativity diagram, plus the convexity and
metric audits.

The harness turns the qualitative convergence statements into numeric
reports: refine delta at fixed tau (linearization limb), refine tau at fixed
delta (time-discretization limb, with the energy-identity residual), refine
both along a paired diagonal, and sample midpoint convexity of the energy on
sublevel pairs.  Rates are fitted and recorded as metadata; the hard
assertions are monotone decrease and the triangle-inequality closure of the
diagram, never a specific rate.

Sweep cells are independent jobs; with workers > 1 they run on a process
pool and are merged by cell index, so results do not depend on scheduling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grid as g
from . import linear, nonlinear
from .materials import reference_bundle
from .report import fit_rate
from .trajectory import Trajectory

_REL_SLACK = 1e-12  # floating-point slack for exact-inequality checks


class AmplitudeTooLarge(ValueError):
    """Initial amplitude breaks the determinant guard at the coarsest delta."""


@dataclass(frozen=True)
class SweepSpec:
    """Full description of one sweep family (tuples keep it hashable)."""

    dim: int = 1
    n: int = 64
    deltas: tuple = (0.04, 0.02, 0.01, 0.005)
    taus: tuple = (0.05,)
    alpha: float = 0.5
    p: float = 0.0  # 0 means the per-dimension default (2 in 1D, 4 in 2D)
    family: str = "bump"
    amplitude: float = 0.1
    T: float = 1.0
    times: tuple = (0.25, 0.5, 1.0)
    seed: int = 0
    grad_tol: float = 1e-9
    max_iters: int = 4000
    guard_radius: float = 0.5

    def __post_init__(self):
        if not self.deltas or not self.taus:
            raise ValueError("deltas and taus must be non-empty")
        for name in ("deltas", "taus"):
            seq = getattr(self, name)
            if any(b >= a for a, b in zip(seq, seq[1:])):
                raise ValueError(f"{name} must be strictly decreasing")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if any(t <= 0.0 or t > self.T + 1e-12 for t in self.times):
            raise ValueError("sample times must lie in (0, T]")
        if self.family not in ("bump", "sine"):
            raise ValueError("family must be 'bump' or 'sine'")
        if self.p and self.p <= self.dim:
            raise ValueError("need p > dim")

    @property
    def p_value(self) -> float:
        return self.p if self.p else (2.0 if self.dim == 1 else 4.0)

    def grid(self) -> g.Grid:
        return g.Grid(self.dim, self.n)

    def bundle(self):
        return reference_bundle(self.dim, self.p_value, self.guard_radius)


@dataclass(eq=False)
class SweepReport:
    kind: str
    spec: dict
    tables: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())


# ---------------------------------------------------------------------------
# Initial data families
# ---------------------------------------------------------------------------

def _bump(x):
    out = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    xi = x[inside]
    out[inside] = np.exp(1.0 - 0.25 / (xi * (1.0 - xi)))
    return out

_COMPONENT_WEIGHTS = (1.0, 0.6, 0.8)


def family_values(grid: g.Grid, family: str, amplitude: float) -> np.ndarray:
    """Nodal samples (num_nodes, d) of the named smooth clamped family."""
    x = g.node_coords(grid)
    if family == "bump":
        base = np.ones(grid.num_nodes)
        for ax in range(grid.dim):
            base = base * _bump(x[:, ax])
        # mild asymmetry so odd-order terms do not cancel in rate fits
        base = base * (1.0 + 0.5 * np.sin(2.0 * np.pi * x[:, 0]))
    elif family == "sine":
        base = np.ones(grid.num_nodes)
        for ax in range(grid.dim):
            base = base * np.sin(np.pi * x[:, ax])
    else:
        raise ValueError(f"unknown family {family!r}")
    out = np.empty((grid.num_nodes, grid.dim))
    for a in range(grid.dim):
        out[:, a] = amplitude * _COMPONENT_WEIGHTS[a] * base
    return out


def prepare_initial_data(spec: SweepSpec, delta: float) -> tuple[g.Field, g.Field]:
    """Well-prepared pair (y0, u0) with y0 = id + delta*u0.

    u0 is delta independent, smooth and zero on the two outermost node
    layers, so the second-gradient term delta^(p - p*alpha) int P(grad2 u0)
    vanishes automatically as delta -> 0.  Raises AmplitudeTooLarge when the
    determinant guard fails at this delta.
    """
    grid = spec.grid()
    vals = family_values(grid, spec.family, spec.amplitude)
    vals[g.clamped_nodes(grid, 2)] = 0.0
    u0 = g.make_field(grid, vals, "displacement", 1)
    y_vals = g.node_coords(grid) + delta * vals
    F = g.gradient_of(grid, y_vals.reshape(grid.num_nodes, grid.dim))
    if g.det_min(F) <= 0.0:
        raise AmplitudeTooLarge(
            f"family {spec.family!r} amplitude {spec.amplitude} breaks the det guard at delta={delta}"
        )
    y0 = g.make_field(grid, y_vals, "deformation", 2)
    return y0, u0


def prepared_diagnostics(spec: SweepSpec, delta: float) -> dict:
    """Hypothesis bookkeeping for well-prepared data at one delta."""
    y0, u0 = prepare_initial_data(spec, delta)
    b = spec.bundle()
    cfg = _nl_config(spec, delta, spec.taus[0])
    ew, ep = nonlinear.energy_parts(cfg, b, y0)
    lcfg = _lin_config(spec, spec.taus[0])
    return {
        "delta": delta,
        "energy_W_term": ew,
        "energy_P_term": ep,
        "energy_total": ew + ep,
        "linear_energy": linear.energy(lcfg, u0),
    }


# ---------------------------------------------------------------------------
# Cell jobs (module level so a process pool can pickle them)
# ---------------------------------------------------------------------------

def _nl_config(spec: SweepSpec, delta: float, tau: float) -> nonlinear.NonlinearConfig:
    return nonlinear.NonlinearConfig(
        delta=delta, alpha=spec.alpha, tau=tau, T=spec.T,
        grad_tol=spec.grad_tol, max_iters=spec.max_iters,
        guard_radius=spec.guard_radius,
    )


def _lin_config(spec: SweepSpec, tau: float) -> linear.LinearConfig:
    b = spec.bundle()
    return linear.LinearConfig.from_bundle(spec.grid(), b, tau, spec.T)


def _nonlinear_job(args) -> Trajectory:
    spec, delta, tau = args
    y0, _ = prepare_initial_data(spec, delta)
    return nonlinear.run_flow(_nl_config(spec, delta, tau), spec.bundle(), y0)


def _linear_job(args) -> Trajectory:
    spec, tau = args
    _, u0 = prepare_initial_data(spec, spec.deltas[0])
    return linear.run_flow(_lin_config(spec, tau), u0)


def _map_jobs(fn, payloads, workers):
    if workers and workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, payloads))
    return [fn(p) for p in payloads]


def _as_u(field: g.Field, delta: float) -> g.Field:
    if field.kind == "displacement":
        return field
    return g.displacement_from(field, delta)


def rescaled_h1_error(traj_a: Trajectory, traj_b: Trajectory,
                      delta: float, t: float) -> float:
    """H1 distance of the (rescaled) displacement interpolants at time t.

    Deformation states are rescaled by delta^-1 (y - id); displacement states
    are compared as they are.
    """
    ua = _as_u(traj_a.state(t), delta)
    ub = _as_u(traj_b.state(t), delta)
    _, h1 = g.diff_norms(ua, ub)
    return h1


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def sweep_delta(spec: SweepSpec, workers: int | None = None) -> SweepReport:
    """Linearization limb: delta -> 0 at each fixed tau.

    Errors E[t][i][j] = |delta_i^-1 (Y_{tau_j}(t) - id) - U_{tau_j}(t)|_H1,
    asserted strictly decreasing in i; the fitted delta-rate is recorded.
    A ledger cross-check verifies that the energy gap between the rescaled
    nonlinear and the linear runs at the smallest delta sits inside the
    C*delta^alpha band fitted from the coarser deltas.
    """
    nl = _map_jobs(_nonlinear_job,
                   [(spec, d, t) for d in spec.deltas for t in spec.taus], workers)
    lin = _map_jobs(_linear_job, [(spec, t) for t in spec.taus], workers)
    cells = {(i, j): nl[i * len(spec.taus) + j]
             for i in range(len(spec.deltas)) for j in range(len(spec.taus))}

    solver_ok = all(tr.completed for tr in nl + lin)
    errors = {}
    for t in spec.times:
        errors[t] = [
            [rescaled_h1_error(cells[(i, j)], lin[j], spec.deltas[i], t)
             for j in range(len(spec.taus))]
            for i in range(len(spec.deltas))
        ]
    decreasing = all(
        errors[t][i + 1][j] < errors[t][i][j]
        for t in spec.times
        for j in range(len(spec.taus))
        for i in range(len(spec.deltas) - 1)
    )
    rates = {
        f"t={t:g},tau={spec.taus[j]:g}": fit_rate(spec.deltas, [errors[t][i][j] for i in range(len(spec.deltas))])
        for t in spec.times for j in range(len(spec.taus))
    }

    # ledger energy band: gap(delta) <= C * delta^alpha with C fitted on the
    # coarser deltas must cover the finest delta
    gaps = []
    for i, d in enumerate(spec.deltas):
        tr_nl, tr_lin = cells[(i, 0)], lin[0]
        m = min(len(tr_nl.ledger), len(tr_lin.ledger))
        gap = max(abs(tr_nl.ledger[k].energy - tr_lin.ledger[k].energy) for k in range(m))
        gaps.append(gap)
    c_band = max(gp / d**spec.alpha for gp, d in zip(gaps[:-1], spec.deltas[:-1]))
    band_ok = gaps[-1] <= c_band * spec.deltas[-1] ** spec.alpha * (1.0 + 1e-9)

    return SweepReport(
        kind="sweep-delta",
        spec=asdict(spec),
        tables={"errors": errors, "ledger_energy_gap": dict(zip(spec.deltas, gaps))},
        rates=rates,
        flags={"solver_ok": solver_ok, "errors_decreasing": decreasing,
               "ledger_band_ok": bool(band_ok)},
    )


def sweep_tau(spec: SweepSpec, workers: int | None = None) -> SweepReport:
    """Time limb at fixed delta = deltas[0]: dyadic tau refinement.

    Reports (a) H1 Cauchy differences between consecutive-tau trajectories at
    the sample times, (b) the energy-identity residual per tau (both asserted
    decreasing), and (c) the linear step-size bound
    dist(U_tau(t), u(t))^2 <= tau^2/2 * slope(u0)^2 checked at step
    boundaries against the finest linear run.
    """
    delta = spec.deltas[0]
    nl = _map_jobs(_nonlinear_job, [(spec, delta, t) for t in spec.taus], workers)
    solver_ok = all(tr.completed for tr in nl)

    cauchy = {
        t: [rescaled_h1_error(nl[j], nl[j + 1], delta, t)
            for j in range(len(spec.taus) - 1)]
        for t in spec.times
    }
    residuals = [tr.energy_identity_residual() for tr in nl]
    cauchy_dec = all(
        seq[k + 1] < seq[k] for seq in cauchy.values() for k in range(len(seq) - 1)
    )
    resid_dec = all(residuals[k + 1] < residuals[k] for k in range(len(residuals) - 1))

    # linear analogue against the finest linear reference, at nodal times
    tau_ref = spec.taus[-1] / 4.0
    lin_ref = _linear_job((spec, tau_ref))
    lin_runs = _map_jobs(_linear_job, [(spec, t) for t in spec.taus], workers)
    lcfg = _lin_config(spec, spec.taus[0])
    _, u0 = prepare_initial_data(spec, delta)
    slope0 = linear.slope(lcfg, u0)
    bound_ok = True
    bound_table = []
    for tr, tau in zip(lin_runs, spec.taus):
        for frac in (0.25, 0.5, 1.0):
            tn = tau * max(1, round(frac * spec.T / tau))  # step boundary
            if tn > spec.T + 1e-12:
                continue
            lhs = linear.dissipation(lcfg, tr.state(tn), lin_ref.state(tn)) ** 2
            rhs = 0.5 * tau**2 * slope0**2
            bound_table.append({"tau": tau, "t": tn, "lhs": lhs, "rhs": rhs})
            bound_ok &= lhs <= rhs * (1.0 + 1e-9)

    return SweepReport(
        kind="sweep-tau",
        spec=asdict(spec),
        tables={"cauchy": cauchy,
                "identity_residuals": dict(zip(spec.taus, residuals)),
                "linear_step_bound": bound_table},
        rates={"identity_residual": fit_rate(spec.taus, residuals)},
        flags={"solver_ok": solver_ok, "cauchy_decreasing": cauchy_dec,
               "identity_residual_decreasing": resid_dec,
               "linear_step_bound_ok": bool(bound_ok)},
    )


def sweep_diagonal(spec: SweepSpec, workers: int | None = None) -> SweepReport:
    """Joint limb: paired (delta_k, tau_k) against the finest linear run.

    Emits all four limbs of the commutativity diagram plus the diagonal and
    checks the triangle-inequality closure |A - B| <= E_diag <= A + B for
    both decompositions; E_diag must be strictly decreasing along the pairs.
    """
    if len(spec.deltas) != len(spec.taus):
        raise ValueError("diagonal sweep needs matching delta and tau lists")
    pairs = list(zip(spec.deltas, spec.taus))
    tau_ref = spec.taus[-1] / 4.0
    nl = _map_jobs(_nonlinear_job, [(spec, d, t) for d, t in pairs], workers)
    nl_fine = _map_jobs(_nonlinear_job, [(spec, d, tau_ref) for d, _ in pairs], workers)
    lin = _map_jobs(_linear_job, [(spec, t) for _, t in pairs], workers)
    lin_ref = _linear_job((spec, tau_ref))
    solver_ok = all(tr.completed for tr in nl + nl_fine + lin + [lin_ref])

    limbs = []
    closure_ok = True
    for k, (d, tau) in enumerate(pairs):
        for t in spec.times:
            diag = rescaled_h1_error(nl[k], lin_ref, d, t)
            a = rescaled_h1_error(nl[k], lin[k], d, t)         # delta limb, fixed tau
            bl = rescaled_h1_error(lin[k], lin_ref, d, t)      # tau limb, linear
            c = rescaled_h1_error(nl[k], nl_fine[k], d, t)     # tau limb, nonlinear
            dd = rescaled_h1_error(nl_fine[k], lin_ref, d, t)  # delta limb, fine tau
            limbs.append({"k": k, "delta": d, "tau": tau, "t": t,
                          "diagonal": diag, "delta_limb": a, "tau_limb_linear": bl,
                          "tau_limb_nonlinear": c, "delta_limb_fine": dd})
            slack = _REL_SLACK * (1.0 + a + bl + c + dd)
            closure_ok &= diag <= a + bl + slack
            closure_ok &= diag >= abs(a - bl) - slack
            closure_ok &= diag <= c + dd + slack

    diag_by_time = {
        t: [row["diagonal"] for row in limbs if row["t"] == t] for t in spec.times
    }
    decreasing = all(
        seq[k + 1] < seq[k] for seq in diag_by_time.values() for k in range(len(seq) - 1)
    )
    return SweepReport(
        kind="diagonal",
        spec=asdict(spec),
        tables={"limbs": limbs, "diagonal_errors": diag_by_time},
        rates={f"t={t:g}": fit_rate(spec.deltas, diag_by_time[t]) for t in spec.times},
        flags={"solver_ok": solver_ok, "diagonal_decreasing": decreasing,
               "closure_ok": bool(closure_ok)},
    )


# ---------------------------------------------------------------------------
# Convexity and metric audit
# ---------------------------------------------------------------------------

def _random_displacement(rng, grid: g.Grid, amplitude: float) -> np.ndarray:
    """Random low-mode smooth field, scaled to max cell |grad u| = amplitude."""
    x = g.node_coords(grid)
    vals = np.zeros((grid.num_nodes, grid.dim))
    modes = range(1, 5) if grid.dim == 1 else range(1, 3)
    for a in range(grid.dim):
        acc = np.zeros(grid.num_nodes)
        if grid.dim == 1:
            for k in modes:
                acc += rng.uniform(-1.0, 1.0) / k**2 * np.sin(k * np.pi * x[:, 0])
        else:
            for k in modes:
                for l in modes:
                    acc += (rng.uniform(-1.0, 1.0) / (k * l)
                            * np.sin(k * np.pi * x[:, 0]) * np.sin(l * np.pi * x[:, 1]))
        vals[:, a] = acc
    vals[g.clamped_nodes(grid, 2)] = 0.0
    F = g.gradient_of(grid, vals)
    scale = np.sqrt(np.sum(F**2, axis=(1, 2))).max()
    if scale == 0.0:
        return vals
    return vals * (amplitude / scale) * rng.uniform(0.3, 1.0)


@dataclass(eq=False)
class AuditReport:
    spec: dict
    delta: float
    pairs: int
    convexity_violations: int
    convexity_fraction: float
    metric_constant: float
    triangle_violations: int
    threshold_table: list
    first_violating_delta: float | None

    @property
    def passed(self) -> bool:
        return self.convexity_violations == 0 and self.triangle_violations == 0


def _sample_states(rng, spec, delta, count):
    grid = spec.grid()
    out = []
    for _ in range(count):
        u = _random_displacement(rng, grid, spec.amplitude)
        y = g.node_coords(grid) + delta * u
        F = g.gradient_of(grid, y.reshape(grid.num_nodes, grid.dim))
        if g.det_min(F) > 0.0:
            out.append(g.make_field(grid, y, "deformation", 2))
    return out


def _count_convexity_violations(cfg, b, states, s_values):
    viol = 0
    checked = 0
    grid = states[0].grid if states else None
    for y0, y1 in zip(states[::2], states[1::2]):
        e0, e1 = nonlinear.energy(cfg, b, y0), nonlinear.energy(cfg, b, y1)
        for s in s_values:
            vals = (1.0 - s) * y0.flat + s * y1.flat
            ys = g.make_field(grid, vals, "deformation", 2)
            es = nonlinear.energy(cfg, b, ys)
            bound = (1.0 - s) * e0 + s * e1
            checked += 1
            if es > bound + _REL_SLACK * (1.0 + abs(bound)):
                viol += 1
    return viol, checked


def convexity_audit(spec: SweepSpec, n_pairs: int = 500,
                    s_values=(0.25, 0.5, 0.75), escalation_levels: int = 7,
                    pairs_per_level: int = 60) -> AuditReport:
    """Sampled convexity and metric checks at delta = deltas[-1].

    (a) midpoint convexity of the energy along segments (zero violations
    expected for small delta), (b) the generalized-geodesic distance bound
    with its fitted constant, (c) the triangle inequality for the dissipation
    distance.  A delta-escalation search then documents the smallest tested
    delta at which convexity violations first appear.
    """
    delta = spec.deltas[-1]
    b = spec.bundle()
    cfg = _nl_config(spec, delta, spec.taus[0])
    rng = np.random.default_rng(spec.seed)
    states = _sample_states(rng, spec, delta, 2 * n_pairs)

    viol_a, _ = _count_convexity_violations(cfg, b, states, s_values)

    # (b) D(y_s, y0)^2 <= s^2 D(y1, y0)^2 (1 + C |grad y1 - grad y0|_inf)
    c_fit = 0.0
    for y0, y1 in zip(states[::2], states[1::2]):
        d10 = nonlinear.dissipation(cfg, b, y1, y0)
        if d10 == 0.0:
            continue
        gmax = np.abs(g.gradient_of(y0.grid, y1.flat - y0.flat)).max()
        if gmax == 0.0:
            continue
        for s in s_values:
            ys = g.make_field(y0.grid, (1.0 - s) * y0.flat + s * y1.flat, "deformation", 2)
            ratio = nonlinear.dissipation(cfg, b, ys, y0) ** 2 / (s**2 * d10**2)
            c_fit = max(c_fit, (ratio - 1.0) / gmax)

    # (c) triangle inequality over consecutive triples
    viol_tri = 0
    for y0, y1, y2 in zip(states[::3], states[1::3], states[2::3]):
        d02 = nonlinear.dissipation(cfg, b, y0, y2)
        d01 = nonlinear.dissipation(cfg, b, y0, y1)
        d12 = nonlinear.dissipation(cfg, b, y1, y2)
        if d02 > d01 + d12 + _REL_SLACK * (1.0 + d01 + d12):
            viol_tri += 1

    # delta escalation: smallest tested delta with convexity violations
    table = []
    first_bad = None
    for lvl in range(escalation_levels):
        d_lvl = delta * 2.0**lvl
        rng_lvl = np.random.default_rng(spec.seed + 1000 + lvl)
        try:
            st = _sample_states(rng_lvl, spec, d_lvl, 2 * pairs_per_level)
            cfg_lvl = _nl_config(spec, d_lvl, spec.taus[0])
            v, checked = _count_convexity_violations(cfg_lvl, b, st, s_values)
            table.append({"delta": d_lvl, "violations": v, "checks": checked})
            if v > 0 and first_bad is None:
                first_bad = d_lvl
        except (g.DetGuardViolation, AmplitudeTooLarge):
            table.append({"delta": d_lvl, "violations": -1, "checks": 0})
            break

    return AuditReport(
        spec=asdict(spec),
        delta=delta,
        pairs=n_pairs,
        convexity_violations=viol_a,
        convexity_fraction=viol_a / max(1, n_pairs * len(s_values)),
        metric_constant=c_fit,
        triangle_violations=viol_tri,
        threshold_table=table,
        first_violating_delta=first_bad,
    )
