"""Finite-strain flow: scaled energy, global dissipation distance, the
time-incremental minimization scheme, the metric slope, and weak residuals.

With weights wW = delta^-2, wP = delta^(-p*alpha) and f = 0:

  energy(y)        = wW int W(grad y) + wP int P(grad2 y)
  dist(y0, y1)     = delta^-1 ( int D^2(grad y0, grad y1) )^(1/2)
  step functional  Phi(tau, y_prev; y) = dist(y, y_prev)^2 / (2 tau) + energy(y)

Each increment is minimized by damped L-BFGS with Armijo backtracking, warm
started at y_prev, with the exact analytic gradient of the discrete
functional; line-search trials with det(grad y) <= 0 on any cell are rejected
by shrinking the step.  Accepted steps therefore satisfy
Phi(y) <= Phi(y_prev) = energy(y_prev), which makes the per-step energy
monotonicity exact in floating point.

The slope at y solves the auxiliary SPD problem

  min_w  (1/2) int H_{grad y}[grad w, grad w]
             - int ( dW(grad y) : grad w + beta dP(grad2 y) : grad2 w )

over one-layer-clamped fields, beta = delta^(2 - p*alpha), and returns
delta^-1 |sqrt(H_{grad y}) grad w|_L2, the discrete metric slope of the
discrete energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grid as g
from .materials import MaterialBundle, OutOfNeighborhood
from .solvers import MinimizeResult, gradient_descent, lbfgs_minimize, pcg
from .trajectory import LedgerEntry, Trajectory


@dataclass(frozen=True)
class NonlinearConfig:
    """Scales, step size, horizon and inner-solver tolerances."""

    delta: float
    alpha: float
    tau: float
    T: float
    grad_tol: float = 1e-8
    max_iters: int = 2000
    guard_radius: float = 0.5
    cg_tol: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0,1) (got {self.alpha})")
        for name in ("delta", "tau", "T", "grad_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    def weight_W(self) -> float:
        return self.delta ** -2.0

    def weight_P(self, p: float) -> float:
        return self.delta ** (-p * self.alpha)

    def beta(self, p: float) -> float:
        """Scale of the hyperstress term in the equation, delta^(2 - p*alpha)."""
        return self.delta ** (2.0 - p * self.alpha)


# ---------------------------------------------------------------------------
# Energy, distance, incremental functional
# ---------------------------------------------------------------------------

def energy_parts(cfg: NonlinearConfig, b: MaterialBundle, y: g.Field) -> tuple[float, float]:
    """The two scaled energy terms (wW int W, wP int P), guard checked."""
    ct = g.gradients(y)
    if not g.det_guard(ct):
        raise g.DetGuardViolation(f"min cell det = {g.det_min(ct.F):.3g}")
    ew = cfg.weight_W() * g.integrate(y.grid, b.energy_density(ct.F))
    ep = cfg.weight_P(b.p) * g.integrate(y.grid, b.penalty(ct.G))
    return ew, ep


def energy(cfg: NonlinearConfig, b: MaterialBundle, y: g.Field) -> float:
    """Scaled stored energy of a deformation (f = 0, so the value is >= 0)."""
    ew, ep = energy_parts(cfg, b, y)
    return ew + ep


def dissipation(cfg: NonlinearConfig, b: MaterialBundle, y0: g.Field, y1: g.Field) -> float:
    """Global dissipation distance delta^-1 (int D^2(grad y0, grad y1))^(1/2)."""
    if y0.grid != y1.grid:
        raise g.GridMismatch("fields live on different grids")
    F0, F1 = g.gradient_of(y0.grid, y0.flat), g.gradient_of(y1.grid, y1.flat)
    if g.det_min(F0) <= 0.0 or g.det_min(F1) <= 0.0:
        raise g.DetGuardViolation("det guard fails on an input field")
    val = g.integrate(y0.grid, b.distance_sq(F0, F1))
    return math.sqrt(max(val, 0.0)) / cfg.delta


def increment_functional(cfg: NonlinearConfig, b: MaterialBundle,
                         y_prev: g.Field, y: g.Field) -> float:
    """Phi(tau, y_prev; y) = dist(y, y_prev)^2 / (2 tau) + energy(y)."""
    return dissipation(cfg, b, y, y_prev) ** 2 / (2.0 * cfg.tau) + energy(cfg, b, y)


# ---------------------------------------------------------------------------
# Inner minimization
# ---------------------------------------------------------------------------

class _Increment:
    """Value/gradient/feasibility of Phi(tau, y_prev; .) on the free dofs."""

    def __init__(self, cfg, b, y_prev):
        self.cfg, self.b = cfg, b
        self.grid = y_prev.grid
        self.clamp = y_prev.clamp
        d = self.grid.dim
        self.free = np.flatnonzero(np.repeat(g.free_nodes(self.grid, self.clamp), d))
        self.base = y_prev.flat.ravel().copy()
        self.F_prev = g.gradient_of(self.grid, y_prev.flat)
        self.G_prev = g.second_gradient_of(self.grid, y_prev.flat)
        self.hd = self.grid.h ** self.grid.dim
        self.last_detmin = None

    def stiff_model_solver(self):
        """Inverse of the stiff quadratic part of the Hessian at y_prev.

        The distance term contributes its exact Hessian (1/(tau delta^2))
        B_H^T B_H with B_H the metric factor at grad y_prev; the penalty
        contributes the cellwise bound wP * p |G|^(p-2) on its Hessian
        (exact for p = 2).  The Hessian of the stored-energy term is never
        assembled.  Returns a direct solve with the factorized model.
        """
        import scipy.sparse as sp
        from scipy.sparse.linalg import splu

        cfg, b, grid = self.cfg, self.b, self.grid
        Bm = g.metric_factor(grid, self.F_prev, self.clamp)
        M = (Bm.T @ Bm) / (cfg.tau * cfg.delta**2)
        Bp = g.second_gradient_factor(grid, self.clamp)
        gn = np.sum(self.G_prev**2, axis=(1, 2, 3))
        w = cfg.weight_P(b.p) * b.p * np.where(gn > 0.0, gn ** (b.p / 2.0 - 1.0), 0.0)
        if np.any(w > 0.0):
            W = sp.diags(np.tile(w, grid.dim**3))
            M = M + Bp.T @ (W @ Bp)
        lu = splu(M.tocsc())
        return lu.solve

    def pack(self, y: g.Field) -> np.ndarray:
        return y.flat.ravel()[self.free]

    def unpack(self, x: np.ndarray) -> g.Field:
        full = self.base.copy()
        full[self.free] = x
        return g.make_field(self.grid, full, "deformation", self.clamp)

    def _full_values(self, x):
        full = self.base.copy()
        full[self.free] = x
        return full.reshape(self.grid.num_nodes, self.grid.dim)

    def __call__(self, x):
        cfg, b, grid = self.cfg, self.b, self.grid
        V = self._full_values(x)
        F = g.gradient_of(grid, V)
        detmin = g.det_min(F)
        self.last_detmin = detmin
        if detmin <= 0.0:
            return np.inf, np.zeros_like(x), False
        G = g.second_gradient_of(grid, V)
        wW, wP = cfg.weight_W(), cfg.weight_P(b.p)
        wD = cfg.weight_W() / (2.0 * cfg.tau)

        val = (wW * g.integrate(grid, b.energy_density(F))
               + wP * g.integrate(grid, b.penalty(G))
               + wD * g.integrate(grid, b.distance_sq(F, self.F_prev)))

        PW = self.hd * (wW * b.stress(F) + wD * b.distance_sq_grad1(F, self.F_prev))
        PP = self.hd * wP * b.hyperstress(G)
        grad = (g.gradient_adjoint(grid, PW) + g.second_gradient_adjoint(grid, PP))
        return val, grad.ravel()[self.free], True


def minimize_increment(cfg: NonlinearConfig, b: MaterialBundle,
                       y_prev: g.Field) -> tuple[g.Field, MinimizeResult]:
    """One implicit step: argmin of Phi(tau, y_prev; .), warm started at y_prev.

    The returned field satisfies Phi(y) <= Phi(y_prev) and the relative
    gradient criterion |grad Phi(y)| <= grad_tol (1 + |grad Phi(y_prev)|);
    on iteration exhaustion the best iterate is returned with
    result.converged = False.
    """
    inc = _Increment(cfg, b, y_prev)
    res = lbfgs_minimize(inc, inc.pack(y_prev), grad_tol=cfg.grad_tol,
                         max_iters=cfg.max_iters, h0_solve=inc.stiff_model_solver())
    return inc.unpack(res.x), res


def minimize_increment_gd(cfg, b, y_prev, grad_tol=None) -> tuple[g.Field, MinimizeResult]:
    """Brute-force inner minimization by plain gradient descent (test oracle)."""
    inc = _Increment(cfg, b, y_prev)
    tol = cfg.grad_tol if grad_tol is None else grad_tol
    res = gradient_descent(inc, inc.pack(y_prev), grad_tol=tol)
    return inc.unpack(res.x), res


def run_flow(cfg: NonlinearConfig, b: MaterialBundle, y0: g.Field,
             with_slopes: bool = True) -> Trajectory:
    """Minimizing movement over N = ceil(T/tau) steps from y0.

    The ledger records energy, step distance, rate, slope, inner iterations
    and the determinant margin.  Aborts with a partial trajectory and
    completed=False if an inner solve fails to converge.
    """
    n_steps = int(math.ceil(cfg.T / cfg.tau - 1e-12))
    traj = Trajectory(tau=cfg.tau)
    y = y0
    e_prev = energy(cfg, b, y0)
    traj.fields.append(y0)
    traj.ledger.append(_entry(cfg, b, 0, y0, e_prev, 0.0, 0, with_slopes))
    for n in range(1, n_steps + 1):
        y_new, res = minimize_increment(cfg, b, y)
        e_new = energy(cfg, b, y_new)
        dist = dissipation(cfg, b, y_new, y)
        if not (dist**2 / (2.0 * cfg.tau) + e_new <= e_prev):
            # improvement below float resolution: the argmin is
            # indistinguishable from the warm start, so the state parks
            y_new, e_new, dist = y, e_prev, 0.0
        # feasibility of the warm start makes these exact, not toleranced
        assert e_new <= e_prev, "energy increased across an accepted step"
        assert dist**2 / (2.0 * cfg.tau) + e_new <= e_prev, "incremental value increased"
        traj.fields.append(y_new)
        traj.ledger.append(_entry(cfg, b, n, y_new, e_new, dist, res.iters, with_slopes))
        if not res.converged:
            traj.completed = False
            break
        y, e_prev = y_new, e_new
    return traj


def _entry(cfg, b, n, y, e, dist, iters, with_slopes) -> LedgerEntry:
    F = g.gradient_of(y.grid, y.flat)
    return LedgerEntry(
        n=n,
        t=n * cfg.tau,
        energy=e,
        distance=dist,
        rate=dist / cfg.tau if n > 0 else 0.0,
        slope=slope(cfg, b, y) if with_slopes else float("nan"),
        iters=iters,
        detmin=g.det_min(F),
    )


# ---------------------------------------------------------------------------
# Metric slope
# ---------------------------------------------------------------------------

def slope(cfg: NonlinearConfig, b: MaterialBundle, y: g.Field) -> float:
    """Metric slope of the scaled energy at y via one SPD solve.

    Solves  int H_{grad y}[grad w, grad phi] =
            int ( dW(grad y) : grad phi + beta dP(grad2 y) : grad2 phi )
    for all one-layer-clamped phi, and returns
    delta^-1 |sqrt(H_{grad y}) grad w|_L2.
    """
    grid = y.grid
    ct = g.gradients(y)
    if not g.det_guard(ct):
        raise g.DetGuardViolation("det guard fails at the slope base point")
    gap = np.sqrt(np.sum((ct.F - np.eye(grid.dim)) ** 2, axis=(1, 2))).max()
    if gap > cfg.guard_radius:
        raise OutOfNeighborhood(
            f"max cell |grad y - Id| = {gap:.3g} exceeds guard radius {cfg.guard_radius:.3g}"
        )

    hd = grid.h ** grid.dim
    beta = cfg.beta(b.p)
    PW = hd * b.stress(ct.F)
    PP = hd * beta * b.hyperstress(ct.G)
    rhs_full = g.gradient_adjoint(grid, PW) + g.second_gradient_adjoint(grid, PP)
    free = np.flatnonzero(np.repeat(g.free_nodes(grid, 1), grid.dim))
    rhs = rhs_full.ravel()[free]

    B = g.metric_factor(grid, ct.F, clamp=1)
    diag = np.asarray(B.power(2).sum(axis=0)).ravel()

    def apply_A(v):
        return B.T @ (B @ v)

    w, _ = pcg(apply_A, rhs, diag, tol=cfg.cg_tol)
    return float(np.linalg.norm(B @ w)) / cfg.delta


# ---------------------------------------------------------------------------
# Weak residual of the evolution equation
# ---------------------------------------------------------------------------

def _bump(x):
    # C-infinity bump on (0,1), max value 1, flat to all orders at the ends
    out = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    xi = x[inside]
    out[inside] = np.exp(1.0 - 0.25 / (xi * (1.0 - xi)))
    return out


def test_dictionary(grid: g.Grid) -> list[tuple[str, np.ndarray]]:
    """Smooth compactly supported test fields, sampled at the nodes.

    Bump-enveloped low modes; genuinely W^{2,p}_0 functions, so no clamping
    is applied to the sampled values.
    """
    coords = g.node_coords(grid)
    env = np.ones(grid.num_nodes)
    for ax in range(grid.dim):
        env = env * _bump(coords[:, ax])
    mods = [("bump", env)]
    for ax in range(grid.dim):
        mods.append((f"bump_sin2x{ax}", env * np.sin(2.0 * np.pi * coords[:, ax])))
        mods.append((f"bump_sin3x{ax}", env * np.sin(3.0 * np.pi * coords[:, ax])))
    out = []
    for a in range(grid.dim):
        for name, vals in mods:
            phi = np.zeros((grid.num_nodes, grid.dim))
            phi[:, a] = vals
            out.append((f"{name}_e{a}", phi))
    return out


def weak_residual(cfg: NonlinearConfig, b: MaterialBundle, y: g.Field,
                  ydot: g.Field | np.ndarray, fields=None, f_cells=None) -> float:
    """Max normalized weak-form residual over a dictionary of test fields.

    Evaluates  int (dW(grad y) + dR/dFd(grad y, grad ydot)) : grad phi
             + beta int dP(grad2 y) : grad2 phi - delta int f . phi
    for each test field phi and returns max |r(phi)| / |phi|_H2.
    """
    grid = y.grid
    ydot_flat = ydot.flat if isinstance(ydot, g.Field) else np.asarray(ydot).reshape(grid.num_nodes, grid.dim)
    ct = g.gradients(y)
    Fdot = g.gradient_of(grid, ydot_flat)
    stress1 = b.stress(ct.F) + b.viscous_stress(ct.F, Fdot)
    hyper = cfg.beta(b.p) * b.hyperstress(ct.G)
    if fields is None:
        fields = test_dictionary(grid)

    worst = 0.0
    for _, phi in fields:
        Fp = g.gradient_of(grid, phi)
        Gp = g.second_gradient_of(grid, phi)
        r = g.integrate(grid, np.einsum("cij,cij->c", stress1, Fp))
        r += g.integrate(grid, np.einsum("cijk,cijk->c", hyper, Gp))
        if f_cells is not None:
            pc = g.cell_values(grid, phi)
            r -= cfg.delta * g.integrate(grid, np.einsum("ci,ci->c", np.asarray(f_cells), pc))
        pc = g.cell_values(grid, phi)
        h2 = math.sqrt(
            g.integrate(grid, np.sum(pc**2, axis=1))
            + g.integrate(grid, np.sum(Fp**2, axis=(1, 2)))
            + g.integrate(grid, np.sum(Gp**2, axis=(1, 2, 3)))
        )
        worst = max(worst, abs(r) / h2)
    return worst
