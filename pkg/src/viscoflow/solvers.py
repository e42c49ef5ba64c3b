"""Shared solvers: preconditioned CG and descent methods for the inner steps.

The CG is the single SPD workhorse (implicit Euler steps and the auxiliary
slope problems): diagonal preconditioning, relative-residual termination,
deterministic iteration order.  The inner minimization of the nonlinear
incremental functional uses a damped limited-memory BFGS with Armijo
backtracking and a feasibility guard hook (trial points violating the
determinant guard are rejected by shrinking the step).  Plain gradient
descent is kept as an independent oracle for tests.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class SingularSystem(RuntimeError):
    """An SPD solve failed to converge (signals a guard violation)."""


def pcg(apply_A, b, diag, tol: float = 1e-12, maxiter: int | None = None,
        x0=None) -> tuple[np.ndarray, int]:
    """Conjugate gradients with diagonal preconditioning.

    Terminates on |r| <= tol * |b| (or |r| <= tol for b = 0).  Raises
    SingularSystem on breakdown or when maxiter is exhausted.
    """
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    target = tol * nb if nb > 0.0 else tol
    if maxiter is None:
        maxiter = max(200, 20 * b.size)
    diag = np.asarray(diag, dtype=float)
    if np.any(diag <= 0.0):
        raise SingularSystem("non-positive diagonal in the preconditioner")
    inv_diag = 1.0 / diag

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x) if x0 is not None else b.copy()
    if np.linalg.norm(r) <= target:
        return x, 0
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise SingularSystem("operator is not positive definite along a CG direction")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            return x, it
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SingularSystem(f"CG did not reach tolerance {tol:g} in {maxiter} iterations")


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iters: int
    converged: bool
    n_evals: int


def _backtrack(fg, x, f, g, p, c1=1e-4, shrink=0.5, max_backtracks=45):
    """Armijo backtracking along p; infeasible trials just shrink the step.

    When the predicted decrease is below the float resolution of f, a
    strictly smaller value is accepted instead (last-bit progress).
    """
    slope = float(g @ p)
    if slope >= 0.0:
        return None
    t = 1.0
    evals = 0
    for _ in range(max_backtracks):
        xt = x + t * p
        ft, gt, ok = fg(xt)
        evals += 1
        if ok and np.isfinite(ft):
            decrease = c1 * t * slope
            if ft <= f + decrease:
                return xt, ft, gt, t, evals
            if ft < f and abs(decrease) < 64.0 * np.finfo(float).eps * abs(f):
                return xt, ft, gt, t, evals
        t *= shrink
    return None


def lbfgs_minimize(fg, x0, grad_tol: float = 1e-8, max_iters: int = 500,
                   memory: int = 10, h0_solve=None) -> MinimizeResult:
    """Damped L-BFGS with Armijo backtracking.

    fg(x) -> (value, gradient, feasible).  Termination on
    |g| <= grad_tol * (1 + |g0|).  h0_solve, when given, applies the inverse
    of an SPD model of the stiff quadratic part of the Hessian as the
    initial metric of the two-loop recursion (preconditioned quasi-Newton);
    otherwise the usual scalar scaling is used.  Falls back to the
    preconditioned gradient when the quasi-Newton direction fails its line
    search, and returns the best iterate with converged=False when the
    budget is exhausted.
    """
    x = np.array(x0, dtype=float)
    f, g, ok = fg(x)
    if not ok:
        raise ValueError("infeasible starting point for the inner minimization")
    evals = 1
    f0 = f
    g0_norm = np.linalg.norm(g)
    tol = grad_tol * (1.0 + g0_norm)
    pairs: deque = deque(maxlen=memory)

    it = 0
    stalled = False
    no_progress = 0
    f_res = 64.0 * np.finfo(float).eps
    while np.linalg.norm(g) > tol and it < max_iters:
        p = _two_loop(pairs, g, h0_solve)
        step = _backtrack(fg, x, f, g, p)
        if step is None and pairs:
            pairs.clear()
            step = _backtrack(fg, x, f, g, _two_loop(pairs, g, h0_solve))
        if step is None:
            stalled = True  # f-comparisons exhausted float resolution
            break
        x_new, f_new, g_new, _, ev = step
        evals += ev
        if (f - f_new) <= f_res * (1.0 + abs(f)) and \
                np.linalg.norm(g_new) > 0.9 * np.linalg.norm(g):
            no_progress += 1
        else:
            no_progress = 0
        s, yv = x_new - x, g_new - g
        sy = float(s @ yv)
        if sy > 1e-14 * np.linalg.norm(s) * np.linalg.norm(yv):
            pairs.append((s, yv, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        it += 1
        if no_progress >= 3:
            stalled = True  # crawling on last-bit decreases
            break

    gnorm = np.linalg.norm(g)
    if stalled and gnorm > tol:
        # Newton endgame: contract the gradient norm with full quasi-Newton
        # steps; f is below its float resolution here, so steps are accepted
        # on gradient decrease and the result is reverted if f drifted up.
        xp, fp, gp = x, f, g
        for _ in range(40):
            p = _two_loop(pairs, g, h0_solve)
            xt = x + p
            ft, gt, okf = fg(xt)
            evals += 1
            if not okf or not np.isfinite(ft) or np.linalg.norm(gt) >= 0.9 * np.linalg.norm(g):
                break
            sy = float(p @ (gt - g))
            if sy > 1e-14 * np.linalg.norm(p) * np.linalg.norm(gt - g):
                pairs.append((p, gt - g, 1.0 / sy))
            x, f, g = xt, ft, gt
            it += 1
            if np.linalg.norm(g) <= tol:
                break
        if f > f0:
            x, f, g = xp, fp, gp  # keep the monotone iterate
        gnorm = np.linalg.norm(g)
        converged = bool(gnorm <= max(tol, 1e-3 * (1.0 + g0_norm)))
    else:
        converged = bool(gnorm <= tol)
    return MinimizeResult(x, f, float(gnorm), it, converged, evals)


def _two_loop(pairs, g, h0_solve=None):
    q = -g.copy()
    if not pairs:
        return h0_solve(q) if h0_solve is not None else q
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if h0_solve is not None:
        q = h0_solve(q)
    else:
        s, y, _ = pairs[-1]
        q = q * (float(s @ y) / float(y @ y))
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def gradient_descent(fg, x0, grad_tol: float = 1e-8, max_iters: int = 200000) -> MinimizeResult:
    """Plain Armijo gradient descent; independent oracle for the inner solves."""
    x = np.array(x0, dtype=float)
    f, g, ok = fg(x)
    if not ok:
        raise ValueError("infeasible starting point")
    evals = 1
    tol = grad_tol * (1.0 + np.linalg.norm(g))
    t = 1.0
    it = 0
    while np.linalg.norm(g) > tol and it < max_iters:
        step = _backtrack(fg, x, f, g, -t * g)
        if step is None:
            t *= 0.5
            if t < 1e-16:
                break
            continue
        x, f, g, t_used, ev = step
        evals += ev
        t *= t_used * 2.0  # gentle step-size adaptation
        it += 1
    return MinimizeResult(x, f, float(np.linalg.norm(g)),
                          it, bool(np.linalg.norm(g) <= tol), evals)
