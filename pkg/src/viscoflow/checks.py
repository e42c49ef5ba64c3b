"""Runtime property suite for the constitutive laws and the discretization.

Exposed through the CLI `check` subcommand: each check returns a pass/fail
with a one-line detail (fitted constants are reported, not certified).  The
pytest suite covers the same ground with frozen oracle values; this module is
the user-facing, sampling-based variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid as g
from .materials import (MaterialBundle, fd_gradient, fd_hessian,
                        random_gl_plus, random_rotation, reference_bundle,
                        rotation_distance)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rel(a, b):
    return abs(a - b) / (1.0 + abs(b))


def frame_indifference(b: MaterialBundle, rng, samples=1000, tol=1e-12) -> CheckResult:
    worst = 0.0
    for _ in range(samples):
        F1, F2 = random_gl_plus(rng, b.dim), random_gl_plus(rng, b.dim)
        G = rng.normal(size=(b.dim,) * 3)
        Q1, Q2 = random_rotation(rng, b.dim), random_rotation(rng, b.dim)
        worst = max(worst, _rel(b.energy_density(Q1 @ F1), b.energy_density(F1)))
        worst = max(worst, _rel(b.penalty(np.einsum("ij,jkl->ikl", Q1, G)), b.penalty(G)))
        worst = max(worst, _rel(np.sqrt(b.distance_sq(Q1 @ F1, Q2 @ F2)),
                                np.sqrt(b.distance_sq(F1, F2))))
    return CheckResult(f"frame_indifference_d{b.dim}", worst < tol,
                       f"worst relative drift {worst:.2e} over {samples} draws")


def gradient_consistency(b: MaterialBundle, rng, samples=60, tol=1e-6) -> CheckResult:
    worst = 0.0
    for _ in range(samples):
        F = random_gl_plus(rng, b.dim, spread=0.15)
        G = 0.5 * rng.normal(size=(b.dim,) * 3)
        F2 = random_gl_plus(rng, b.dim, spread=0.15)
        gW = fd_gradient(b.energy_density, F)
        worst = max(worst, np.abs(gW - b.stress(F)).max() / (1.0 + np.abs(gW).max()))
        gP = fd_gradient(b.penalty, G)
        worst = max(worst, np.abs(gP - b.hyperstress(G)).max() / (1.0 + np.abs(gP).max()))
        gD = fd_gradient(lambda X: b.distance_sq(X, F2), F)
        worst = max(worst, np.abs(gD - b.distance_sq_grad1(F, F2)).max() / (1.0 + np.abs(gD).max()))
    return CheckResult(f"gradient_consistency_d{b.dim}", worst < tol,
                       f"worst FD mismatch {worst:.2e} over {samples} draws")


def hessian_reduction(b: MaterialBundle, rng, samples=8, tol=1e-5) -> CheckResult:
    """Full FD Hessian of D^2 at (Y,Y) equals the reduced form on F1 - F2."""
    d = b.dim
    worst = 0.0
    for _ in range(samples):
        Y = np.eye(d) + 0.05 * rng.normal(size=(d, d))

        def d2_pair(z):
            z = z.reshape(2, d, d)
            return b.distance_sq(Y + z[0], Y + z[1])

        H = fd_hessian(d2_pair, np.zeros(2 * d * d), step=1e-4)
        Hred = fd_hessian(lambda z: b.distance_sq(Y + z.reshape(d, d), Y), np.zeros(d * d),
                          step=1e-4)
        for _ in range(6):
            F1, F2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
            z = np.concatenate([F1.ravel(), F2.ravel()])
            full = z @ H @ z
            red = (F1 - F2).ravel() @ Hred @ (F1 - F2).ravel()
            worst = max(worst, _rel(full, red))
    return CheckResult(f"hessian_reduction_d{b.dim}", worst < tol,
                       f"worst relative mismatch {worst:.2e}")


def moduli_symmetric_action(b: MaterialBundle, rng, tol=1e-12) -> CheckResult:
    """CW and CD annihilate skew matrices; eigenvalue floors on sym are 1, 4."""
    d = b.dim
    worst = 0.0
    for _ in range(50):
        A = rng.normal(size=(d, d))
        skew = 0.5 * (A - A.T)
        worst = max(worst, abs(np.einsum("ij,ijkl,kl", skew, b.elastic_moduli, skew)))
        worst = max(worst, abs(np.einsum("ij,ijkl,kl", skew, b.viscous_moduli, skew)))
    E = g.sym_basis(d)
    mw = np.einsum("aij,ijkl,bkl->ab", E, b.elastic_moduli, E)
    md = np.einsum("aij,ijkl,bkl->ab", E, b.viscous_moduli, E)
    lw, ld = np.linalg.eigvalsh(mw).min(), np.linalg.eigvalsh(md).min()
    ok = worst < tol and abs(lw - 1.0) < 1e-12 and abs(ld - 4.0) < 1e-12
    return CheckResult(f"moduli_symmetric_action_d{d}", ok,
                       f"skew leakage {worst:.2e}, sym eigen floors {lw:.3g}, {ld:.3g}")


def viscosity_limit(b: MaterialBundle, rng, samples=100) -> CheckResult:
    """R(F,Fd) is the eps -> 0 limit of D^2(F + eps Fd, F)/(2 eps^2), rate O(eps)."""
    eps_list = (1e-2, 1e-3, 1e-4)
    ok = True
    worst_ratio = 0.0
    for _ in range(samples):
        F = random_gl_plus(rng, b.dim, spread=0.2)
        Fd = rng.normal(size=(b.dim, b.dim))
        r = b.viscous_potential(F, Fd)
        diffs = [abs(b.distance_sq(F + e * Fd, F) / (2.0 * e**2) - r) for e in eps_list]
        for d0, d1 in zip(diffs, diffs[1:]):
            ratio = d1 / d0 if d0 > 0 else 0.0
            worst_ratio = max(worst_ratio, ratio)
            ok &= ratio < 0.35
    return CheckResult(f"viscosity_limit_d{b.dim}", ok,
                       f"worst per-decade ratio {worst_ratio:.3f} (linear decay is 0.1)")


def metric_form_consistency(b: MaterialBundle, rng, samples=40, tol=1e-12) -> CheckResult:
    """H_Id = CD, major symmetry, and H_Y[Fd,Fd] = 2 R(Y,Fd)."""
    d = b.dim
    ok = np.abs(b.metric_form(np.eye(d)) - b.viscous_moduli).max() < tol
    worst = 0.0
    for _ in range(samples):
        Y = np.eye(d) + 0.1 * rng.normal(size=(d, d))
        if np.linalg.det(Y) <= 0 or np.linalg.norm(Y - np.eye(d)) > b.guard_radius:
            continue
        H = b.metric_form(Y)
        worst = max(worst, np.abs(H - np.transpose(H, (2, 3, 0, 1))).max())
        Fd = rng.normal(size=(d, d))
        worst = max(worst, _rel(np.einsum("ij,ijkl,kl", Fd, H, Fd),
                                2.0 * b.viscous_potential(Y, Fd)))
    return CheckResult(f"metric_form_d{d}", ok and worst < 1e-10,
                       f"identity match {ok}, worst drift {worst:.2e}")


def energy_growth(b: MaterialBundle, rng, samples=300) -> CheckResult:
    """W(F) >= c dist^2(F, SO(d)); the fitted c is reported, not certified."""
    c_fit = np.inf
    for _ in range(samples):
        F = random_gl_plus(rng, b.dim, spread=0.25)
        dist = rotation_distance(F)
        if dist > 1e-8:
            c_fit = min(c_fit, b.energy_density(F) / dist**2)
    return CheckResult(f"energy_growth_d{b.dim}", c_fit > 0.0,
                       f"fitted growth constant c = {c_fit:.4g}")


def hyperstress_growth(b: MaterialBundle, rng, samples=200) -> CheckResult:
    """|dP/dG| <= c2 |G|^(p-1) with c2 = p for the reference penalty."""
    worst = 0.0
    for _ in range(samples):
        G = rng.normal(size=(b.dim,) * 3) * rng.uniform(0.1, 3.0)
        n = np.linalg.norm(G.ravel())
        bound = b.p * n ** (b.p - 1.0)
        worst = max(worst, np.linalg.norm(b.hyperstress(G).ravel()) - bound)
    return CheckResult(f"hyperstress_growth_d{b.dim}", worst <= 1e-10,
                       f"worst bound excess {worst:.2e}")


# -- discretization checks ---------------------------------------------------

def operator_exactness(dim: int, rng) -> CheckResult:
    grid = g.Grid(dim, 16)
    coords = g.node_coords(grid)
    A = rng.normal(size=(dim, dim))
    c = rng.normal(size=dim)
    vals = coords @ A.T + c
    F = g.gradient_of(grid, vals)
    G = g.second_gradient_of(grid, vals)
    errF = np.abs(F - A).max()
    errG = np.abs(G).max()
    # linearity of the stencils, exact to rounding
    v1, v2 = rng.normal(size=vals.shape), rng.normal(size=vals.shape)
    lin = np.abs(g.gradient_of(grid, 2.0 * v1 - 3.0 * v2)
                 - 2.0 * g.gradient_of(grid, v1) + 3.0 * g.gradient_of(grid, v2)).max()
    ok = errF < 1e-12 and errG < 1e-9 and lin < 1e-12
    return CheckResult(f"operator_exactness_d{dim}", ok,
                       f"affine grad err {errF:.1e}, grad2 err {errG:.1e}, linearity {lin:.1e}")


def quadrature_and_norms(dim: int) -> CheckResult:
    grid = g.Grid(dim, 64 if dim == 1 else 24)
    one = np.ones(grid.num_cells)
    vol = g.integrate(grid, one)
    ok = abs(vol - 1.0) < 1e-14
    if dim == 1:
        x = g.node_coords(grid)[:, 0]
        f = g.make_field(grid, np.sin(np.pi * x)[:, None], "displacement", 1)
        z = g.zero_displacement(grid)
        l2, h1 = g.diff_norms(f, z)
        ok &= abs(l2 - 1.0 / np.sqrt(2.0)) < 5e-4
        ok &= abs(h1 - np.sqrt(0.5 + np.pi**2 / 2.0)) < 5e-3
        detail = f"volume {vol:.15f}, L2 {l2:.6f} (1/sqrt2), H1 {h1:.6f}"
    else:
        detail = f"volume {vol:.15f}"
    return CheckResult(f"quadrature_d{dim}", ok, detail)


def refinement_order(dim: int = 1) -> CheckResult:
    """Discrete H1 norms of a smooth field converge at order ~2."""
    errs, hs = [], []
    for n in (16, 32, 64, 128):
        grid = g.Grid(dim, n)
        x = g.node_coords(grid)[:, 0]
        f = g.make_field(grid, np.sin(np.pi * x)[:, None], "displacement", 1)
        _, h1 = g.diff_norms(f, g.zero_displacement(grid))
        errs.append(abs(h1 - np.sqrt(0.5 + np.pi**2 / 2.0)))
        hs.append(1.0 / n)
    from .report import fit_rate
    rate = fit_rate(hs, errs)
    return CheckResult("refinement_order", 1.7 < rate < 2.3, f"fitted order {rate:.3f}")


def clamp_preservation(dim: int) -> CheckResult:
    """A full implicit linear step leaves the clamped layer untouched bit for bit."""
    from . import linear
    grid = g.Grid(dim, 16)
    b = reference_bundle(dim)
    cfg = linear.LinearConfig.from_bundle(grid, b, tau=0.1, T=0.1)
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(grid.num_nodes, dim))
    u0 = g.make_field(grid, vals, "displacement", 1)
    u1, _ = linear.implicit_step(cfg, u0)
    mask = g.clamped_nodes(grid, 1)
    ok = np.array_equal(u1.flat[mask], np.zeros((int(mask.sum()), dim)))
    return CheckResult(f"clamp_preservation_d{dim}", ok, "prescribed layers exact")


def det_guard_cases(dim: int) -> CheckResult:
    grid = g.Grid(dim, 8)
    ct = g.gradients(g.identity_field(grid))
    ok = g.det_guard(ct)
    bad = ct.F.copy()
    bad[0] = np.diag([-0.1] + [1.0] * (dim - 1))
    ok &= not g.det_guard(g.CellTensors(grid, bad, None))
    tiny = ct.F.copy()
    tiny[0] = np.diag([1.0] * (dim - 1) + [1e-9])
    ok &= g.det_guard(g.CellTensors(grid, tiny, None))
    return CheckResult(f"det_guard_d{dim}", bool(ok), "strict positivity semantics")


def run_all(seed: int = 0, dims=(1, 2)) -> list[CheckResult]:
    results = []
    for d in dims:
        b = reference_bundle(d)
        rng = np.random.default_rng(seed + d)
        results += [
            frame_indifference(b, rng),
            gradient_consistency(b, rng),
            hessian_reduction(b, rng),
            moduli_symmetric_action(b, rng),
            viscosity_limit(b, rng),
            metric_form_consistency(b, rng),
            energy_growth(b, rng),
            hyperstress_growth(b, rng),
            operator_exactness(d, rng),
            quadrature_and_norms(d),
            clamp_preservation(d),
            det_guard_cases(d),
        ]
    results.append(refinement_order())
    return results


def print_table(results: list[CheckResult]) -> bool:
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.detail}")
        ok &= r.passed
    print(f"{'-' * (width + 6)}")
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return ok
