"""Pointwise constitutive laws for the reference material.

Shipped closed forms (Frobenius norms throughout):

  stored energy     W(F)  = (1/8) |F^T F - Id|^2
  gradient penalty  P(G)  = |G|^p,  p > d
  dissipation       D^2(F1, F2) = |F1^T F1 - F2^T F2|^2

W and P are frame indifferent, P is convex, and D is separately frame
indifferent and symmetric; D is not differentiable on its zero set but D^2 is
smooth, so every code path works with D^2 and its derivatives.

Derived quantities, all analytic for the reference laws:

  viscous potential  R(F, Fd) = (1/4) d^2/dF1^2 D^2(F,F)[Fd, Fd]
                              = (1/2) |Fd^T F + F^T Fd|^2
  elastic moduli     CW[A, A] = |sym A|^2        (Hessian of W at Id)
  viscous moduli     CD[A, A] = 4 |sym A|^2      (half Hessian of D^2 at Id,Id)
  metric form        H_Y[A, A] = |Y^T A + A^T Y|^2, with H_Id = CD and
                      H_Y[Fd, Fd] = 2 R(Y, Fd)

All kernels broadcast over leading axes, so a batch of per-cell matrices
(m, d, d) evaluates in one call.
"""

from __future__ import annotations

import numpy as np


class OutOfNeighborhood(ValueError):
    """State left the guarded neighborhood of SO(d) where expansions are valid."""


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _frob_sq(A, naxes=2):
    return np.sum(A * A, axis=tuple(range(-naxes, 0)))


def _cauchy_green(F):
    return np.einsum("...ki,...kj->...ij", F, F)


class MaterialBundle:
    """The triple (W, P, D^2) with first derivatives and derived tensors."""

    def __init__(self, dim: int, p: float, guard_radius: float = 0.5):
        if dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3 (got {dim})")
        if not p > dim:
            raise ValueError(f"need p > d (got p={p}, d={dim})")
        self.dim = dim
        self.p = float(p)
        self.guard_radius = float(guard_radius)
        self.identity = np.eye(dim)
        # analytic Hessians at the identity
        d = dim
        ii = np.eye(d)
        sym_proj = 0.5 * (np.einsum("ik,jl->ijkl", ii, ii) + np.einsum("il,jk->ijkl", ii, ii))
        self.elastic_moduli = sym_proj                 # CW[A,A] = |sym A|^2
        self.viscous_moduli = 4.0 * sym_proj           # CD[A,A] = 4 |sym A|^2

    # -- stored energy -----------------------------------------------------

    def energy_density(self, F):
        """W(F) = (1/8)|F^T F - Id|^2, zero exactly on SO(d)."""
        return 0.125 * _frob_sq(_cauchy_green(F) - self.identity)

    def stress(self, F):
        """dW/dF = (1/2) F (F^T F - Id)."""
        return 0.5 * np.einsum("...ik,...kj->...ij", F, _cauchy_green(F) - self.identity)

    # -- second-gradient penalty --------------------------------------------

    def penalty(self, G):
        """P(G) = |G|^p."""
        return _frob_sq(G, naxes=3) ** (self.p / 2.0)

    def hyperstress(self, G):
        """dP/dG = p |G|^(p-2) G (zero at G = 0); |dP/dG| <= p |G|^(p-1)."""
        G = np.asarray(G, dtype=float)
        nsq = _frob_sq(G, naxes=3)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(nsq > 0.0, self.p * nsq ** (self.p / 2.0 - 1.0), 0.0)
        return scale[..., None, None, None] * G

    # -- dissipation distance -----------------------------------------------

    def distance_sq(self, F1, F2):
        """D^2(F1,F2) = |F1^T F1 - F2^T F2|^2; symmetric, zero iff equal C."""
        return _frob_sq(_cauchy_green(F1) - _cauchy_green(F2))

    def distance_sq_grad1(self, F1, F2):
        """d(D^2)/dF1 = 4 F1 (F1^T F1 - F2^T F2)."""
        diff = _cauchy_green(F1) - _cauchy_green(F2)
        return 4.0 * np.einsum("...ik,...kj->...ij", F1, diff)

    # -- viscosity -----------------------------------------------------------

    def viscous_potential(self, F, Fdot):
        """R(F, Fd) = (1/2)|Fd^T F + F^T Fd|^2 >= R(F, 0) = 0."""
        s = np.einsum("...ki,...kj->...ij", F, Fdot)
        return 2.0 * _frob_sq(_sym(s))

    def viscous_stress(self, F, Fdot):
        """dR/dFd = H_F Fd = 2 F F^T Fd + 2 F Fd^T F."""
        FFt = np.einsum("...ik,...jk->...ij", F, F)
        t1 = np.einsum("...ik,...kj->...ij", FFt, Fdot)
        t2 = np.einsum("...ik,...lk,...lj->...ij", F, Fdot, F)
        return 2.0 * (t1 + t2)

    def metric_form(self, Y, guard_radius: float | None = None):
        """H_Y = (1/2) d^2/dF1^2 D^2(Y, Y) as a (d,d,d,d) tensor.

        Major symmetric; H_Id equals the viscous moduli; H_Y[Fd,Fd] equals
        2 R(Y, Fd).  Raises OutOfNeighborhood when |Y - Id|_F exceeds the
        guard radius, and rejects det Y <= 0.
        """
        Y = np.asarray(Y, dtype=float)
        rho = self.guard_radius if guard_radius is None else guard_radius
        if np.linalg.norm(Y - self.identity) > rho:
            raise OutOfNeighborhood(
                f"|Y - Id| = {np.linalg.norm(Y - self.identity):.3g} exceeds guard radius {rho:.3g}"
            )
        if np.linalg.det(Y) <= 0.0:
            raise OutOfNeighborhood("det Y must be positive")
        d = self.dim
        ii = np.eye(d)
        YYt = Y @ Y.T
        H = 2.0 * np.einsum("ik,jl->ijkl", YYt, ii) + 2.0 * np.einsum("il,kj->ijkl", Y, Y)
        return H


def reference_bundle(dim: int, p: float | None = None, guard_radius: float = 0.5) -> MaterialBundle:
    """Reference bundle; default exponent p = 2 for d = 1 and p = 4 otherwise."""
    if p is None:
        p = 2.0 if dim == 1 else 4.0
    return MaterialBundle(dim, p, guard_radius)


def hessian_tensors(b: MaterialBundle) -> tuple[np.ndarray, np.ndarray]:
    """The derived tensors (CW, CD) of a bundle."""
    return b.elastic_moduli, b.viscous_moduli


# ---------------------------------------------------------------------------
# Finite-difference oracles and SO(d) helpers (shared by the check suite)
# ---------------------------------------------------------------------------

def fd_gradient(fn, X, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    X = np.asarray(X, dtype=float)
    g = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += step
        Xm[idx] -= step
        g[idx] = (fn(Xp) - fn(Xm)) / (2.0 * step)
    return g


def fd_hessian(fn, X, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian, returned as (size, size) on X.ravel()."""
    X = np.asarray(X, dtype=float).ravel()
    k = X.size
    H = np.zeros((k, k))
    f0 = fn(X)
    for i in range(k):
        Xp, Xm = X.copy(), X.copy()
        Xp[i] += step
        Xm[i] -= step
        H[i, i] = (fn(Xp) - 2.0 * f0 + fn(Xm)) / step**2
        for j in range(i + 1, k):
            Xpp, Xpm, Xmp, Xmm = (X.copy() for _ in range(4))
            Xpp[i] += step
            Xpp[j] += step
            Xmm[i] -= step
            Xmm[j] -= step
            Xpm[i] += step
            Xpm[j] -= step
            Xmp[i] -= step
            Xmp[j] += step
            H[i, j] = H[j, i] = (fn(Xpp) - fn(Xpm) - fn(Xmp) + fn(Xmm)) / (4.0 * step**2)
    return H


def random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0]])
    if d == 2:
        t = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s], [s, c]])
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_gl_plus(rng: np.random.Generator, d: int, spread: float = 0.3) -> np.ndarray:
    """Random matrix with positive determinant near SO(d)."""
    while True:
        F = np.eye(d) + spread * rng.normal(size=(d, d))
        det = F[0, 0] if d == 1 else np.linalg.det(F)
        if det > 1e-3:
            return F


def nearest_rotation(F: np.ndarray) -> np.ndarray:
    """Polar factor with the det-sign correction (projection onto SO(d))."""
    U, _, Vt = np.linalg.svd(F)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def rotation_distance(F: np.ndarray) -> float:
    """dist(F, SO(d)) in the Frobenius norm."""
    return float(np.linalg.norm(F - nearest_rotation(F)))
