"""Uniform-grid discretization of the unit cube (0,1)^d.

Nodes sit at i*h, i = 0..n, per axis (h = 1/n).  Vector-valued nodal fields
represent deformations y (clamped to the identity on the two outermost node
layers of every face) or displacements u (clamped to zero; one layer for the
H1_0 setting of the linearized problem, two for prepared nonlinear data).

Differential operators are tensor products of 1D stencils and are exact for
affine fields:

  * cell gradient    (grad y)_{ak} = d_k y_a   two-point differences along
    axis k, averaged over the remaining axes; second order at cell centers.
  * cell 2nd gradient (grad2 y)_{ajk} = d_jk y_a   nodal second differences
    (centered inside, one-sided O(h^2) at the boundary rows), averaged to
    cell centers; symmetric in (j, k) by construction.
  * quadrature       midpoint rule, h^d * sum of cell values.

All operators are cached per (dim, n) as scipy.sparse matrices; energies and
their exact gradients are then pointwise kernels plus sparse matvecs with the
transposed stencils.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache, reduce
from types import SimpleNamespace

import numpy as np
import scipy.sparse as sp

FIELD_KINDS = ("deformation", "displacement")


class GridMismatch(ValueError):
    """Two fields living on different grids were combined."""


class DetGuardViolation(RuntimeError):
    """det(grad y) <= 0 on at least one cell."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid on (0,1)^dim with n cells per axis."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3 (got {self.dim})")
        if self.n < 8:
            raise ValueError(f"need n >= 8 cells per axis (got {self.n})")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def node_shape(self) -> tuple:
        return (self.n + 1,) * self.dim

    @property
    def num_nodes(self) -> int:
        return (self.n + 1) ** self.dim

    @property
    def num_cells(self) -> int:
        return self.n ** self.dim


# ---------------------------------------------------------------------------
# 1D stencil matrices
# ---------------------------------------------------------------------------

def _cell_diff(n, h):
    # (f[i+1] - f[i]) / h at cell i
    rows = np.repeat(np.arange(n), 2)
    cols = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1).ravel()
    vals = np.tile([-1.0 / h, 1.0 / h], n)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n + 1))


def _cell_avg(n):
    rows = np.repeat(np.arange(n), 2)
    cols = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1).ravel()
    vals = np.full(2 * n, 0.5)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n + 1))


def _node_diff1(n, h):
    # centered first differences; 3-point one-sided rows at the ends (O(h^2))
    m = sp.lil_matrix((n + 1, n + 1))
    for j in range(1, n):
        m[j, j - 1] = -0.5 / h
        m[j, j + 1] = 0.5 / h
    m[0, [0, 1, 2]] = np.array([-1.5, 2.0, -0.5]) / h
    m[n, [n - 2, n - 1, n]] = np.array([0.5, -2.0, 1.5]) / h
    return m.tocsr()


def _node_diff2(n, h):
    # centered second differences; 4-point one-sided rows at the ends (O(h^2))
    m = sp.lil_matrix((n + 1, n + 1))
    for j in range(1, n):
        m[j, [j - 1, j, j + 1]] = np.array([1.0, -2.0, 1.0]) / h**2
    m[0, [0, 1, 2, 3]] = np.array([2.0, -5.0, 4.0, -1.0]) / h**2
    m[n, [n - 3, n - 2, n - 1, n]] = np.array([-1.0, 4.0, -5.0, 2.0]) / h**2
    return m.tocsr()


def _kron_chain(mats):
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats)


@lru_cache(maxsize=None)
def _ops(dim, n):
    """Cached spatial operators for a (dim, n) grid.

    S[k]     : cells x nodes, d_k at cell centers
    T[j][k]  : cells x nodes, d_jk averaged to cell centers
    AVG      : cells x nodes, corner average
    """
    h = 1.0 / n
    dc, ac = _cell_diff(n, h), _cell_avg(n)
    d1, d2 = _node_diff1(n, h), _node_diff2(n, h)
    eye = sp.identity(n + 1, format="csr")

    S = []
    for k in range(dim):
        S.append(_kron_chain([dc if ax == k else ac for ax in range(dim)]))
    AVG = _kron_chain([ac] * dim)

    T = [[None] * dim for _ in range(dim)]
    for j in range(dim):
        for k in range(j, dim):
            if j == k:
                node_op = _kron_chain([d2 if ax == j else eye for ax in range(dim)])
            else:
                node_op = _kron_chain(
                    [d1 if ax in (j, k) else eye for ax in range(dim)]
                )
            T[j][k] = T[k][j] = (AVG @ node_op).tocsr()

    return SimpleNamespace(S=S, T=T, AVG=AVG, h=h, dim=dim, n=n)


def operators(grid: Grid):
    return _ops(grid.dim, grid.n)


@lru_cache(maxsize=None)
def _node_coords(dim, n):
    axes = [np.linspace(0.0, 1.0, n + 1)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    out = np.stack([m.ravel() for m in mesh], axis=1)
    out.setflags(write=False)
    return out  # (num_nodes, dim)


def node_coords(grid: Grid) -> np.ndarray:
    return _node_coords(grid.dim, grid.n)


@lru_cache(maxsize=None)
def _clamp_masks(dim, n, clamp):
    """(clamped, free) boolean masks over spatial nodes, flattened C-order."""
    idx = np.indices((n + 1,) * dim)
    clamped = np.zeros((n + 1,) * dim, dtype=bool)
    for ax in range(dim):
        clamped |= (idx[ax] < clamp) | (idx[ax] > n - clamp)
    clamped = clamped.ravel()
    for m in (clamped,):
        m.setflags(write=False)
    return clamped


def clamped_nodes(grid: Grid, clamp: int) -> np.ndarray:
    return _clamp_masks(grid.dim, grid.n, clamp)


def free_nodes(grid: Grid, clamp: int) -> np.ndarray:
    return ~clamped_nodes(grid, clamp)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Field:
    """Nodal vector field with prescribed boundary layers.

    values has shape (n+1,)*dim + (dim,).  The outermost `clamp` node layers
    of every face hold the prescribed data exactly: node coordinates for
    deformations, zero for displacements.
    """

    grid: Grid
    values: np.ndarray
    kind: str
    clamp: int

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"kind must be one of {FIELD_KINDS}")
        if self.clamp not in (1, 2):
            raise ValueError("clamp must be 1 or 2")
        want = self.grid.node_shape + (self.grid.dim,)
        v = np.asarray(self.values, dtype=float)
        if v.shape != want:
            raise ValueError(f"values shape {v.shape}, expected {want}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        flat = v.reshape(self.grid.num_nodes, self.grid.dim)
        mask = clamped_nodes(self.grid, self.clamp)
        if not np.array_equal(flat[mask], self._prescribed()[mask]):
            raise ValueError("clamped boundary layers do not hold the prescribed values")

    def _prescribed(self) -> np.ndarray:
        if self.kind == "deformation":
            return node_coords(self.grid)
        return np.zeros((self.grid.num_nodes, self.grid.dim))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(self.grid.num_nodes, self.grid.dim)


def make_field(grid: Grid, values: np.ndarray, kind: str, clamp: int) -> Field:
    """Build a Field, overwriting the clamped layers with the prescribed data."""
    v = np.array(values, dtype=float).reshape(grid.num_nodes, grid.dim)
    mask = clamped_nodes(grid, clamp)
    if kind == "deformation":
        v[mask] = node_coords(grid)[mask]
    else:
        v[mask] = 0.0
    return Field(grid, v.reshape(grid.node_shape + (grid.dim,)), kind, clamp)


def identity_field(grid: Grid, clamp: int = 2) -> Field:
    return make_field(grid, node_coords(grid), "deformation", clamp)


def zero_displacement(grid: Grid, clamp: int = 1) -> Field:
    return make_field(grid, np.zeros((grid.num_nodes, grid.dim)), "displacement", clamp)


def displacement_from(y: Field, delta: float) -> Field:
    """Rescaled displacement (y - id)/delta as a Field on the same grid."""
    u = (y.flat - node_coords(y.grid)) / delta
    return make_field(y.grid, u, "displacement", 1)


def deformation_from(u: Field, delta: float, clamp: int = 2) -> Field:
    """Deformation id + delta*u from a displacement field."""
    yv = node_coords(u.grid) + delta * u.flat
    return make_field(u.grid, yv, "deformation", clamp)


# ---------------------------------------------------------------------------
# Discrete differential operators, quadrature, norms
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CellTensors:
    """Per-cell gradient F (m,d,d) and second gradient G (m,d,d,d)."""

    grid: Grid
    F: np.ndarray
    G: np.ndarray | None


def gradient_of(grid: Grid, flat_values: np.ndarray) -> np.ndarray:
    """Cell gradients (m,d,d) of flat nodal values (num_nodes, d)."""
    ops = operators(grid)
    d, m = grid.dim, grid.num_cells
    F = np.empty((m, d, d))
    for a in range(d):
        for k in range(d):
            F[:, a, k] = ops.S[k] @ flat_values[:, a]
    return F


def second_gradient_of(grid: Grid, flat_values: np.ndarray) -> np.ndarray:
    """Cell second gradients (m,d,d,d) of flat nodal values."""
    ops = operators(grid)
    d, m = grid.dim, grid.num_cells
    G = np.empty((m, d, d, d))
    for a in range(d):
        for j in range(d):
            for k in range(j, d):
                G[:, a, j, k] = ops.T[j][k] @ flat_values[:, a]
                if k != j:
                    G[:, a, k, j] = G[:, a, j, k]
    return G


def gradients(field: Field, second: bool = True) -> CellTensors:
    """Discrete (grad, grad^2) of a field at cell centers."""
    v = field.flat
    F = gradient_of(field.grid, v)
    G = second_gradient_of(field.grid, v) if second else None
    return CellTensors(field.grid, F, G)


def gradient_adjoint(grid: Grid, P: np.ndarray) -> np.ndarray:
    """Adjoint of gradient_of: cells (m,d,d) -> nodes (num_nodes, d)."""
    ops = operators(grid)
    d = grid.dim
    out = np.zeros((grid.num_nodes, d))
    for a in range(d):
        for k in range(d):
            out[:, a] += ops.S[k].T @ P[:, a, k]
    return out


def second_gradient_adjoint(grid: Grid, Q: np.ndarray) -> np.ndarray:
    """Adjoint of second_gradient_of: cells (m,d,d,d) -> nodes (num_nodes, d)."""
    ops = operators(grid)
    d = grid.dim
    out = np.zeros((grid.num_nodes, d))
    for a in range(d):
        for j in range(d):
            for k in range(d):
                out[:, a] += ops.T[j][k].T @ Q[:, a, j, k]
    return out


def integrate(grid: Grid, cellvals: np.ndarray) -> float:
    """Midpoint rule: h^d * sum over cells (fixed reduction order)."""
    cellvals = np.asarray(cellvals)
    if cellvals.size != grid.num_cells:
        raise ValueError("expected one value per cell")
    return grid.h ** grid.dim * float(np.sum(cellvals.ravel()))


def cell_values(grid: Grid, flat_values: np.ndarray) -> np.ndarray:
    """Corner-averaged nodal values at cell centers, (m, d)."""
    ops = operators(grid)
    return np.stack([ops.AVG @ flat_values[:, a] for a in range(grid.dim)], axis=1)


def diff_norms(f: Field, g: Field) -> tuple[float, float]:
    """Discrete L2 and H1 norms of f - g (midpoint quadrature)."""
    if f.grid != g.grid:
        raise GridMismatch("fields live on different grids")
    dv = f.flat - g.flat
    vc = cell_values(f.grid, dv)
    Fd = gradient_of(f.grid, dv)
    l2sq = integrate(f.grid, np.sum(vc**2, axis=1))
    h1sq = l2sq + integrate(f.grid, np.sum(Fd**2, axis=(1, 2)))
    return np.sqrt(l2sq), np.sqrt(h1sq)


def det_cells(F: np.ndarray) -> np.ndarray:
    if F.shape[-1] == 1:
        return F[..., 0, 0]
    return np.linalg.det(F)


def det_min(F: np.ndarray) -> float:
    return float(np.min(det_cells(F)))


def det_guard(ct: CellTensors) -> bool:
    """True iff det(grad y) > 0 on every cell (strict positivity only)."""
    return det_min(ct.F) > 0.0


# ---------------------------------------------------------------------------
# Strain / metric factor matrices (shared by the SPD solves)
# ---------------------------------------------------------------------------

def _component_selector(d, a):
    e = sp.csr_matrix((np.ones(1), (np.zeros(1, dtype=int), np.array([a]))), shape=(1, d))
    return e


def _grad_block(grid: Grid, a: int, k: int):
    """Sparse map: full dof vector -> d_k of component a on cells."""
    ops = operators(grid)
    return sp.kron(ops.S[k], _component_selector(grid.dim, a), format="csr")


def sym_basis(d: int) -> np.ndarray:
    """Orthonormal basis of symmetric d x d matrices, shape (dsym, d, d)."""
    basis = []
    for i in range(d):
        E = np.zeros((d, d))
        E[i, i] = 1.0
        basis.append(E)
    for i in range(d):
        for j in range(i + 1, d):
            E = np.zeros((d, d))
            E[i, j] = E[j, i] = 1.0 / np.sqrt(2.0)
            basis.append(E)
    return np.array(basis)


def tensor_sqrt_sym(C: np.ndarray) -> np.ndarray:
    """Square root of a 4th-order tensor restricted to symmetric matrices.

    C must be positive definite as a quadratic form on symmetric matrices.
    Returns W with W[E_a, E_b] the matrix square root in the orthonormal
    symmetric basis (as a (dsym, dsym) coefficient matrix).
    """
    E = sym_basis(C.shape[0])
    M = np.einsum("aij,ijkl,bkl->ab", E, C, E)
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    if np.min(w) <= 0:
        raise ValueError("tensor is not positive definite on symmetric matrices")
    return (V * np.sqrt(w)) @ V.T


def strain_factor(grid: Grid, C: np.ndarray, clamp: int):
    """Factor B with |B v|^2 = h^d * sum_cells C[e(v), e(v)] over free dofs.

    Rows are sqrt(h^d) * (sqrt(C) e(v))_alpha per cell in the orthonormal
    symmetric basis; columns are the free nodal dofs for the given clamp.
    """
    d = grid.dim
    E = sym_basis(d)
    sqM = tensor_sqrt_sym(C)
    # e(v) components in the symmetric basis: e_beta = sum_{a,k} E[beta,a,k] d_k v_a
    erows = []
    for beta in range(E.shape[0]):
        blk = None
        for a in range(d):
            for k in range(d):
                c = E[beta, a, k]
                if c != 0.0:
                    term = c * _grad_block(grid, a, k)
                    blk = term if blk is None else blk + term
        erows.append(blk)
    rows = [
        sum(sqM[alpha, beta] * erows[beta] for beta in range(len(erows)))
        for alpha in range(len(erows))
    ]
    B = sp.vstack(rows, format="csr") * np.sqrt(grid.h ** grid.dim)
    free = np.repeat(free_nodes(grid, clamp), d)
    return B[:, np.flatnonzero(free)].tocsr()


@lru_cache(maxsize=None)
def _second_gradient_factor(dim, n, clamp):
    grid = Grid(dim, n)
    ops = operators(grid)
    blocks = []
    for a in range(dim):
        for j in range(dim):
            for k in range(dim):
                blocks.append(sp.kron(ops.T[j][k], _component_selector(dim, a), format="csr"))
    B = sp.vstack(blocks, format="csr") * np.sqrt(grid.h ** grid.dim)
    free = np.repeat(free_nodes(grid, clamp), dim)
    return B[:, np.flatnonzero(free)].tocsr()


def second_gradient_factor(grid: Grid, clamp: int):
    """Factor B with |B v|^2 = h^d * sum_cells |grad2 v|^2 over free dofs.

    Rows are grouped in (component, j, k) blocks of one row per cell, so a
    per-cell weight w_c applies as diag(tile(w, d^3)).
    """
    return _second_gradient_factor(grid.dim, grid.n, clamp)


def metric_factor(grid: Grid, Fcells: np.ndarray, clamp: int):
    """Factor B with |B v|^2 = h^d * sum_cells |F^T grad v + (grad v)^T F|^2.

    F varies per cell (the deformation gradient of the base state); columns
    are the free nodal dofs for the given clamp.
    """
    d = grid.dim
    blocks = []
    for i in range(d):
        for j in range(d):
            blk = None
            for a in range(d):
                term = sp.diags(Fcells[:, a, i]) @ _grad_block(grid, a, j) \
                    + sp.diags(Fcells[:, a, j]) @ _grad_block(grid, a, i)
                blk = term if blk is None else blk + term
            blocks.append(blk)
    B = sp.vstack(blocks, format="csr") * np.sqrt(grid.h ** grid.dim)
    free = np.repeat(free_nodes(grid, clamp), d)
    return B[:, np.flatnonzero(free)].tocsr()


# ---------------------------------------------------------------------------
# Field snapshots: one JSON header line + raw little-endian float64 payload
# ---------------------------------------------------------------------------

def save_field(path, field: Field, time: float | None = None, meta: dict | None = None):
    """Write a field snapshot.

    Layout: a single UTF-8 JSON line {dim, n, kind, clamp, time, dtype,
    order, ...} terminated by \\n, followed by the nodal values as raw
    little-endian float64 in C order, shape (n+1,)*dim + (dim,).
    """
    header = {
        "dim": field.grid.dim,
        "n": field.grid.n,
        "kind": field.kind,
        "clamp": field.clamp,
        "time": time,
        "dtype": "<f8",
        "order": "C",
    }
    if meta:
        header.update(meta)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_field(path) -> tuple[Field, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    grid = Grid(header["dim"], header["n"])
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    values = values.reshape(grid.node_shape + (grid.dim,))
    return Field(grid, values, header["kind"], header["clamp"]), header
