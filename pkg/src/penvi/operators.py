"""Discrete derivative operators L, their adjoints, and the constitutive laws.

The operators are assembled once as sparse matrices so that the adjoint is
literally the transpose: with the uniform h^d weight on both the node and
evaluation-point layouts, <Lu, q> = <u, L*q> holds to rounding for every
Dirichlet field u.  Three kinds are provided:

* ``gradient`` in 1D: forward differences at the n-1 cell midpoints,
* ``gradient`` in 2D: midpoint differences at the (nx-1)(ny-1) cell centers,
* ``laplacian`` in 1D: the 3-point stencil at the n-2 interior nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .core import Grid, ParameterError, SizeMismatchError


def _gradient_matrix_1d(grid: Grid) -> tuple[sp.csr_matrix, np.ndarray]:
    (n,) = grid.npts
    (h,) = grid.spacing
    rows = np.repeat(np.arange(n - 1), 2)
    cols = np.empty(2 * (n - 1), dtype=int)
    cols[0::2] = np.arange(n - 1)
    cols[1::2] = np.arange(1, n)
    vals = np.tile([-1.0 / h, 1.0 / h], n - 1)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n - 1, n))
    pts = (np.arange(n - 1) + 0.5) * h
    return mat, pts.reshape(-1, 1)


def _laplacian_matrix_1d(grid: Grid) -> tuple[sp.csr_matrix, np.ndarray]:
    (n,) = grid.npts
    (h,) = grid.spacing
    rows = np.repeat(np.arange(n - 2), 3)
    cols = np.empty(3 * (n - 2), dtype=int)
    cols[0::3] = np.arange(n - 2)
    cols[1::3] = np.arange(1, n - 1)
    cols[2::3] = np.arange(2, n)
    vals = np.tile([1.0 / h**2, -2.0 / h**2, 1.0 / h**2], n - 2)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n - 2, n))
    pts = np.arange(1, n - 1) * h
    return mat, pts.reshape(-1, 1)


def _gradient_matrices_2d(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    nx, ny = grid.npts
    hx, hy = grid.spacing
    ncell = (nx - 1) * (ny - 1)

    def node(ix, iy):
        return ix * ny + iy

    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ix = ix.ravel()
    iy = iy.ravel()
    corners = np.stack(
        [node(ix, iy), node(ix, iy + 1), node(ix + 1, iy), node(ix + 1, iy + 1)],
        axis=1,
    )
    rows = np.repeat(np.arange(ncell), 4)
    # d/dx averages the two y-levels, d/dy the two x-levels
    vx = np.tile(np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * hx), ncell)
    vy = np.tile(np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * hy), ncell)
    ax = sp.csr_matrix((vx, (rows, corners.ravel())), shape=(ncell, grid.n_nodes))
    ay = sp.csr_matrix((vy, (rows, corners.ravel())), shape=(ncell, grid.n_nodes))
    pts = np.stack([(ix + 0.5) * hx, (iy + 0.5) * hy], axis=1)
    return ax, ay, pts


@dataclass(frozen=True)
class LinearOperatorL:
    """A discrete L with its evaluation-point layout and exact adjoint.

    ``matrix`` maps a nodal vector to the component-major stacked values
    (all first components, then all second components).  ``apply`` reshapes
    that to (n_points, d).
    """

    kind: str
    grid: Grid
    matrix: sp.csr_matrix
    eval_points: np.ndarray
    n_components: int

    @property
    def n_points(self) -> int:
        return self.eval_points.shape[0]

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.grid.n_nodes,):
            raise SizeMismatchError("apply: field does not match the operator grid")
        flat = self.matrix @ u
        return flat.reshape(self.n_components, self.n_points).T

    def apply_adjoint(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_points, self.n_components):
            raise SizeMismatchError("apply_adjoint: layout mismatch")
        out = self.matrix.T @ q.T.ravel()
        out[self.grid.boundary_mask()] = 0.0
        return out

    def field_to_points(self, v: np.ndarray) -> np.ndarray:
        """Average a nodal field onto the evaluation points (identity for
        the Laplacian layout, corner means for cells)."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise SizeMismatchError("field_to_points: field does not match grid")
        if self.kind == "laplacian":
            return v[1:-1].copy()
        if self.grid.dim == 1:
            return 0.5 * (v[:-1] + v[1:])
        nx, ny = self.grid.npts
        a = v.reshape(nx, ny)
        return 0.25 * (a[:-1, :-1] + a[:-1, 1:] + a[1:, :-1] + a[1:, 1:]).ravel()

    def points_to_field(self, s: np.ndarray) -> np.ndarray:
        """Average evaluation-point values back to nodes; boundary gets zero."""
        s = np.asarray(s, dtype=float)
        if s.shape != (self.n_points,):
            raise SizeMismatchError("points_to_field: layout mismatch")
        out = np.zeros(self.grid.n_nodes)
        if self.kind == "laplacian":
            out[1:-1] = s
            return out
        if self.grid.dim == 1:
            out[1:-1] = 0.5 * (s[:-1] + s[1:])
            return out
        nx, ny = self.grid.npts
        c = s.reshape(nx - 1, ny - 1)
        acc = np.zeros((nx, ny))
        cnt = np.zeros((nx, ny))
        for dx in (0, 1):
            for dy in (0, 1):
                acc[dx : nx - 1 + dx, dy : ny - 1 + dy] += c
                cnt[dx : nx - 1 + dx, dy : ny - 1 + dy] += 1.0
        out = (acc / cnt).ravel()
        out[self.grid.boundary_mask()] = 0.0
        return out


def build_operator(grid: Grid, kind: str) -> LinearOperatorL:
    if kind == "gradient":
        if grid.dim == 1:
            mat, pts = _gradient_matrix_1d(grid)
            return LinearOperatorL("gradient", grid, mat, pts, 1)
        ax, ay, pts = _gradient_matrices_2d(grid)
        return LinearOperatorL("gradient", grid, sp.vstack([ax, ay]).tocsr(), pts, 2)
    if kind == "laplacian":
        if grid.dim != 1:
            raise ParameterError("the laplacian operator is only wired up in 1D")
        mat, pts = _laplacian_matrix_1d(grid)
        return LinearOperatorL("laplacian", grid, mat, pts, 1)
    raise ParameterError(f"unknown operator kind {kind!r}")


# ---------------------------------------------------------------------------
# constitutive laws


AlphaLike = Union[float, Callable[[np.ndarray, float], np.ndarray]]


@dataclass(frozen=True)
class MaterialLaw:
    """Power-type vector field a(xi) = alpha (|xi|^2 + mu^2)^((p-2)/2) xi.

    ``alpha`` is a nonnegative constant or a function of (points, t);
    ``mu`` regularizes the p < 2 degeneracy at xi = 0 (``None`` lets the
    solver pick 1e-8 times the constraint ceiling when p < 2, else 0).
    The lower-order term b is either identically zero or lam * eta.
    """

    p: float
    alpha: AlphaLike = 1.0
    mu: float | None = None
    b_kind: str = "zero"
    lam: float = 0.0

    def __post_init__(self):
        if not (1.0 < self.p < np.inf):
            raise ParameterError("exponent p must lie in (1, inf)")
        if self.mu is not None and self.mu < 0:
            raise ParameterError("mu must be nonnegative")
        if self.b_kind not in ("zero", "linear"):
            raise ParameterError("b_kind must be 'zero' or 'linear'")
        if self.lam < 0:
            raise ParameterError("lam must be nonnegative")
        if not callable(self.alpha) and self.alpha < 0:
            raise ParameterError("alpha must be nonnegative")

    def alpha_at(self, points: np.ndarray, t: float) -> np.ndarray:
        if callable(self.alpha):
            a = np.asarray(self.alpha(points, t), dtype=float)
            if a.shape != (points.shape[0],):
                raise SizeMismatchError("alpha function returned a wrong-sized array")
            if np.any(a < 0):
                raise ParameterError("alpha must be nonnegative everywhere sampled")
            return a
        return np.full(points.shape[0], float(self.alpha))

    def resolve_mu(self, g_hi: float) -> float:
        if self.mu is not None:
            return float(self.mu)
        return 1e-8 * float(g_hi) if self.p < 2 else 0.0

    def b_value(self, eta):
        if self.b_kind == "zero":
            return np.zeros_like(np.asarray(eta, dtype=float))
        return self.lam * np.asarray(eta, dtype=float)

    def b_prime(self) -> float:
        return 0.0 if self.b_kind == "zero" else self.lam


def power_stress(xi: np.ndarray, p: float, mu: float) -> np.ndarray:
    """(|xi|^2 + mu^2)^((p-2)/2) xi for a (n_points, d) array; the mu = 0,
    p < 2 singularity at xi = 0 is removable and returns 0."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    w = np.sum(xi * xi, axis=1) + mu * mu
    if p >= 2 or mu > 0:
        fac = w ** ((p - 2.0) / 2.0)
    else:
        fac = np.where(w > 0, w, 1.0) ** ((p - 2.0) / 2.0)
        fac = np.where(w > 0, fac, 0.0)
    return fac[:, None] * xi


def power_stress_jacobian(xi: np.ndarray, p: float, mu: float) -> np.ndarray:
    """d/dxi of ``power_stress``: w^((p-2)/2) (I + (p-2) xi xi^T / w),
    returned as (n_points, d, d) blocks."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    npts, d = xi.shape
    eye = np.eye(d)[None, :, :]
    if p == 2:
        return np.broadcast_to(eye, (npts, d, d)).copy()
    w = np.sum(xi * xi, axis=1) + mu * mu
    safe_w = np.where(w > 0, w, 1.0)
    fac = np.where(w > 0, safe_w ** ((p - 2.0) / 2.0), 0.0)
    outer = xi[:, :, None] * xi[:, None, :]
    return fac[:, None, None] * (eye + (p - 2.0) * outer / safe_w[:, None, None])


def eval_a(law: MaterialLaw, x, t: float, xi) -> np.ndarray:
    """Pointwise a(x, t, xi) for a single d-vector xi."""
    pt = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = law.alpha_at(pt, t)[0]
    mu = law.mu if law.mu is not None else 0.0
    return alpha * power_stress(np.asarray(xi, dtype=float)[None, :], law.p, mu)[0]


def eval_potential_A(law: MaterialLaw, x, t: float, xi) -> float:
    """Pointwise potential A with grad_xi A = a:
    (alpha/p) ((|xi|^2 + mu^2)^(p/2) - mu^p)."""
    pt = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = law.alpha_at(pt, t)[0]
    mu = law.mu if law.mu is not None else 0.0
    xi = np.asarray(xi, dtype=float)
    w = float(np.dot(xi, xi)) + mu * mu
    return float(alpha / law.p * (w ** (law.p / 2.0) - mu**law.p))


def potential_at_points(xi: np.ndarray, alpha: np.ndarray, p: float, mu: float) -> np.ndarray:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    w = np.sum(xi * xi, axis=1) + mu * mu
    return alpha / p * (w ** (p / 2.0) - mu**p)


def eval_b(law: MaterialLaw, eta: float) -> float:
    return float(law.b_value(eta))
