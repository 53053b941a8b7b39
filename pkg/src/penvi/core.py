"""Grids, fields, discrete norms and the problem container shared by all solvers.

Conventions used throughout the package:

* uniform tensor-product grids on (0, extent_1) x ... x (0, extent_d),
* homogeneous Dirichlet boundary conditions,
* every space integral is a node sum weighted by h^d (midpoint weights for
  quantities living at derivative-evaluation points),
* time integrals over (0, T] use the right-endpoint rule, i.e. the sum over
  time nodes 1..K weighted by dt.

All containers are immutable value objects; sharing them across threads is
safe.  Reductions use numpy's fixed left-to-right summation order, so norms
are deterministic regardless of how many workers drive the solves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class SizeMismatchError(ValueError):
    """A field does not match the grid or operator layout it is used with."""


class ParameterError(ValueError):
    """A scalar parameter lies outside its documented range."""


class ConstraintBoundsError(ValueError):
    """A constraint sample violates the configured [g_lo, g_hi] bounds."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid, 1D or 2D, with nodes on the closed domain.

    ``extents[a]`` is the length of axis ``a`` and ``npts[a]`` the number of
    nodes on it (endpoints included), so the spacing is extent/(n-1).
    """

    extents: tuple[float, ...]
    npts: tuple[int, ...]

    def __post_init__(self):
        if len(self.extents) not in (1, 2) or len(self.extents) != len(self.npts):
            raise ParameterError("grid must be 1D or 2D with matching extents/npts")
        for L in self.extents:
            if not (L > 0 and np.isfinite(L)):
                raise ParameterError("grid extent must be positive and finite")
        for n in self.npts:
            if int(n) != n or n < 3:
                raise ParameterError("grid needs at least 3 nodes per axis")
        object.__setattr__(self, "npts", tuple(int(n) for n in self.npts))
        object.__setattr__(self, "extents", tuple(float(L) for L in self.extents))

    @property
    def dim(self) -> int:
        return len(self.npts)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / (n - 1) for L, n in zip(self.extents, self.npts))

    @property
    def n_nodes(self) -> int:
        out = 1
        for n in self.npts:
            out *= n
        return out

    @property
    def node_weight(self) -> float:
        """Quadrature weight h^d attached to every node."""
        w = 1.0
        for h in self.spacing:
            w *= h
        return w

    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, dim), C-ordered (last axis fastest)."""
        axes = [np.linspace(0.0, L, n) for L, n in zip(self.extents, self.npts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def boundary_mask(self) -> np.ndarray:
        """Boolean mask of boundary nodes; its complement are interior nodes."""
        if self.dim == 1:
            (n,) = self.npts
            mask = np.zeros(n, dtype=bool)
            mask[0] = mask[-1] = True
            return mask
        nx, ny = self.npts
        mask = np.zeros((nx, ny), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask.ravel()

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of (0, T] into ``steps`` intervals; node k is k*dt."""

    final_time: float
    steps: int

    def __post_init__(self):
        if not (self.final_time > 0 and np.isfinite(self.final_time)):
            raise ParameterError("final_time must be positive and finite")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError("steps must be an integer >= 1")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "final_time", float(self.final_time))

    @property
    def dt(self) -> float:
        return self.final_time / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.final_time, self.steps + 1)


def as_field(values, grid: Grid) -> np.ndarray:
    """Validate nodal values against a grid: size, finiteness."""
    v = np.asarray(values, dtype=float)
    if v.shape != (grid.n_nodes,):
        raise SizeMismatchError(
            f"field has shape {v.shape}, grid expects ({grid.n_nodes},)"
        )
    if not np.all(np.isfinite(v)):
        raise ParameterError("field contains non-finite entries")
    return v


def is_dirichlet(values: np.ndarray, grid: Grid, tol: float = 0.0) -> bool:
    b = values[grid.boundary_mask()]
    return bool(np.all(np.abs(b) <= tol))


@dataclass(frozen=True)
class SolveDiagnostics:
    """Per-time-step bookkeeping of the implicit solver.

    ``penalty_mass`` is the slice integral of the penalty function and
    ``violation`` the slice integral of (|Lu| - G)^+; both are the
    quantities whose space-time sums the continuation reports monitor.
    """

    newton_iters: int
    residual_norm: float
    penalty_mass: float
    violation: float
    halvings: int

    def __post_init__(self):
        if self.residual_norm < 0 or self.penalty_mass < 0 or self.violation < 0:
            raise ParameterError("diagnostic norms must be nonnegative")


@dataclass(frozen=True)
class Trajectory:
    """One nodal field per time node plus per-step diagnostics."""

    grid: Grid
    timegrid: TimeGrid
    fields: tuple[np.ndarray, ...]
    diagnostics: tuple[SolveDiagnostics, ...] = ()

    def __post_init__(self):
        if len(self.fields) != self.timegrid.steps + 1:
            raise SizeMismatchError(
                f"trajectory has {len(self.fields)} fields, "
                f"expected {self.timegrid.steps + 1}"
            )
        for f in self.fields:
            as_field(f, self.grid)
        if self.diagnostics and len(self.diagnostics) != self.timegrid.steps:
            raise SizeMismatchError("need one diagnostics record per step")

    def array(self) -> np.ndarray:
        """Stacked (steps+1, n_nodes) view of the fields."""
        return np.stack(self.fields, axis=0)

    @property
    def initial(self) -> np.ndarray:
        return self.fields[0]

    @property
    def final(self) -> np.ndarray:
        return self.fields[-1]


def constant_trajectory(grid: Grid, timegrid: TimeGrid, values: np.ndarray) -> Trajectory:
    v = as_field(values, grid)
    return Trajectory(grid, timegrid, tuple(v.copy() for _ in range(timegrid.steps + 1)))


# ---------------------------------------------------------------------------
# discrete norms


def norm_l2(values: np.ndarray, grid: Grid) -> float:
    """Quadrature-weighted Euclidean norm, (h^d sum v_i^2)^(1/2)."""
    v = np.asarray(values, dtype=float)
    if v.shape != (grid.n_nodes,):
        raise SizeMismatchError("norm_l2: field does not match grid")
    return float(np.sqrt(grid.node_weight * np.dot(v, v)))


def edge_magnitude(values: np.ndarray) -> np.ndarray:
    """Pointwise Euclidean magnitude of a (n_points, d) derivative field."""
    q = np.asarray(values, dtype=float)
    if q.ndim != 2:
        raise SizeMismatchError("derivative fields have shape (n_points, d)")
    return np.sqrt(np.sum(q * q, axis=1))


def norm_lp_spacetime(edge_fields: Sequence[np.ndarray], grid: Grid,
                      timegrid: TimeGrid, p: float) -> float:
    """(dt h^d sum_{k>=1,j} |xi_kj|^p)^(1/p) over a trajectory of derivative fields.

    ``edge_fields`` must hold one entry per time node (steps+1); the t=0
    slice carries no weight under the right-endpoint time rule.
    """
    if not p > 1 or not np.isfinite(p):
        raise ParameterError("norm_lp_spacetime requires p in (1, inf)")
    if len(edge_fields) != timegrid.steps + 1:
        raise SizeMismatchError("need one derivative field per time node")
    total = 0.0
    for q in edge_fields[1:]:
        m = edge_magnitude(q)
        total += float(np.sum(m ** p))
    return (timegrid.dt * grid.node_weight * total) ** (1.0 / p)


def norm_l2_spacetime(fields: Sequence[np.ndarray], grid: Grid, timegrid: TimeGrid) -> float:
    """Discrete L^2(Q_T) norm of a nodal trajectory (right-endpoint in time)."""
    if len(fields) != timegrid.steps + 1:
        raise SizeMismatchError("need one field per time node")
    total = 0.0
    for v in fields[1:]:
        total += float(np.dot(v, v))
    return float(np.sqrt(timegrid.dt * grid.node_weight * total))


def violation_positive_part(lu: np.ndarray, g: np.ndarray) -> float:
    """Slice integral h^d sum_j max(|xi_j| - g_j, 0); zero iff |Lu| <= g."""
    m = edge_magnitude(lu)
    g = np.asarray(g, dtype=float)
    if g.shape != m.shape:
        raise SizeMismatchError("constraint field does not match derivative layout")
    return float(np.sum(np.maximum(m - g, 0.0)))


def violation_positive_part_weighted(lu: np.ndarray, g: np.ndarray, grid: Grid) -> float:
    return grid.node_weight * violation_positive_part(lu, g)


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class ProblemSpec:
    """Everything one evolution solve needs.

    ``operator`` applies L and its discrete adjoint, ``law`` holds the
    constitutive data (p, alpha, mu, b), ``constraint`` produces the bound
    fields.  ``source`` is f(points, t) -> nodal array.  The initial datum
    must satisfy the Dirichlet condition exactly and the t=0 constraint up
    to ``feasibility_tol``.
    """

    grid: Grid
    timegrid: TimeGrid
    operator: "object"
    law: "object"
    constraint: "object"
    source: Callable[[np.ndarray, float], np.ndarray]
    u0: np.ndarray
    feasibility_tol: float = 1e-10

    def __post_init__(self):
        u0 = as_field(self.u0, self.grid)
        object.__setattr__(self, "u0", u0)
        if not is_dirichlet(u0, self.grid):
            raise ParameterError("u0 must vanish on the Dirichlet boundary")
        lu0 = self.operator.apply(u0)
        g0 = self.constraint.initial_field(self.operator, u0)
        excess = float(np.max(edge_magnitude(lu0) - np.asarray(g0)))
        if excess > self.feasibility_tol:
            raise ParameterError(
                f"u0 violates the initial constraint by {excess:.3e} "
                f"(tolerance {self.feasibility_tol:.1e}); refusing to project"
            )

    def source_at(self, t: float) -> np.ndarray:
        f = np.asarray(self.source(self.grid.coords(), t), dtype=float)
        if f.shape != (self.grid.n_nodes,):
            raise SizeMismatchError("source function returned a wrong-sized array")
        return f
