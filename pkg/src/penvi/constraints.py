"""Constraint operators producing the bound fields G[v] in [g_lo, g_hi].

Three families:

* ``GivenConstraint``: g = g(x, t), independent of the solution.  Samples
  outside the configured bounds are an error (the data are wrong, not the
  solve).
* ``MemoryKernelConstraint``: G[v] = g(x, t, zeta) with
  zeta(x, t) = int_0^t v(x, s) K(t, s) ds, evaluated by trapezoid quadrature
  over the trajectory prefix.  Out-of-bound compositions are clamped and
  counted.
* ``CoupledHeatConstraint``: zeta solves an implicit-Euler linear heat
  equation driven by phi0 + psi v + eta |Lv|, and G = g(zeta), clamped.

The auxiliary fields live on grid nodes; bound fields live on the derivative
evaluation points, reached by the operator's corner/midpoint averaging.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import ConstraintBoundsError, Grid, ParameterError, SizeMismatchError
from .operators import LinearOperatorL, build_operator


def _clamp_count(values: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, int]:
    clipped = np.clip(values, lo, hi)
    return clipped, int(np.sum((values < lo) | (values > hi)))


def validate_bounds(g: np.ndarray, lo: float, hi: float, context: str) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if np.any(g < lo) or np.any(g > hi):
        bad_lo = float(np.min(g))
        bad_hi = float(np.max(g))
        raise ConstraintBoundsError(
            f"{context}: sampled bound range [{bad_lo:.6g}, {bad_hi:.6g}] "
            f"leaves [{lo:.6g}, {hi:.6g}]"
        )
    return g


@dataclass(frozen=True)
class GivenConstraint:
    """Solution-independent bound g(x, t)."""

    gfun: Callable[[np.ndarray, float], np.ndarray]
    g_lo: float
    g_hi: float

    def __post_init__(self):
        if not (0.0 < self.g_lo <= self.g_hi):
            raise ParameterError("need 0 < g_lo <= g_hi")

    kind = "given"

    def eval_at(self, op: LinearOperatorL, t: float) -> np.ndarray:
        g = np.asarray(self.gfun(op.eval_points, t), dtype=float)
        if g.shape != (op.n_points,):
            raise SizeMismatchError("g function returned a wrong-sized array")
        return validate_bounds(g, self.g_lo, self.g_hi, "given constraint")

    def initial_field(self, op: LinearOperatorL, u0: np.ndarray) -> np.ndarray:
        return self.eval_at(op, 0.0)


def eval_given(gfun, op: LinearOperatorL, t: float, g_lo: float, g_hi: float) -> np.ndarray:
    return GivenConstraint(gfun, g_lo, g_hi).eval_at(op, t)


@dataclass(frozen=True)
class MemoryKernelConstraint:
    """G[v](x,t) = clamp(g(x, t, int_0^t v K(t,s) ds))."""

    kernel: Callable[[float, np.ndarray], np.ndarray]
    compose: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    g_lo: float
    g_hi: float

    def __post_init__(self):
        if not (0.0 < self.g_lo <= self.g_hi):
            raise ParameterError("need 0 < g_lo <= g_hi")

    kind = "memory_kernel"

    def zeta_at(self, fields, times: np.ndarray, k: int) -> np.ndarray:
        """Trapezoid quadrature of v(x,s) K(t_k, s) over s in [0, t_k]."""
        if k > 0 and len(fields) < k + 1:
            raise SizeMismatchError("history does not cover [0, t_k]")
        n = fields[0].shape[0]
        if k == 0:
            return np.zeros(n)
        kv = np.asarray(self.kernel(times[k], times[: k + 1]), dtype=float)
        if kv.shape != (k + 1,):
            raise SizeMismatchError("kernel returned a wrong-sized array")
        w = np.full(k + 1, times[1] - times[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        acc = np.zeros(n)
        for j in range(k + 1):
            acc += (w[j] * kv[j]) * fields[j]
        return acc

    def eval_at(self, op: LinearOperatorL, fields, times: np.ndarray,
                k: int) -> tuple[np.ndarray, int]:
        zeta = self.zeta_at(fields, times, k)
        zeta_pts = op.field_to_points(zeta)
        raw = np.asarray(self.compose(op.eval_points, times[k], zeta_pts), dtype=float)
        if raw.shape != (op.n_points,):
            raise SizeMismatchError("composition returned a wrong-sized array")
        return _clamp_count(raw, self.g_lo, self.g_hi)

    def initial_field(self, op: LinearOperatorL, u0: np.ndarray) -> np.ndarray:
        zeta_pts = np.zeros(op.n_points)
        raw = np.asarray(self.compose(op.eval_points, 0.0, zeta_pts), dtype=float)
        return np.clip(raw, self.g_lo, self.g_hi)


def eval_memory_kernel(constraint: MemoryKernelConstraint, op: LinearOperatorL,
                       fields, times: np.ndarray, k: int) -> np.ndarray:
    g, _ = constraint.eval_at(op, fields, times, k)
    return g


@dataclass(frozen=True)
class CoupledState:
    """Auxiliary nodal field (the temperature) at one time node."""

    zeta: np.ndarray


@dataclass(frozen=True)
class CoupledHeatConstraint:
    """Bound driven by a linear heat equation with solution-coupled source."""

    kappa: float
    phi0: Callable[[np.ndarray, float], np.ndarray]
    psi: float
    eta: float
    compose: Callable[[np.ndarray], np.ndarray]
    zeta0: np.ndarray
    g_lo: float
    g_hi: float

    def __post_init__(self):
        if not (0.0 < self.g_lo <= self.g_hi):
            raise ParameterError("need 0 < g_lo <= g_hi")
        if self.kappa <= 0:
            raise ParameterError("diffusivity must be positive")

    kind = "coupled_heat"

    def initial_state(self, grid: Grid) -> CoupledState:
        z = np.asarray(self.zeta0, dtype=float)
        if z.shape != (grid.n_nodes,):
            raise SizeMismatchError("zeta0 does not match the grid")
        return CoupledState(z.copy())

    def eval_state(self, op: LinearOperatorL, state: CoupledState) -> tuple[np.ndarray, int]:
        zeta_pts = op.field_to_points(state.zeta)
        raw = np.asarray(self.compose(zeta_pts), dtype=float)
        if raw.shape != (op.n_points,):
            raise SizeMismatchError("composition returned a wrong-sized array")
        return _clamp_count(raw, self.g_lo, self.g_hi)

    def initial_field(self, op: LinearOperatorL, u0: np.ndarray) -> np.ndarray:
        g, _ = self.eval_state(op, self.initial_state(op.grid))
        return g


class HeatStepper:
    """Implicit-Euler stepper for the auxiliary equation, one factorization
    per (grid, dt) pair."""

    def __init__(self, grid: Grid, kappa: float):
        self.grid = grid
        self.kappa = kappa
        self._grad = build_operator(grid, "gradient")
        self._stiff = (self._grad.matrix.T @ self._grad.matrix).tocsc()
        self._cache: dict[float, spla.SuperLU] = {}

    def _system(self, dt: float) -> spla.SuperLU:
        lu = self._cache.get(dt)
        if lu is None:
            n = self.grid.n_nodes
            mat = sp.identity(n, format="csc") / dt + self.kappa * self._stiff
            mat = mat.tolil()
            bnd = np.flatnonzero(self.grid.boundary_mask())
            for i in bnd:
                mat.rows[i] = [i]
                mat.data[i] = [1.0]
            lu = spla.splu(mat.tocsc())
            self._cache[dt] = lu
        return lu

    def step(self, state: CoupledState, source: np.ndarray, dt: float) -> CoupledState:
        if dt <= 0:
            raise ParameterError("dt must be positive")
        rhs = state.zeta / dt + source
        rhs = rhs.copy()
        bnd = self.grid.boundary_mask()
        rhs[bnd] = 0.0
        z = self._system(dt).solve(rhs)
        if not np.all(np.isfinite(z)):
            raise ParameterError("auxiliary heat solve produced non-finite values")
        z[bnd] = 0.0
        return CoupledState(z)


def step_coupled_heat(constraint: CoupledHeatConstraint, stepper: HeatStepper,
                      op: LinearOperatorL, state: CoupledState,
                      v_k: np.ndarray, lu_k: np.ndarray, t_k: float,
                      dt: float) -> CoupledState:
    """Advance zeta by one implicit-Euler step with the source evaluated
    from the primary solution at t_k (causal)."""
    pts = stepper.grid.coords()
    src = np.asarray(constraint.phi0(pts, t_k), dtype=float)
    if src.shape != (stepper.grid.n_nodes,):
        raise SizeMismatchError("phi0 returned a wrong-sized array")
    src = src + constraint.psi * v_k
    if constraint.eta != 0.0:
        mag = np.sqrt(np.sum(np.atleast_2d(lu_k) ** 2, axis=1))
        src = src + constraint.eta * op.points_to_field(mag)
    return stepper.step(state, src, dt)


def eval_coupled(constraint: CoupledHeatConstraint, op: LinearOperatorL,
                 state: CoupledState) -> np.ndarray:
    g, _ = constraint.eval_state(op, state)
    return g
