"""Implicit-Euler discretization of the penalized evolution with a damped
Newton inner solver and (eps, delta) continuation.

One step solves, nodewise on interior nodes,

    (w - w_prev)/dt + L*[ (alpha + delta + k_eps(gap(Lw))) S_mu(Lw) ]
        + b(w) - f(t) = 0,

with S_mu the mu-regularized p-power stress and identity rows on the
Dirichlet boundary.  Newton failures halve the time step (re-splitting the
interval) up to a configured depth.  Continuation sweeps delta inside each
eps stage, warm-starting every stage from the previous trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import (ParameterError, ProblemSpec, SizeMismatchError,
                   SolveDiagnostics, Trajectory, edge_magnitude, norm_l2,
                   violation_positive_part_weighted)
from .penalty import (PenaltyParams, gap_gradient_factor, gap_values, k_eps,
                      k_eps_delta, k_eps_prime)
from .operators import power_stress, power_stress_jacobian


class NonConvergenceError(RuntimeError):
    """Newton ran out of iterations (and time-step halvings)."""

    def __init__(self, message, iterations=0, residual=np.inf, halvings=0):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.halvings = halvings


@dataclass(frozen=True)
class NewtonOptions:
    max_iters: int = 50
    rtol: float = 1e-10
    atol: float = 1e-12
    backtrack: float = 0.5
    min_step: float = 2.0**-20
    max_halvings: int = 8

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ParameterError("Newton tolerances must be positive")
        if not (0.0 < self.backtrack < 1.0):
            raise ParameterError("backtracking factor must lie in (0, 1)")
        if self.max_iters < 1 or self.max_halvings < 0:
            raise ParameterError("invalid Newton iteration limits")


@dataclass(frozen=True)
class ContinuationSchedule:
    """Descending eps and delta lists; the delta sweep nests inside each eps
    stage, so the final stage pairs the smallest values of both."""

    eps_list: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    delta_list: tuple[float, ...] = (1e-2, 1e-4, 1e-6)

    def __post_init__(self):
        if not self.eps_list or not self.delta_list:
            raise ParameterError("schedule lists must be nonempty")
        if any(b >= a for a, b in zip(self.eps_list, self.eps_list[1:])):
            raise ParameterError("eps_list must be strictly decreasing")
        if any(b >= a for a, b in zip(self.delta_list, self.delta_list[1:])):
            raise ParameterError("delta_list must be strictly decreasing")
        for e in self.eps_list:
            if not (0.0 < e < 1.0):
                raise ParameterError("eps values must lie in (0, 1)")
        for d in self.delta_list:
            if not (0.0 <= d < 1.0):
                raise ParameterError("delta values must lie in [0, 1)")

    def stages(self):
        return [(e, d) for e in self.eps_list for d in self.delta_list]


@dataclass(frozen=True)
class StageSummary:
    eps: float
    delta: float
    violation_spacetime: float
    penalty_mass_spacetime: float
    lu_lp_norm: float
    final_l2: float
    newton_iters: int
    halvings: int


def _edge_coefficients(spec: ProblemSpec, params: PenaltyParams, t: float):
    op = spec.operator
    alpha = spec.law.alpha_at(op.eval_points, t)
    mu = spec.law.resolve_mu(spec.constraint.g_hi)
    return alpha, mu


def residual(w: np.ndarray, w_prev: np.ndarray, g: np.ndarray, spec: ProblemSpec,
             params: PenaltyParams, t: float, dt: float) -> np.ndarray:
    """Nodal residual of the implicit step; boundary rows are w itself."""
    grid, op, law = spec.grid, spec.operator, spec.law
    if w.shape != (grid.n_nodes,) or w_prev.shape != (grid.n_nodes,):
        raise SizeMismatchError("residual: field/grid mismatch")
    g = np.asarray(g, dtype=float)
    if g.shape != (op.n_points,):
        raise SizeMismatchError("residual: constraint layout mismatch")
    alpha, mu = _edge_coefficients(spec, params, t)
    xi = op.apply(w)
    mag = edge_magnitude(xi)
    fac = alpha + k_eps_delta(gap_values(mag, g, params.variant, law.p),
                              params.eps, params.delta, params.cap)
    stress = fac[:, None] * power_stress(xi, law.p, mu)
    out = (w - w_prev) / dt + op.apply_adjoint(stress) + law.b_value(w) \
        - spec.source_at(t)
    bnd = grid.boundary_mask()
    out[bnd] = w[bnd]
    return out


def _jacobian(w, g, spec, params, t, dt) -> sp.csc_matrix:
    grid, op, law = spec.grid, spec.operator, spec.law
    alpha, mu = _edge_coefficients(spec, params, t)
    xi = op.apply(w)
    mag = edge_magnitude(xi)
    gaps = gap_values(mag, g, params.variant, law.p)
    fac = alpha + k_eps_delta(gaps, params.eps, params.delta, params.cap)
    blocks = fac[:, None, None] * power_stress_jacobian(xi, law.p, mu)
    kp = k_eps_prime(gaps, params.eps, params.cap)
    active = kp > 0
    if np.any(active):
        s_mu = power_stress(xi, law.p, mu)
        gfac = gap_gradient_factor(mag, params.variant, law.p)
        coef = kp * gfac
        blocks += coef[:, None, None] * (s_mu[:, :, None] * xi[:, None, :])
    d = op.n_components
    if d == 1:
        bmat = sp.diags(blocks[:, 0, 0])
    else:
        bmat = sp.bmat([[sp.diags(blocks[:, a, b]) for b in range(d)]
                        for a in range(d)])
    n = grid.n_nodes
    jac = sp.identity(n, format="csr") * (1.0 / dt + law.b_prime()) \
        + op.matrix.T @ (bmat @ op.matrix)
    jac = jac.tolil()
    for i in np.flatnonzero(grid.boundary_mask()):
        jac.rows[i] = [i]
        jac.data[i] = [1.0]
    return jac.tocsc()


def newton_step_solve(w_prev: np.ndarray, g: np.ndarray, spec: ProblemSpec,
                      params: PenaltyParams, t: float, dt: float,
                      opts: NewtonOptions,
                      w_init: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Solve one implicit step by damped Newton, warm-started at w_init
    (defaults to w_prev).  Raises NonConvergenceError past max_iters."""
    grid = spec.grid
    w = (w_prev if w_init is None else w_init).copy()
    w[grid.boundary_mask()] = 0.0
    r = residual(w, w_prev, g, spec, params, t, dt)
    rn = norm_l2(r, grid)
    # absolute tolerance is taken relative to the residual's natural scale,
    # else warm starts push the target below assembly rounding noise
    data_scale = norm_l2(spec.source_at(t), grid) + norm_l2(w_prev, grid) / dt
    target = max(opts.atol * (1.0 + data_scale), opts.rtol * rn)
    iters = 0
    undamped_residuals = [rn]
    while rn > target:
        if iters >= opts.max_iters:
            raise NonConvergenceError(
                f"Newton stalled at residual {rn:.3e} after {iters} iterations",
                iterations=iters, residual=rn)
        jac = _jacobian(w, g, spec, params, t, dt)
        try:
            step = spla.spsolve(jac, -r)
        except Exception as exc:  # singular factorization
            raise NonConvergenceError(f"linear solve failed: {exc}",
                                      iterations=iters, residual=rn)
        if not np.all(np.isfinite(step)):
            raise NonConvergenceError("linear solve produced non-finite step",
                                      iterations=iters, residual=rn)
        s = 1.0
        while True:
            w_try = w + s * step
            r_try = residual(w_try, w_prev, g, spec, params, t, dt)
            rn_try = norm_l2(r_try, grid)
            if np.isfinite(rn_try) and rn_try < rn:
                break
            s *= opts.backtrack
            if s < opts.min_step:
                raise NonConvergenceError(
                    f"damping exhausted at residual {rn:.3e}",
                    iterations=iters, residual=rn)
        w, r, rn = w_try, r_try, rn_try
        if s == 1.0:
            undamped_residuals.append(rn)
        iters += 1
    return w, {"iterations": iters, "residual": rn,
               "undamped_residuals": undamped_residuals}


def _advance(w_prev, t0, t1, g, spec, params, opts, depth, w_init):
    """One interval, with recursive halving on Newton failure."""
    try:
        w, info = newton_step_solve(w_prev, g, spec, params, t1, t1 - t0, opts,
                                    w_init=w_init)
        return w, info["iterations"], info["residual"], 0
    except NonConvergenceError as exc:
        if depth >= opts.max_halvings:
            raise NonConvergenceError(
                f"step [{t0:.6g}, {t1:.6g}] failed after {depth} halvings: {exc}",
                iterations=exc.iterations, residual=exc.residual,
                halvings=depth)
        tm = 0.5 * (t0 + t1)
        wa, ia, _, ha = _advance(w_prev, t0, tm, g, spec, params, opts,
                                 depth + 1, None)
        wb, ib, rb, hb = _advance(wa, tm, t1, g, spec, params, opts,
                                  depth + 1, w_init)
        return wb, ia + ib, rb, 1 + ha + hb


def _step_diagnostics(spec, params, w, g, iters, rn, halvings, t):
    op = spec.operator
    _, mu = _edge_coefficients(spec, params, t)
    xi = op.apply(w)
    mag = edge_magnitude(xi)
    gaps = gap_values(mag, g, params.variant, spec.law.p)
    mass = spec.grid.node_weight * float(np.sum(k_eps(gaps, params.eps, params.cap)))
    viol = violation_positive_part_weighted(xi, g, spec.grid)
    return SolveDiagnostics(newton_iters=iters, residual_norm=rn,
                            penalty_mass=mass, violation=viol,
                            halvings=halvings)


def _energy_check(spec, params, fields, times):
    """Discrete energy inequality: for every k,
    |w_k|^2 + 2 delta sum dt |Lw|_p^p <= |u0|^2 + sum dt (|w|^2 + |f|^2).
    Guaranteed by monotonicity; a violation means an assembly bug."""
    grid, op, law = spec.grid, spec.operator, spec.law
    w0 = grid.node_weight
    dt = times[1] - times[0]
    lhs_grad = 0.0
    rhs_acc = w0 * float(np.dot(fields[0], fields[0]))
    for k in range(1, len(fields)):
        wk = fields[k]
        xi = op.apply(wk)
        mag2 = np.sum(xi * xi, axis=1)
        lhs_grad += dt * w0 * float(np.sum(mag2 ** (law.p / 2.0)))
        fk = spec.source_at(times[k])
        rhs_acc += dt * w0 * (float(np.dot(wk, wk)) + float(np.dot(fk, fk)))
        lhs = w0 * float(np.dot(wk, wk)) + 2.0 * params.delta * lhs_grad
        if lhs > rhs_acc * (1.0 + 1e-8) + 1e-12:
            raise AssertionError(
                f"discrete energy inequality violated at step {k}: "
                f"{lhs:.6e} > {rhs_acc:.6e}")


def solve_penalized_evolution(spec: ProblemSpec, g_fields, params: PenaltyParams,
                              opts: NewtonOptions,
                              warm: Trajectory | None = None) -> Trajectory:
    """March the penalized system over the whole time grid for frozen
    constraint fields (one per time node)."""
    tg = spec.timegrid
    if len(g_fields) != tg.steps + 1:
        raise SizeMismatchError("need one constraint field per time node")
    times = tg.times()
    fields = [spec.u0.copy()]
    diags = []
    w = spec.u0.copy()
    for k in range(1, tg.steps + 1):
        w_init = warm.fields[k] if warm is not None else None
        w, iters, rn, halv = _advance(w, times[k - 1], times[k],
                                      np.asarray(g_fields[k], dtype=float),
                                      spec, params, opts, 0, w_init)
        fields.append(w.copy())
        diags.append(_step_diagnostics(spec, params, w, g_fields[k], iters, rn,
                                       halv, times[k]))
    _energy_check(spec, params, fields, times)
    return Trajectory(spec.grid, tg, tuple(fields), tuple(diags))


def stage_summary(spec: ProblemSpec, traj: Trajectory, params: PenaltyParams) -> StageSummary:
    dt = spec.timegrid.dt
    viol = dt * float(np.sum([d.violation for d in traj.diagnostics]))
    mass = dt * float(np.sum([d.penalty_mass for d in traj.diagnostics]))
    lus = [spec.operator.apply(f) for f in traj.fields]
    from .core import norm_lp_spacetime
    lp = norm_lp_spacetime(lus, spec.grid, spec.timegrid, spec.law.p)
    return StageSummary(
        eps=params.eps, delta=params.delta, violation_spacetime=viol,
        penalty_mass_spacetime=mass, lu_lp_norm=lp,
        final_l2=norm_l2(traj.final, spec.grid),
        newton_iters=int(np.sum([d.newton_iters for d in traj.diagnostics])),
        halvings=int(np.sum([d.halvings for d in traj.diagnostics])))


def continuation_solve(spec: ProblemSpec, g_fields, schedule: ContinuationSchedule,
                       opts: NewtonOptions, *, variant: str = "magnitude",
                       cap: float = 1e12, allow_small_eps: bool = False
                       ) -> tuple[Trajectory, list[StageSummary]]:
    """Run the eps/delta stages with frozen constraints, warm-starting each
    stage's time stepping from the previous stage's trajectory."""
    traj = None
    summaries = []
    for eps, delta in schedule.stages():
        params = PenaltyParams(eps=eps, delta=delta, variant=variant, cap=cap,
                               allow_small_eps=allow_small_eps)
        traj = solve_penalized_evolution(spec, g_fields, params, opts, warm=traj)
        summaries.append(stage_summary(spec, traj, params))
    return traj, summaries
