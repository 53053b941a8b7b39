"""Independent desk-scale verifiers for the penalized solver.

``oracle_vi_step`` minimizes the time-discrete convex energy

    J(w) = (1/2 dt) ||w - w_prev||^2 + int A(Lw) + int B(w) - int f w

over {w : |Lw| <= g, Dirichlet} by projected gradient.  The gradient step is
preconditioned with the operator stiffness (a Sobolev gradient); the
projection moves Lw onto the pointwise balls of radius g by Dykstra
alternation between the ball set and the consistency subspace {Lw}.  With
that pairing the fixed points satisfy the true first-order conditions,
which the returned KKT residual certifies independently of iteration
counts.  The oracle is deliberately slow and refuses grids above 64 nodes.

Also here: the exponential-in-time regularizing sequence, the matching
constraint transfer, and the two-solve stability harness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .core import (Grid, ParameterError, ProblemSpec, SizeMismatchError,
                   TimeGrid, Trajectory, edge_magnitude, norm_l2,
                   norm_l2_spacetime, norm_lp_spacetime)
from .operators import potential_at_points


class UnsupportedStructureError(ValueError):
    """The oracle needs the potential structure (a = grad A, quadratic B)."""


@dataclass(frozen=True)
class OracleOptions:
    step: float | None = None      # None: dt, then adapted
    max_iters: int = 200_000
    tol: float = 1e-10             # energy stagnation
    kkt_tol: float = 1e-9          # displacement certificate target
    dykstra_tol: float = 1e-12
    dykstra_max: int = 500
    grow: float = 1.3
    stagnation_runs: int = 3


class _Projector:
    """Projection of an edge field onto {|q_j| <= g_j} intersected with the
    consistency subspace {Lw : w Dirichlet}, by two-set Dykstra.

    The subspace projection solves the stiffness normal equations, so the
    alternation converges to the exact projection in the edge metric; the
    companion nodal field of the final subspace projection is returned.
    """

    def __init__(self, op, grid: Grid):
        self.op = op
        self.grid = grid
        self.interior = np.flatnonzero(grid.interior_mask())
        mat = op.matrix.tocsc()[:, self.interior]
        self._mat_int = mat
        self._lu = spla.splu((mat.T @ mat).tocsc())

    def to_subspace(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rhs = self._mat_int.T @ q.T.ravel()
        w_int = self._lu.solve(rhs)
        w = np.zeros(self.grid.n_nodes)
        w[self.interior] = w_int
        return self.op.apply(w), w

    @staticmethod
    def to_balls(q: np.ndarray, g: np.ndarray) -> np.ndarray:
        mag = edge_magnitude(q)
        scale = np.where(mag > g, g / np.where(mag > 0, mag, 1.0), 1.0)
        return scale[:, None] * q

    def project(self, q: np.ndarray, g: np.ndarray,
                tol: float, max_iters: int) -> tuple[np.ndarray, np.ndarray]:
        p = np.zeros_like(q)
        r = np.zeros_like(q)
        w = np.zeros(self.grid.n_nodes)
        prev = q
        for _ in range(max_iters):
            y = self.to_balls(prev + p, g)
            p = prev + p - y
            qn, w = self.to_subspace(y + r)
            r = y + r - qn
            if float(np.max(np.abs(qn - prev))) < tol:
                prev = qn
                break
            prev = qn
        # certify feasibility by a final radial shrink (a no-op up to rounding)
        mag = edge_magnitude(prev)
        rho = float(np.min(np.where(mag > 0, g / np.where(mag > 0, mag, 1.0), np.inf)))
        rho = min(rho, 1.0)
        return prev * rho, w * rho


def _energy(spec: ProblemSpec, w, w_prev, f, alpha, mu, dt) -> float:
    grid, op, law = spec.grid, spec.operator, spec.law
    diff = w - w_prev
    xi = op.apply(w)
    pot = potential_at_points(xi, alpha, law.p, mu)
    quad = 0.5 * law.b_prime() * float(np.dot(w, w))
    return grid.node_weight * (
        0.5 / dt * float(np.dot(diff, diff)) + float(np.sum(pot)) + quad
        - float(np.dot(f, w)))


def _energy_gradient(spec, w, w_prev, f, alpha, mu, dt) -> np.ndarray:
    op, law = spec.operator, spec.law
    from .operators import power_stress
    xi = op.apply(w)
    stress = alpha[:, None] * power_stress(xi, law.p, mu)
    grad = (w - w_prev) / dt + op.apply_adjoint(stress) + law.b_value(w) - f
    grad[spec.grid.boundary_mask()] = 0.0
    return grad


def oracle_vi_step(w_prev: np.ndarray, g: np.ndarray, spec: ProblemSpec,
                   t: float, dt: float,
                   opts: OracleOptions = OracleOptions()) -> tuple[np.ndarray, dict]:
    """One constrained implicit step by projected (Sobolev) gradient.

    Returns the minimizer and a report with the energy history length, the
    final energy, the KKT residual and the worst feasibility excess.
    """
    if spec.law.b_kind not in ("zero", "linear"):
        raise UnsupportedStructureError(
            f"oracle needs a potential lower-order term, got {spec.law.b_kind!r}")
    if spec.grid.n_nodes > 64:
        raise ParameterError("oracle is restricted to grids of at most 64 nodes")
    g = np.asarray(g, dtype=float)
    if g.shape != (spec.operator.n_points,):
        raise SizeMismatchError("oracle: constraint layout mismatch")
    proj = _Projector(spec.operator, spec.grid)
    alpha = spec.law.alpha_at(spec.operator.eval_points, t)
    mu = spec.law.resolve_mu(spec.constraint.g_hi)
    f = spec.source_at(t)

    def pg_map(w, tau):
        grad = _energy_gradient(spec, w, w_prev, f, alpha, mu, dt)
        gs = np.zeros_like(w)
        gs[proj.interior] = proj._lu.solve(grad[proj.interior])
        q_target = spec.operator.apply(w - tau * gs)
        _, w_new = proj.project(q_target, g, opts.dykstra_tol, opts.dykstra_max)
        return w_new

    # start from the feasible projection of the previous field
    _, w = proj.project(spec.operator.apply(w_prev), g,
                        opts.dykstra_tol, opts.dykstra_max)
    tau = opts.step if opts.step is not None else dt
    energy = _energy(spec, w, w_prev, f, alpha, mu, dt)
    stagnant = 0
    iterations = 0
    for iterations in range(1, opts.max_iters + 1):
        accepted = False
        while tau > 1e-14 * dt:
            w_new = pg_map(w, tau)
            e_new = _energy(spec, w_new, w_prev, f, alpha, mu, dt)
            if e_new <= energy + 1e-15 * (1.0 + abs(energy)):
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            break
        drop = energy - e_new
        w, energy = w_new, e_new
        tau = min(tau * opts.grow, 1e3 * dt)
        if drop < opts.tol * (1.0 + abs(energy)):
            stagnant += 1
            if stagnant >= opts.stagnation_runs:
                break
        else:
            stagnant = 0

    # polish: energy comparisons bottom out at sqrt(eps) distance from the
    # minimizer, so finish with displacement-controlled fixed-point steps
    # (the map is averaged for stable tau, hence displacement-contractive)
    tau_p = tau
    prev_disp = np.inf
    for _ in range(2000):
        w_new = pg_map(w, tau_p)
        disp = norm_l2(w_new - w, spec.grid)
        if disp > prev_disp * (1.0 + 1e-9) and disp > 1e-15:
            tau_p *= 0.5
            if tau_p < 1e-12 * dt:
                break
            continue
        w = w_new
        prev_disp = disp
        if disp <= 0.05 * opts.kkt_tol * tau_p:
            break
    energy = _energy(spec, w, w_prev, f, alpha, mu, dt)

    tau_chk = dt
    w_chk = pg_map(w, tau_chk)
    kkt = norm_l2(w - w_chk, spec.grid) / tau_chk
    excess = float(np.max(edge_magnitude(spec.operator.apply(w)) - g))
    report = {"iterations": iterations, "energy": energy, "kkt_residual": kkt,
              "feasibility_excess": excess}
    return w, report


def project_feasible(op, grid: Grid, w: np.ndarray, g: np.ndarray,
                     tol: float = 1e-12, max_iters: int = 500) -> np.ndarray:
    """Project a nodal field into {|Lw| <= g} via the edge-metric Dykstra
    alternation; useful for preparing feasible test trajectories."""
    proj = _Projector(op, grid)
    _, out = proj.project(op.apply(np.asarray(w, dtype=float)),
                          np.asarray(g, dtype=float), tol, max_iters)
    return out


# ---------------------------------------------------------------------------
# exponential-in-time smoothing


def _exp_average(values: np.ndarray, times: np.ndarray, n: int,
                 z: np.ndarray) -> np.ndarray:
    """v_n(t_k) = e^{-n t_k} int_0^{t_k} v(s) n e^{n s} ds + e^{-n t_k} z
    with v piecewise linear in time: exact per-interval integration.

    ``values`` has shape (K+1, m); returns the same shape.  Weights are
    accumulated in the shifted form e^{n (s - t_k)} <= 1 for stability.
    """
    if n <= 0:
        raise ParameterError("regularization index n must be positive")
    K = len(times) - 1
    out = np.empty_like(values)
    out[0] = z
    for k in range(1, K + 1):
        tk = times[k]
        acc = np.exp(-n * tk) * z
        for j in range(k):
            t0, t1 = times[j], times[j + 1]
            v0, v1 = values[j], values[j + 1]
            b = (v1 - v0) / (t1 - t0)
            # int n e^{n(s-tk)} (v0 + b (s - t0)) ds over [t0, t1]
            e1 = np.exp(n * (t1 - tk))
            e0 = np.exp(n * (t0 - tk))
            acc = acc + e1 * (v0 + b * (t1 - t0) - b / n) - e0 * (v0 - b / n)
        out[k] = acc
    return out


def regularizing_sequence(v: Trajectory, z: np.ndarray, n: int) -> Trajectory:
    """Solve w + (1/n) dw/dt = v, w(0) = z, exactly for piecewise-linear v."""
    if int(n) != n or n <= 0:
        raise ParameterError("n must be a positive integer")
    times = v.timegrid.times()
    vals = v.array()
    out = _exp_average(vals, times, int(n), np.asarray(z, dtype=float))
    return Trajectory(v.grid, v.timegrid, tuple(out))


def constraint_transfer(g_fields, times: np.ndarray, n: int) -> list[np.ndarray]:
    """Apply the same exponential averaging to the bound fields, with the
    t=0 bound as the starting value; preserves constants exactly."""
    if int(n) != n or n <= 0:
        raise ParameterError("n must be a positive integer")
    vals = np.stack([np.asarray(g, dtype=float) for g in g_fields], axis=0)
    out = _exp_average(vals, np.asarray(times, dtype=float), int(n), vals[0])
    return [out[k] for k in range(out.shape[0])]


def check_transfer_feasibility(op, v_n: Trajectory, g_n, tol: float = 1e-9) -> float:
    """Worst pointwise excess of |L v_n| over g_n across all time nodes."""
    worst = -np.inf
    for k, f in enumerate(v_n.fields):
        excess = edge_magnitude(op.apply(f)) - np.asarray(g_n[k])
        worst = max(worst, float(np.max(excess)))
    return worst


# ---------------------------------------------------------------------------
# stability harness


@dataclass(frozen=True)
class StabilityReport:
    lhs_sup_l2_sq: float
    rhs_f_sq: float
    rhs_u0_sq: float
    rhs_g_l1linf: float
    ratio: float
    vp_distance_term: float | None


def stability_experiment(spec1: ProblemSpec, spec2: ProblemSpec, schedule,
                         opts, *, variant: str = "magnitude", cap: float = 1e12,
                         allow_small_eps: bool = False) -> StabilityReport:
    """Solve both problems (solution-independent constraints only) and
    compare the solution distance against the data distances."""
    if spec1.grid != spec2.grid or spec1.timegrid != spec2.timegrid:
        raise ParameterError("stability experiment needs matching discretizations")
    for s in (spec1, spec2):
        if s.constraint.kind != "given":
            raise ParameterError("stability experiment is variational: "
                                 "constraints must be solution-independent")
    from .stepper import continuation_solve
    from .qvi import freeze_constraint_fields
    g1, _ = freeze_constraint_fields(spec1, None)
    g2, _ = freeze_constraint_fields(spec2, None)
    t1, _ = continuation_solve(spec1, g1, schedule, opts, variant=variant,
                               cap=cap, allow_small_eps=allow_small_eps)
    t2, _ = continuation_solve(spec2, g2, schedule, opts, variant=variant,
                               cap=cap, allow_small_eps=allow_small_eps)
    grid, tg = spec1.grid, spec1.timegrid
    times = tg.times()
    lhs = max(norm_l2(a - b, grid) ** 2 for a, b in zip(t1.fields, t2.fields))
    df = 0.0
    for k in range(1, tg.steps + 1):
        diff = spec1.source_at(times[k]) - spec2.source_at(times[k])
        df += tg.dt * grid.node_weight * float(np.dot(diff, diff))
    du0 = norm_l2(spec1.u0 - spec2.u0, grid) ** 2
    dg = 0.0
    for k in range(1, tg.steps + 1):
        dg += tg.dt * float(np.max(np.abs(g1[k] - g2[k])))
    rhs = df + du0 + dg
    ratio = lhs / rhs if rhs > 0 else 0.0
    vp_term = None
    p = spec1.law.p
    lus = [spec1.operator.apply(a - b) for a, b in zip(t1.fields, t2.fields)]
    vp_term = norm_lp_spacetime(lus, grid, tg, p) ** max(2.0, p)
    return StabilityReport(lhs_sup_l2_sq=lhs, rhs_f_sq=df, rhs_u0_sq=du0,
                           rhs_g_l1linf=dg, ratio=ratio,
                           vp_distance_term=vp_term)
