"""Outer fixed-point loop for solution-dependent constraints.

``evaluate_S`` freezes the constraint along a candidate trajectory
(causally: the bound at t_k only reads the candidate on [0, t_k]) and runs
the penalized evolution.  ``qvi_fixed_point`` iterates phi <- (1-theta) phi
+ theta S(phi) until the discrete L^2(Q_T) update norm drops below the
tolerance; Picard is used because S is only known to be continuous and
compact, so non-convergence is a reported outcome, not an exception.
``qvi_solve`` wraps the fixed point in the (eps, delta) continuation and
degenerates to the plain variational solve for solution-independent bounds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import (CoupledHeatConstraint, GivenConstraint, HeatStepper,
                          MemoryKernelConstraint, eval_coupled,
                          step_coupled_heat)
from .core import (ParameterError, ProblemSpec, Trajectory,
                   norm_l2_spacetime)
from .penalty import PenaltyParams
from .stepper import (ContinuationSchedule, NewtonOptions, StageSummary,
                      solve_penalized_evolution, stage_summary)


@dataclass(frozen=True)
class OuterOptions:
    max_iters: int = 60
    tol: float = 1e-8
    theta: float = 1.0
    verify_fixed_point: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ParameterError("outer max_iters must be >= 1")
        if self.tol <= 0:
            raise ParameterError("outer tol must be positive")
        if not (0.0 < self.theta <= 1.0):
            raise ParameterError("relaxation theta must lie in (0, 1]")


def freeze_constraint_fields(spec: ProblemSpec, phi: Trajectory | None
                             ) -> tuple[list[np.ndarray], int]:
    """Evaluate the constraint operator along phi, one bound field per time
    node.  ``phi=None`` stands for the constant-in-time initial datum (the
    canonical starting iterate).  Returns the fields and the clamp count."""
    op = spec.operator
    tg = spec.timegrid
    times = tg.times()
    con = spec.constraint
    if con.kind == "given":
        return [con.eval_at(op, t) for t in times], 0
    if phi is None:
        fields = [spec.u0] * (tg.steps + 1)
    else:
        if len(phi.fields) != tg.steps + 1:
            raise ParameterError("candidate trajectory has the wrong time layout")
        fields = list(phi.fields)
    clamped = 0
    out = []
    if con.kind == "memory_kernel":
        for k in range(tg.steps + 1):
            g, c = con.eval_at(op, fields, times, k)
            out.append(g)
            clamped += c
        return out, clamped
    if con.kind == "coupled_heat":
        stepper = HeatStepper(spec.grid, con.kappa)
        state = con.initial_state(spec.grid)
        g, c = con.eval_state(op, state)
        out.append(g)
        clamped += c
        for k in range(tg.steps):
            state = step_coupled_heat(con, stepper, op, state, fields[k],
                                      op.apply(fields[k]), times[k], tg.dt)
            g, c = con.eval_state(op, state)
            out.append(g)
            clamped += c
        return out, clamped
    raise ParameterError(f"unknown constraint kind {con.kind!r}")


def evaluate_S(spec: ProblemSpec, phi: Trajectory | None, params: PenaltyParams,
               opts: NewtonOptions, warm: Trajectory | None = None
               ) -> tuple[Trajectory, list[np.ndarray], int]:
    """One application of the solution map: freeze G along phi, solve."""
    g_fields, clamped = freeze_constraint_fields(spec, phi)
    traj = solve_penalized_evolution(spec, g_fields, params, opts, warm=warm)
    return traj, g_fields, clamped


def _traj_distance(a: Trajectory, b: Trajectory, spec: ProblemSpec) -> float:
    diff = [fa - fb for fa, fb in zip(a.fields, b.fields)]
    return norm_l2_spacetime(diff, spec.grid, spec.timegrid)


def _mix(a: Trajectory, b: Trajectory, theta: float, spec: ProblemSpec) -> Trajectory:
    if theta == 1.0:
        return b
    fields = tuple((1.0 - theta) * fa + theta * fb
                   for fa, fb in zip(a.fields, b.fields))
    return Trajectory(spec.grid, spec.timegrid, fields, b.diagnostics)


@dataclass
class FixedPointResult:
    trajectory: Trajectory
    g_fields: list
    residual_history: list[float]
    converged: bool
    fixed_point_residual: float | None
    clamp_events: int
    stage: StageSummary | None = None


def qvi_fixed_point(spec: ProblemSpec, params: PenaltyParams, opts: NewtonOptions,
                    outer: OuterOptions,
                    phi0: Trajectory | None = None) -> FixedPointResult:
    """Picard iteration phi^{k+1} = (1-theta) phi^k + theta S(phi^k).

    Returns at the first update with ||phi^{k+1} - phi^k|| < tol plus the
    full residual history; exhausting max_iters sets converged=False instead
    of raising (existence, not contraction, is what the theory gives).
    """
    con_kind = spec.constraint.kind
    phi = phi0
    history: list[float] = []
    clamp_total = 0
    traj, g_fields, clamped = evaluate_S(spec, phi, params, opts, warm=phi0)
    clamp_total += clamped
    base = phi if phi is not None else _constant_traj(spec)
    res = outer.theta * _traj_distance(traj, base, spec)
    history.append(res)
    phi = _mix(base, traj, outer.theta, spec)
    converged = con_kind == "given" or res < outer.tol
    it = 1
    while not converged and it < outer.max_iters:
        traj, g_fields, clamped = evaluate_S(spec, phi, params, opts, warm=phi)
        clamp_total += clamped
        res = outer.theta * _traj_distance(traj, phi, spec)
        history.append(res)
        phi = _mix(phi, traj, outer.theta, spec)
        it += 1
        if res < outer.tol:
            converged = True
    fp_res = None
    if converged and outer.verify_fixed_point:
        check, _, _ = evaluate_S(spec, phi, params, opts, warm=phi)
        fp_res = _traj_distance(check, phi, spec)
    return FixedPointResult(trajectory=phi, g_fields=g_fields,
                            residual_history=history, converged=converged,
                            fixed_point_residual=fp_res,
                            clamp_events=clamp_total,
                            stage=stage_summary(spec, phi, params))


def _constant_traj(spec: ProblemSpec) -> Trajectory:
    from .core import constant_trajectory
    return constant_trajectory(spec.grid, spec.timegrid, spec.u0)


@dataclass
class QviBundle:
    trajectory: Trajectory
    g_fields: list
    stage_summaries: list[StageSummary]
    outer_histories: list[list[float]]
    converged: bool
    fixed_point_residual: float | None
    clamp_events: int


def qvi_solve(spec: ProblemSpec, schedule: ContinuationSchedule,
              opts: NewtonOptions, outer: OuterOptions, *,
              variant: str = "magnitude", cap: float = 1e12,
              allow_small_eps: bool = False) -> QviBundle:
    """Continuation-wrapped fixed point: one Picard solve per (eps, delta)
    stage, warm-starting the candidate from the previous stage.  For a
    solution-independent constraint this reduces, stage by stage, to the
    plain penalized continuation."""
    phi: Trajectory | None = None
    summaries: list[StageSummary] = []
    histories: list[list[float]] = []
    clamp_total = 0
    result: FixedPointResult | None = None
    stages = schedule.stages()
    for idx, (eps, delta) in enumerate(stages):
        params = PenaltyParams(eps=eps, delta=delta, variant=variant, cap=cap,
                               allow_small_eps=allow_small_eps)
        stage_outer = outer if idx == len(stages) - 1 else \
            OuterOptions(max_iters=outer.max_iters, tol=outer.tol,
                         theta=outer.theta, verify_fixed_point=False)
        result = qvi_fixed_point(spec, params, opts, stage_outer, phi0=phi)
        phi = result.trajectory
        summaries.append(result.stage)
        histories.append(result.residual_history)
        clamp_total += result.clamp_events
        if not result.converged:
            break
    return QviBundle(trajectory=result.trajectory, g_fields=result.g_fields,
                     stage_summaries=summaries, outer_histories=histories,
                     converged=result.converged,
                     fixed_point_residual=result.fixed_point_residual,
                     clamp_events=clamp_total)
