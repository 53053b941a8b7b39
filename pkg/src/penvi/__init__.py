"""Penalized solvers for evolutionary variational and quasi-variational
inequalities with pointwise bounds on derivative expressions."""

from .core import (Grid, ProblemSpec, SolveDiagnostics, TimeGrid, Trajectory,
                   norm_l2, norm_l2_spacetime, norm_lp_spacetime,
                   violation_positive_part)
from .operators import LinearOperatorL, MaterialLaw, build_operator
from .penalty import PenaltyParams, k_eps, k_eps_delta, penalty_stress, phi_eps
from .constraints import (CoupledHeatConstraint, GivenConstraint,
                          MemoryKernelConstraint)
from .stepper import (ContinuationSchedule, NewtonOptions, continuation_solve,
                      newton_step_solve, residual, solve_penalized_evolution)
from .qvi import OuterOptions, evaluate_S, qvi_fixed_point, qvi_solve
from .oracle import (OracleOptions, constraint_transfer, oracle_vi_step,
                     regularizing_sequence, stability_experiment)

__version__ = "0.1.0"
