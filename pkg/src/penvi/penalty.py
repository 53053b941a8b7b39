"""The exponential penalty, its antiderivative, and the penalized stress term.

The penalty k_eps vanishes on the feasible side, grows like e^(s/eps) - 1 on
(0, 1/eps] and saturates at e^(1/eps^2) - 1 beyond.  Two gap conventions are
supported for the stress term: ``magnitude`` feeds |Lu| - g into k_eps and
``power`` feeds |Lu|^p - g^p.

Numerical guards: e^(1/eps^2) overflows doubles below eps ~ 0.038, and even
representable values poison Newton residual norms, so evaluations saturate at
a configurable cap (default 1e12).  ``PenaltyParams`` additionally refuses
eps < 0.05 unless ``allow_small_eps`` is set; deep-eps continuation then runs
entirely in the capped regime.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ParameterError
from .operators import power_stress

DEFAULT_CAP = 1e12
DEFAULT_EPS_FLOOR = 0.05
_EXP_MAX = 700.0  # exp argument kept below the double-precision overflow point


def _check_eps(eps) -> None:
    eps = np.asarray(eps, dtype=float)
    if not np.all((0.0 < eps) & (eps < 1.0)):
        raise ParameterError(f"penalty epsilon must lie in (0, 1), got {eps}")


def k_eps(s, eps, cap: float = DEFAULT_CAP):
    """Penalty value: 0 for s <= 0, e^(s/eps)-1 on [0, 1/eps], constant after.

    Values are saturated at ``cap``; pass ``cap=np.inf`` for the raw formula.
    Continuous and nondecreasing in s for any cap.  ``eps`` may be an array
    broadcastable against ``s``.
    """
    _check_eps(eps)
    s = np.asarray(s, dtype=float)
    arg = np.minimum(np.clip(s, 0.0, 1.0 / eps) / eps, _EXP_MAX)
    out = np.minimum(np.expm1(arg), cap)
    if out.ndim == 0:
        return float(out)
    return out


def k_eps_delta(s, eps: float, delta: float, cap: float = DEFAULT_CAP):
    """delta + k_eps(s); >= delta everywhere."""
    if not (0.0 <= delta < 1.0):
        raise ParameterError(f"penalty delta must lie in [0, 1), got {delta}")
    return delta + k_eps(s, eps, cap)


def k_eps_prime(s, eps: float, cap: float = DEFAULT_CAP):
    """Semismooth-Newton slope of the (capped) penalty.

    Uses the one-sided exponential-branch derivative at both kinks (s = 0 and
    s = 1/eps); where the cap has flattened the value, the slope at the
    saturation entry point is kept so damped Newton still sees a descent
    direction.
    """
    _check_eps(eps)
    s = np.asarray(s, dtype=float)
    s_cap = eps * np.log1p(cap) if np.isfinite(cap) else np.inf
    arg = np.minimum(np.minimum(np.clip(s, 0.0, 1.0 / eps), s_cap) / eps, _EXP_MAX)
    out = np.where((s >= 0.0) & (s <= 1.0 / eps), np.exp(arg) / eps, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def phi_eps(s, eps: float):
    """Closed-form antiderivative of the uncapped k_eps, with phi(0) = 0.

    Piecewise: 0 for s <= 0; eps(e^(s/eps)-1) - s on [0, 1/eps]; affine
    continuation with slope e^(1/eps^2)-1 beyond.  Convex and nonnegative.
    """
    _check_eps(eps)
    s = np.asarray(s, dtype=float)
    inv = 1.0 / eps
    mid = eps * np.expm1(np.minimum(np.clip(s, 0.0, inv) / eps, _EXP_MAX)) - np.clip(s, 0.0, inv)
    slope_end = np.expm1(min(inv / eps, _EXP_MAX))
    tail = np.where(s > inv, (s - inv) * slope_end, 0.0)
    out = np.where(s <= 0.0, 0.0, mid + tail)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PenaltyParams:
    """One (eps, delta) pair plus the gap convention and overflow policy."""

    eps: float
    delta: float
    variant: str = "magnitude"
    cap: float = DEFAULT_CAP
    allow_small_eps: bool = False

    def __post_init__(self):
        _check_eps(self.eps)
        if not (0.0 <= self.delta < 1.0):
            raise ParameterError(f"penalty delta must lie in [0, 1), got {self.delta}")
        if self.variant not in ("magnitude", "power"):
            raise ParameterError("penalty variant must be 'magnitude' or 'power'")
        if self.eps < DEFAULT_EPS_FLOOR and not self.allow_small_eps:
            raise ParameterError(
                f"eps = {self.eps} is below the overflow floor {DEFAULT_EPS_FLOOR}; "
                "set allow_small_eps=True to run in the saturated regime"
            )
        if not (self.cap > 0):
            raise ParameterError("cap must be positive")


def gap_values(mag: np.ndarray, g: np.ndarray, variant: str, p: float) -> np.ndarray:
    """The scalar penalty argument per evaluation point."""
    if variant == "magnitude":
        return mag - g
    return mag**p - g**p


def gap_gradient_factor(mag: np.ndarray, variant: str, p: float) -> np.ndarray:
    """d(gap)/d(xi) = factor * xi; only queried where the gap is >= 0, so
    mag >= g > 0 and the magnitude derivative is regular."""
    safe = np.where(mag > 0, mag, 1.0)
    if variant == "magnitude":
        return np.where(mag > 0, 1.0 / safe, 0.0)
    return p * np.where(mag > 0, safe ** (p - 2.0), 0.0)


def penalty_stress(lu: np.ndarray, g: np.ndarray, params: PenaltyParams,
                   p: float, mu: float = 0.0) -> np.ndarray:
    """(delta + k_eps(gap)) (|xi|^2 + mu^2)^((p-2)/2) xi, pointwise."""
    lu = np.atleast_2d(np.asarray(lu, dtype=float))
    g = np.asarray(g, dtype=float)
    if g.shape != (lu.shape[0],):
        raise ParameterError("penalty_stress: constraint field layout mismatch")
    mag = np.sqrt(np.sum(lu * lu, axis=1))
    fac = k_eps_delta(gap_values(mag, g, params.variant, p), params.eps,
                      params.delta, params.cap)
    return fac[:, None] * power_stress(lu, p, mu)
