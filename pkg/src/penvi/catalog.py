"""Named formula catalog for configs: sources, bounds, kernels, compositions.

Configs select formulas by id with numeric coefficients; there is no
embedded expression language.  All callables are vectorized over the point
array (shape (n, dim)).
"""
from __future__ import annotations

import numpy as np

from .core import ParameterError


def _c(params, key, default=None):
    if key in params:
        return float(params[key])
    if default is None:
        raise ParameterError(f"formula is missing coefficient {key!r}")
    return float(default)


def make_source(ident: str, params: dict):
    if ident == "zero":
        return lambda x, t: np.zeros(x.shape[0])
    if ident == "constant":
        c = _c(params, "c")
        return lambda x, t: np.full(x.shape[0], c)
    if ident == "sine":
        # c * prod_a sin(pi x_a / L_a); L defaults to 1 per axis
        c = _c(params, "c")
        L = float(params.get("extent", 1.0))
        def f(x, t):
            out = np.full(x.shape[0], c)
            for a in range(x.shape[1]):
                out = out * np.sin(np.pi * x[:, a] / L)
            return out
        return f
    if ident == "ramp_t":
        c0 = _c(params, "c0")
        c1 = _c(params, "c1")
        return lambda x, t: np.full(x.shape[0], c0 + c1 * t)
    raise ParameterError(f"unknown source id {ident!r}")


def make_bound(ident: str, params: dict):
    if ident == "constant":
        c = _c(params, "c")
        return lambda x, t: np.full(x.shape[0], c)
    if ident == "affine_t":
        a = _c(params, "a")
        b = _c(params, "b")
        return lambda x, t: np.full(x.shape[0], a + b * t)
    if ident == "affine_x":
        a = _c(params, "a")
        b = _c(params, "b")
        return lambda x, t: a + b * x[:, 0]
    raise ParameterError(f"unknown bound id {ident!r}")


def make_kernel(ident: str, params: dict):
    if ident == "constant":
        c = _c(params, "c")
        return lambda t, s: np.full(np.shape(s), c)
    if ident == "exp_decay":
        c = _c(params, "c")
        rate = _c(params, "rate")
        return lambda t, s: c * np.exp(-rate * (t - np.asarray(s)))
    if ident == "zero":
        return lambda t, s: np.zeros(np.shape(s))
    raise ParameterError(f"unknown kernel id {ident!r}")


def make_composition(ident: str, params: dict):
    """g(x, t, zeta) for memory-kernel constraints."""
    if ident == "affine":
        a = _c(params, "a")
        b = _c(params, "b")
        return lambda x, t, z: a + b * np.asarray(z)
    if ident == "quadratic":
        a = _c(params, "a")
        b = _c(params, "b")
        return lambda x, t, z: a + b * np.asarray(z) ** 2
    raise ParameterError(f"unknown composition id {ident!r}")


def make_zeta_composition(ident: str, params: dict):
    """g(zeta) for the heat-coupled constraint."""
    if ident == "affine":
        a = _c(params, "a")
        b = _c(params, "b")
        return lambda z: a + b * np.asarray(z)
    if ident == "quadratic":
        a = _c(params, "a")
        b = _c(params, "b")
        return lambda z: a + b * np.asarray(z) ** 2
    raise ParameterError(f"unknown composition id {ident!r}")


def make_initial(ident: str, params: dict, grid):
    x = grid.coords()
    if ident == "zero":
        return np.zeros(grid.n_nodes)
    if ident == "sine":
        amp = _c(params, "amp")
        out = np.full(grid.n_nodes, amp)
        for a in range(grid.dim):
            out = out * np.sin(np.pi * x[:, a] / grid.extents[a])
        return out
    if ident == "tent":
        amp = _c(params, "amp")
        out = np.full(grid.n_nodes, amp)
        for a in range(grid.dim):
            out = out * np.minimum(x[:, a], grid.extents[a] - x[:, a])
        return out
    raise ParameterError(f"unknown u0 id {ident!r}")


# ---------------------------------------------------------------------------
# built-in scenarios


def builtin_scenarios() -> dict[str, dict]:
    """Named configs covering the solver's regimes; each is runnable with a
    single ``solve`` invocation."""
    base_newton = {"max_iters": 50, "rtol": 1e-10, "atol": 1e-12, "max_halvings": 8}
    return {
        # penalty never activates; matches the linear implicit solve
        "vi-heat-unconstrained": {
            "name": "vi-heat-unconstrained",
            "grid": {"extents": [1.0], "npts": [33]},
            "time": {"T": 0.25, "steps": 16},
            "operator": "gradient",
            "material": {"p": 2.0, "alpha": 1.0, "b_kind": "zero"},
            "constraint": {"kind": "given", "g": {"id": "constant", "c": 1e3},
                           "g_lo": 1.0, "g_hi": 1e3},
            "source": {"id": "constant", "c": 1.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.4], "delta_list": [1e-6]},
            "newton": base_newton,
            "seed": 0,
        },
        # strongly active gradient bound, the standard variational test
        "vi-obstacle": {
            "name": "vi-obstacle",
            "grid": {"extents": [1.0], "npts": [33]},
            "time": {"T": 1.0, "steps": 50},
            "operator": "gradient",
            "material": {"p": 2.0, "alpha": 0.1, "b_kind": "zero"},
            "constraint": {"kind": "given", "g": {"id": "constant", "c": 1.0},
                           "g_lo": 0.5, "g_hi": 2.0},
            "source": {"id": "constant", "c": 10.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.4, 0.2, 0.1, 0.05], "delta_list": [1e-4]},
            "newton": base_newton,
            "seed": 0,
        },
        # time-dependent bound
        "vi-moving-obstacle": {
            "name": "vi-moving-obstacle",
            "grid": {"extents": [1.0], "npts": [33]},
            "time": {"T": 1.0, "steps": 40},
            "operator": "gradient",
            "material": {"p": 2.0, "alpha": 0.1, "b_kind": "zero"},
            "constraint": {"kind": "given",
                           "g": {"id": "affine_t", "a": 1.5, "b": -0.5},
                           "g_lo": 0.5, "g_hi": 2.0},
            "source": {"id": "constant", "c": 10.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.4, 0.2, 0.1, 0.05], "delta_list": [1e-4]},
            "newton": base_newton,
            "seed": 0,
        },
        # degenerate alpha = 0 growth model; the pile tends to min(x, 1-x)
        "sandpile-1d": {
            "name": "sandpile-1d",
            "grid": {"extents": [1.0], "npts": [33]},
            "time": {"T": 5.0, "steps": 100},
            "operator": "gradient",
            "material": {"p": 2.0, "alpha": 0.0, "b_kind": "zero"},
            "constraint": {"kind": "given", "g": {"id": "constant", "c": 1.0},
                           "g_lo": 0.5, "g_hi": 2.0},
            "source": {"id": "constant", "c": 1.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.4, 0.2, 0.1, 0.05], "delta_list": [1e-4]},
            "newton": base_newton,
            "seed": 0,
        },
        # memory-kernel bound in the contractive regime
        "qvi-sandpile-memory": {
            "name": "qvi-sandpile-memory",
            "grid": {"extents": [1.0], "npts": [25]},
            "time": {"T": 1.0, "steps": 25},
            "operator": "gradient",
            "material": {"p": 2.0, "alpha": 0.1, "b_kind": "zero"},
            "constraint": {"kind": "memory_kernel",
                           "kernel": {"id": "constant", "c": 0.25},
                           "compose": {"id": "affine", "a": 1.0, "b": 0.25},
                           "g_lo": 0.5, "g_hi": 2.5},
            "source": {"id": "constant", "c": 10.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.2, 0.1], "delta_list": [1e-4]},
            "newton": base_newton,
            "outer": {"max_iters": 60, "tol": 1e-8, "theta": 1.0},
            "seed": 0,
        },
        # bound driven by an auxiliary temperature field
        "qvi-coupled-heat": {
            "name": "qvi-coupled-heat",
            "grid": {"extents": [1.0], "npts": [25]},
            "time": {"T": 1.0, "steps": 25},
            "operator": "gradient",
            "material": {"p": 2.0, "alpha": 0.1, "b_kind": "zero"},
            "constraint": {"kind": "coupled_heat", "kappa": 1.0,
                           "phi0": {"id": "zero"}, "psi": 0.5, "eta": 0.0,
                           "compose": {"id": "affine", "a": 1.0, "b": 0.5},
                           "zeta0": {"id": "zero"}, "g_lo": 0.5, "g_hi": 2.5},
            "source": {"id": "constant", "c": 10.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.2, 0.1], "delta_list": [1e-4]},
            "newton": base_newton,
            "outer": {"max_iters": 60, "tol": 1e-8, "theta": 1.0},
            "seed": 0,
        },
        # Laplacian-bounded 1D problem
        "vi-laplacian-1d": {
            "name": "vi-laplacian-1d",
            "grid": {"extents": [1.0], "npts": [33]},
            "time": {"T": 0.5, "steps": 25},
            "operator": "laplacian",
            "material": {"p": 2.0, "alpha": 0.05, "b_kind": "zero"},
            "constraint": {"kind": "given", "g": {"id": "constant", "c": 5.0},
                           "g_lo": 1.0, "g_hi": 10.0},
            "source": {"id": "sine", "c": 4.0},
            "u0": {"id": "zero"},
            "penalty": {"variant": "magnitude"},
            "schedule": {"eps_list": [0.4, 0.2], "delta_list": [1e-4]},
            "newton": base_newton,
            "seed": 0,
        },
    }
