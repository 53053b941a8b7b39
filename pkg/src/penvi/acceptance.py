"""Acceptance suite: one function per criterion, runnable via ``penvi verify``
or pytest.  Each criterion prints a single pass/fail line and contributes a
deterministic record to acceptance_summary.json (timings are printed but
never serialized, so repeated runs are byte-comparable).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import GivenConstraint, MemoryKernelConstraint
from .core import (Grid, ProblemSpec, TimeGrid, Trajectory, norm_l2,
                   norm_l2_spacetime)
from .operators import MaterialLaw, build_operator, power_stress
from .penalty import k_eps
from .oracle import (OracleOptions, check_transfer_feasibility,
                     constraint_transfer, oracle_vi_step, project_feasible,
                     regularizing_sequence, stability_experiment)
from .qvi import OuterOptions, freeze_constraint_fields, qvi_solve
from .stepper import ContinuationSchedule, NewtonOptions, continuation_solve


@dataclass
class CriterionResult:
    name: str
    passed: bool
    detail: str
    measured: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# shared scenario builders


def _obstacle_spec(n=33, steps=50, T=1.0, f_value=10.0, g_value=1.0,
                   alpha=0.1, u0=None):
    grid = Grid((1.0,), (n,))
    tg = TimeGrid(T, steps)
    op = build_operator(grid, "gradient")
    law = MaterialLaw(p=2.0, alpha=alpha)
    con = GivenConstraint(lambda x, t: np.full(x.shape[0], g_value), 0.25, 4.0)
    if u0 is None:
        u0 = np.zeros(n)
    return ProblemSpec(grid, tg, op, law, con,
                       lambda x, t: np.full(x.shape[0], f_value), u0)


AC2_SCHEDULE = ContinuationSchedule((0.4, 0.2, 0.1, 0.05), (1e-4,))
DEEP_EPS = (0.4, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001)


# ---------------------------------------------------------------------------
# criteria


def ac1_penalized_monotonicity(seed: int = 0) -> CriterionResult:
    """Monotonicity of T(xi) = k_eps(gap) |xi|^(p-2) xi over random samples,
    both gap conventions, p in {1.5, 2, 3}."""
    rng = np.random.default_rng(seed)
    n = 10_000
    worst = {}
    for p in (1.5, 2.0, 3.0):
        for variant in ("magnitude", "power"):
            xi1 = rng.normal(0.0, 1.5, size=(n, 2))
            xi2 = rng.normal(0.0, 1.5, size=(n, 2))
            g = rng.uniform(0.2, 2.0, size=n)
            eps = rng.uniform(0.05, 0.9, size=n)
            m1 = np.sqrt(np.sum(xi1 * xi1, axis=1))
            m2 = np.sqrt(np.sum(xi2 * xi2, axis=1))
            if variant == "magnitude":
                gap1, gap2 = m1 - g, m2 - g
            else:
                gap1, gap2 = m1**p - g**p, m2**p - g**p
            t1 = k_eps(gap1, eps)[:, None] * power_stress(xi1, p, 0.0)
            t2 = k_eps(gap2, eps)[:, None] * power_stress(xi2, p, 0.0)
            prods = np.einsum("ij,ij->i", t1 - t2, xi1 - xi2)
            worst[f"p{p}_{variant}"] = float(np.min(prods))
    lo = min(worst.values())
    passed = lo >= -1e-12
    return CriterionResult(
        "AC-1", passed,
        f"min monotonicity product {lo:.3e} (threshold -1e-12)", worst)


def ac2_constraint_limit(out_dir: Path) -> CriterionResult:
    """Space-time violation along the prescribed eps schedule at delta=1e-4:
    nonincreasing, final <= 1e-3 g_* |Q_T|."""
    spec = _obstacle_spec()
    g_fields, _ = freeze_constraint_fields(spec, None)
    traj, summaries = continuation_solve(spec, g_fields, AC2_SCHEDULE,
                                         NewtonOptions())
    viols = [s.violation_spacetime for s in summaries]
    g_star = min(float(np.min(g)) for g in g_fields)
    qt = spec.grid.extents[0] * spec.timegrid.final_time
    threshold = 1e-3 * g_star * qt
    monotone = all(b <= a + 1e-14 for a, b in zip(viols, viols[1:]))
    final_ok = viols[-1] <= threshold
    # informational: the power-gap variant on the same stages
    _, psum = continuation_solve(spec, g_fields, AC2_SCHEDULE, NewtonOptions(),
                                 variant="power")
    rows = ["stage,eps,delta,violation_magnitude,violation_power"]
    for i, (s, sp) in enumerate(zip(summaries, psum)):
        rows.append(",".join([str(i), _fmt(s.eps), _fmt(s.delta),
                              _fmt(s.violation_spacetime),
                              _fmt(sp.violation_spacetime)]))
    _write_text(out_dir / "ac2_stages.csv", "\n".join(rows) + "\n")
    measured = {
        "violations": [float(v) for v in viols],
        "violations_power_variant": [float(s.violation_spacetime) for s in psum],
        "threshold": threshold,
        "monotone": monotone,
    }
    passed = monotone and final_ok
    return CriterionResult(
        "AC-2", passed,
        f"violations {['%.3e' % v for v in viols]} monotone={monotone}, "
        f"final {viols[-1]:.3e} vs threshold {threshold:.3e}", measured)


def ac3_oracle_equivalence() -> CriterionResult:
    """Single constrained implicit step: deep continuation vs the
    projected-gradient oracle, 1e-3 max-norm; oracle KKT residual 1e-8."""
    grid = Grid((1.0,), (16,))
    tg = TimeGrid(0.1, 1)
    op = build_operator(grid, "gradient")
    law = MaterialLaw(p=2.0, alpha=0.1)
    con = GivenConstraint(lambda x, t: np.full(x.shape[0], 1.0), 0.25, 4.0)
    spec = ProblemSpec(grid, tg, op, law, con,
                       lambda x, t: np.full(x.shape[0], 10.0), np.zeros(16))
    g_fields, _ = freeze_constraint_fields(spec, None)
    sched = ContinuationSchedule(DEEP_EPS, (1e-2, 1e-4, 1e-6))
    traj, _ = continuation_solve(spec, g_fields, sched, NewtonOptions(),
                                 allow_small_eps=True)
    w_oracle, report = oracle_vi_step(spec.u0, g_fields[1], spec,
                                      t=tg.dt, dt=tg.dt)
    diff = float(np.max(np.abs(traj.final - w_oracle)))
    kkt = report["kkt_residual"]
    active = float(np.max(np.abs(op.apply(w_oracle))))
    passed = diff <= 1e-3 and kkt <= 1e-8
    return CriterionResult(
        "AC-3", passed,
        f"max-norm gap {diff:.3e} (tol 1e-3), oracle KKT {kkt:.3e} "
        f"(tol 1e-8), |Lw| reaches {active:.3f}",
        {"max_norm_gap": diff, "kkt_residual": kkt,
         "feasibility_excess": report["feasibility_excess"]})


def ac4_uniqueness_contraction() -> CriterionResult:
    """Two initial data 1e-2 apart, identical f and g: squared L^inf(L^2)
    distance within the e^T Gronwall envelope of the squared initial
    distance; identical data reproduce bit-near solutions."""
    x = np.linspace(0.0, 1.0, 33)
    bump = 1e-2 * np.sin(np.pi * x)
    bump[0] = bump[-1] = 0.0
    spec_a = _obstacle_spec(u0=np.zeros(33))
    spec_b = _obstacle_spec(u0=bump)
    sched = AC2_SCHEDULE
    ga, _ = freeze_constraint_fields(spec_a, None)
    ta, _ = continuation_solve(spec_a, ga, sched, NewtonOptions())
    tb, _ = continuation_solve(spec_b, ga, sched, NewtonOptions())
    ta2, _ = continuation_solve(spec_a, ga, sched, NewtonOptions())
    d0 = norm_l2(spec_a.u0 - spec_b.u0, spec_a.grid)
    dist_sq = max(norm_l2(a - b, spec_a.grid) ** 2
                  for a, b in zip(ta.fields, tb.fields))
    envelope = np.exp(spec_a.timegrid.final_time) * d0**2
    same = max(norm_l2(a - b, spec_a.grid)
               for a, b in zip(ta.fields, ta2.fields))
    passed = dist_sq <= envelope and same <= 1e-9
    return CriterionResult(
        "AC-4", passed,
        f"sup_t ||w1-w2||^2 = {dist_sq:.3e} <= e^T d0^2 = {envelope:.3e}; "
        f"identical-data distance {same:.3e} (tol 1e-9)",
        {"dist_sq": dist_sq, "envelope": envelope, "identical_distance": same})


def _loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def ac5_continuous_dependence(out_dir: Path) -> CriterionResult:
    """Log-log slopes of the squared solution distance against g- and
    f-perturbations (linear and quadratic data bounds)."""
    sched = AC2_SCHEDULE
    opts = NewtonOptions()
    base = _obstacle_spec()
    g_deltas = [0.02, 0.04, 0.08]
    g_lhs = []
    g_pert = []
    for dg in g_deltas:
        pert = _obstacle_spec(g_value=1.0 + dg)
        rep = stability_experiment(base, pert, sched, opts)
        g_lhs.append(rep.lhs_sup_l2_sq)
        g_pert.append(rep.rhs_g_l1linf)
    f_deltas = [0.2, 0.4, 0.8]
    f_lhs = []
    f_pert = []
    for df in f_deltas:
        pert = _obstacle_spec(f_value=10.0 + df)
        rep = stability_experiment(base, pert, sched, opts)
        f_lhs.append(rep.lhs_sup_l2_sq)
        f_pert.append(np.sqrt(rep.rhs_f_sq))
    g_slope = _loglog_slope(g_pert, g_lhs)
    f_slope = _loglog_slope(f_pert, f_lhs)
    rows = ["kind,perturbation,lhs_sq"]
    for x, y in zip(g_pert, g_lhs):
        rows.append(f"g,{_fmt(x)},{_fmt(y)}")
    for x, y in zip(f_pert, f_lhs):
        rows.append(f"f,{_fmt(x)},{_fmt(y)}")
    _write_text(out_dir / "ac5_sweeps.csv", "\n".join(rows) + "\n")
    passed = g_slope >= 0.9 and f_slope >= 1.8
    return CriterionResult(
        "AC-5", passed,
        f"g-sweep slope {g_slope:.2f} (>= 0.9), f-sweep slope {f_slope:.2f} "
        f"(>= 1.8)",
        {"g_slope": g_slope, "f_slope": f_slope,
         "g_lhs": [float(v) for v in g_lhs],
         "f_lhs": [float(v) for v in f_lhs]})


def ac6_sandpile_steady_state() -> CriterionResult:
    """Degenerate alpha=0 growth run to T=5 against the oracle's stagnated
    profile (which itself approximates min(x, 1-x))."""
    spec = _obstacle_spec(n=33, steps=100, T=5.0, f_value=1.0, g_value=1.0,
                          alpha=0.0)
    g_fields, _ = freeze_constraint_fields(spec, None)
    sched = ContinuationSchedule((0.4, 0.2, 0.1, 0.05, 0.02, 0.01), (1e-4,))
    traj, _ = continuation_solve(spec, g_fields, sched, NewtonOptions(),
                                 allow_small_eps=True)
    # oracle reference: repeated implicit stepping until stagnation
    ref_tg = TimeGrid(0.5, 1)
    ref_spec = ProblemSpec(spec.grid, ref_tg, spec.operator, spec.law,
                           spec.constraint, spec.source, spec.u0)
    w = spec.u0.copy()
    for _ in range(40):
        w_new, _ = oracle_vi_step(w, g_fields[1], ref_spec, t=0.5, dt=0.5)
        if norm_l2(w_new - w, spec.grid) < 1e-10:
            w = w_new
            break
        w = w_new
    x = spec.grid.coords()[:, 0]
    ramp = np.minimum(x, 1.0 - x)
    ref_gap = float(np.max(np.abs(w - ramp)))
    diff = float(np.max(np.abs(traj.final - w)))
    rel = diff / float(np.max(np.abs(w)))
    passed = rel <= 0.02
    return CriterionResult(
        "AC-6", passed,
        f"relative max-norm gap {rel:.4f} (tol 0.02); oracle reference is "
        f"{ref_gap:.2e} from min(x, 1-x)",
        {"relative_gap": rel, "oracle_vs_ramp": ref_gap})


def ac7_delta_estimate(out_dir: Path) -> CriterionResult:
    """delta^(1/p) ||Lu||_p across the delta sweep at fixed eps."""
    spec = _obstacle_spec()
    g_fields, _ = freeze_constraint_fields(spec, None)
    products = []
    deltas = [1e-2, 1e-4, 1e-6]
    for d in deltas:
        sched = ContinuationSchedule((0.1,), (d,))
        _, summaries = continuation_solve(spec, g_fields, sched,
                                          NewtonOptions())
        s = summaries[-1]
        products.append(d ** (1.0 / spec.law.p) * s.lu_lp_norm)
    rows = ["delta,lu_lp,product"]
    for d, pr in zip(deltas, products):
        rows.append(f"{_fmt(d)},{_fmt(pr / d ** 0.5)},{_fmt(pr)}")
    _write_text(out_dir / "ac7_products.csv", "\n".join(rows) + "\n")
    spread = max(products) / min(products)
    passed = spread < 1.1
    return CriterionResult(
        "AC-7", passed,
        f"delta-scaled gradient norms {['%.3e' % p for p in products]}, "
        f"max/min = {spread:.2f} (required < 1.1)",
        {"products": [float(p) for p in products], "spread": spread})


def ac8_qvi_fixed_point() -> CriterionResult:
    """Contractive memory-kernel problem: geometric Picard residuals,
    converged residual <= 1e-8, re-evaluating S moves <= 2e-8."""
    grid = Grid((1.0,), (25,))
    tg = TimeGrid(1.0, 25)
    op = build_operator(grid, "gradient")
    law = MaterialLaw(p=2.0, alpha=0.1)
    con = MemoryKernelConstraint(
        kernel=lambda t, s: np.full(np.shape(s), 0.25),
        compose=lambda x, t, z: 1.0 + 0.25 * np.asarray(z),
        g_lo=0.5, g_hi=2.5)
    spec = ProblemSpec(grid, tg, op, law, con,
                       lambda x, t: np.full(x.shape[0], 10.0), np.zeros(25))
    sched = ContinuationSchedule((0.2, 0.1), (1e-4,))
    bundle = qvi_solve(spec, sched, NewtonOptions(), OuterOptions(tol=1e-8))
    hist = bundle.outer_histories[-1]
    ratios = [b / a for a, b in zip(hist, hist[1:]) if a > 5e-8]
    geometric = bool(ratios) and all(r <= 0.75 for r in ratios)
    final_res = hist[-1]
    fp = bundle.fixed_point_residual
    passed = (bundle.converged and geometric and final_res <= 1e-8
              and fp is not None and fp <= 2e-8)
    return CriterionResult(
        "AC-8", passed,
        f"residuals {['%.2e' % r for r in hist]}, ratios <= "
        f"{max(ratios):.3f}, re-evaluation moved {fp:.2e} (tol 2e-8)",
        {"history": [float(h) for h in hist],
         "fixed_point_residual": float(fp) if fp is not None else None})


def ac9_regularizing_sequence() -> CriterionResult:
    """Exponential-in-time smoothing of the (feasibility-projected) AC-2
    solution: distances to v and to G decrease in n; |Lv_n| <= g_n + 1e-9."""
    spec = _obstacle_spec()
    g_fields, _ = freeze_constraint_fields(spec, None)
    traj, _ = continuation_solve(spec, g_fields, AC2_SCHEDULE, NewtonOptions())
    # the finite-eps solution overshoots the bound by O(eps); Lemma-style
    # smoothing assumes a feasible input, so project each slice first
    proj_fields = tuple(
        project_feasible(spec.operator, spec.grid, f, g)
        for f, g in zip(traj.fields, g_fields))
    v = Trajectory(spec.grid, spec.timegrid, proj_fields)
    z = v.fields[0]
    times = spec.timegrid.times()
    dists = []
    sup_gaps = []
    excesses = []
    for n in (4, 16, 64):
        vn = regularizing_sequence(v, z, n)
        diff = [a - b for a, b in zip(vn.fields, v.fields)]
        dists.append(norm_l2_spacetime(diff, spec.grid, spec.timegrid))
        gn = constraint_transfer(g_fields, times, n)
        sup_gaps.append(max(float(np.max(np.abs(a - b)))
                            for a, b in zip(gn, g_fields)))
        excesses.append(check_transfer_feasibility(spec.operator, vn, gn))
    dist_mono = all(b <= a for a, b in zip(dists, dists[1:]))
    gap_mono = all(b <= a for a, b in zip(sup_gaps, sup_gaps[1:]))
    feasible = max(excesses) <= 1e-9
    passed = dist_mono and gap_mono and feasible
    return CriterionResult(
        "AC-9", passed,
        f"||v_n - v|| = {['%.3e' % d for d in dists]}, "
        f"||g_n - G||_inf = {['%.1e' % s for s in sup_gaps]}, "
        f"worst |Lv_n| - g_n = {max(excesses):.2e}",
        {"distances": [float(d) for d in dists],
         "sup_gaps": [float(s) for s in sup_gaps],
         "max_excess": float(max(excesses))})


def _summary_bytes(results: list[CriterionResult]) -> str:
    payload = {r.name: {"passed": r.passed, "detail": r.detail,
                        "measured": r.measured} for r in results}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def ac10_determinism(out_dir: Path, seed: int) -> CriterionResult:
    """Re-run the seeded sampling criterion and the full AC-2 scenario twice
    and byte-compare every written file."""
    dirs = [out_dir / "ac10-run1", out_dir / "ac10-run2"]
    for d in dirs:
        results = [ac1_penalized_monotonicity(seed), ac2_constraint_limit(d)]
        _write_text(d / "acceptance_summary.json", _summary_bytes(results))
    files1 = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*")
                    if p.is_file())
    files2 = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*")
                    if p.is_file())
    identical = files1 == files2 and all(
        (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()
        for f in files1)
    return CriterionResult(
        "AC-10", identical,
        f"two seeded verify passes wrote {len(files1)} files, "
        f"byte-identical={identical}", {"files": [str(f) for f in files1]})


# ---------------------------------------------------------------------------


def run_all(out_dir: Path, seed: int = 0) -> list[CriterionResult]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runners = [
        ("AC-1", lambda: ac1_penalized_monotonicity(seed)),
        ("AC-2", lambda: ac2_constraint_limit(out_dir)),
        ("AC-3", ac3_oracle_equivalence),
        ("AC-4", ac4_uniqueness_contraction),
        ("AC-5", lambda: ac5_continuous_dependence(out_dir)),
        ("AC-6", ac6_sandpile_steady_state),
        ("AC-7", lambda: ac7_delta_estimate(out_dir)),
        ("AC-8", ac8_qvi_fixed_point),
        ("AC-9", ac9_regularizing_sequence),
        ("AC-10", lambda: ac10_determinism(out_dir, seed)),
    ]
    results = []
    for name, fn in runners:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashed criterion is a failed criterion
            res = CriterionResult(name, False, f"raised {exc!r}")
        dt = time.perf_counter() - t0
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name} {status} ({dt:.1f}s): {res.detail}")
        results.append(res)
    _write_text(out_dir / "acceptance_summary.json", _summary_bytes(results))
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed; summary in "
          f"{out_dir / 'acceptance_summary.json'}")
    return results
