"""Scenario configuration, orchestration, and result emission.

Commands:

    penvi solve <config.json | builtin-name> [--out DIR]
    penvi sweep <config.json | builtin-name> --axis <path> --values v1,v2,...
    penvi plot <result-dir> --kind <profile|residual-history|sweep>
    penvi verify [--out DIR] [--seed N]

The output root defaults to ./penvi-out and can be overridden by the
PENVI_OUTPUT_ROOT environment variable or --out.  Configs are flat JSON;
formulas are chosen from the named catalog (see catalog module).  All files
are written with 17 significant digits so determinism is byte-checkable.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import catalog
from .constraints import (CoupledHeatConstraint, GivenConstraint,
                          MemoryKernelConstraint)
from .core import Grid, ParameterError, ProblemSpec, TimeGrid
from .operators import MaterialLaw, build_operator
from .qvi import OuterOptions, qvi_solve
from .stepper import ContinuationSchedule, NewtonOptions, NonConvergenceError


class ConfigError(ValueError):
    """Config validation failure; the message names the offending key."""


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _req(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"config is missing required key {path!r}")
        node = node[part]
    return node


def _num(cfg: dict, path: str, lo=None, hi=None, default=None,
         lo_strict=False):
    node = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.get(part, {}) if isinstance(node, dict) else {}
    val = node.get(parts[-1], default) if isinstance(node, dict) else default
    if val is None:
        raise ConfigError(f"config is missing required key {path!r}")
    try:
        val = float(val)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {path!r} must be numeric")
    if lo is not None and (val < lo or (lo_strict and val == lo)):
        raise ConfigError(f"config key {path!r} out of range: {val}")
    if hi is not None and val > hi:
        raise ConfigError(f"config key {path!r} out of range: {val}")
    return val


def build_spec(cfg: dict) -> tuple[ProblemSpec, ContinuationSchedule,
                                   NewtonOptions, OuterOptions, dict]:
    """Translate a validated config dict into solver objects."""
    extents = [float(v) for v in _req(cfg, "grid.extents")]
    npts = [int(v) for v in _req(cfg, "grid.npts")]
    try:
        grid = Grid(tuple(extents), tuple(npts))
    except ParameterError as exc:
        raise ConfigError(f"grid: {exc}")
    T = _num(cfg, "time.T", lo=0, lo_strict=True)
    steps = int(_num(cfg, "time.steps", lo=1))
    tg = TimeGrid(T, steps)
    op_kind = cfg.get("operator", "gradient")
    try:
        op = build_operator(grid, op_kind)
    except ParameterError as exc:
        raise ConfigError(f"operator: {exc}")

    p = _num(cfg, "material.p")
    if not (1.0 < p):
        raise ConfigError(f"config key 'material.p' must exceed 1, got {p}")
    mat = cfg.get("material", {})
    try:
        law = MaterialLaw(p=p, alpha=float(mat.get("alpha", 1.0)),
                          mu=mat.get("mu"), b_kind=mat.get("b_kind", "zero"),
                          lam=float(mat.get("lambda", 0.0)))
    except ParameterError as exc:
        raise ConfigError(f"material: {exc}")

    con_cfg = _req(cfg, "constraint")
    kind = con_cfg.get("kind", "given")
    g_lo = _num(cfg, "constraint.g_lo", lo=0, lo_strict=True)
    g_hi = _num(cfg, "constraint.g_hi", lo=g_lo)
    try:
        if kind == "given":
            gdef = _req(cfg, "constraint.g")
            gfun = catalog.make_bound(gdef["id"], gdef)
            con = GivenConstraint(gfun, g_lo, g_hi)
        elif kind == "memory_kernel":
            kdef = _req(cfg, "constraint.kernel")
            cdef = _req(cfg, "constraint.compose")
            con = MemoryKernelConstraint(
                kernel=catalog.make_kernel(kdef["id"], kdef),
                compose=catalog.make_composition(cdef["id"], cdef),
                g_lo=g_lo, g_hi=g_hi)
        elif kind == "coupled_heat":
            cdef = _req(cfg, "constraint.compose")
            pdef = con_cfg.get("phi0", {"id": "zero"})
            z0def = con_cfg.get("zeta0", {"id": "zero"})
            con = CoupledHeatConstraint(
                kappa=_num(cfg, "constraint.kappa", lo=0, lo_strict=True,
                           default=1.0),
                phi0=catalog.make_source(pdef["id"], pdef),
                psi=float(con_cfg.get("psi", 0.0)),
                eta=float(con_cfg.get("eta", 0.0)),
                compose=catalog.make_zeta_composition(cdef["id"], cdef),
                zeta0=catalog.make_initial(z0def["id"], z0def, grid),
                g_lo=g_lo, g_hi=g_hi)
        else:
            raise ConfigError(f"config key 'constraint.kind' unknown: {kind!r}")
    except (KeyError, ParameterError) as exc:
        raise ConfigError(f"constraint: {exc}")

    sdef = _req(cfg, "source")
    source = catalog.make_source(sdef["id"], sdef)
    u0def = cfg.get("u0", {"id": "zero"})
    u0 = catalog.make_initial(u0def["id"], u0def, grid)

    sched_cfg = cfg.get("schedule", {})
    try:
        schedule = ContinuationSchedule(
            tuple(float(e) for e in sched_cfg.get("eps_list",
                                                  (0.4, 0.2, 0.1, 0.05))),
            tuple(float(d) for d in sched_cfg.get("delta_list",
                                                  (1e-2, 1e-4, 1e-6))))
    except ParameterError as exc:
        raise ConfigError(f"schedule: {exc}")

    ncfg = cfg.get("newton", {})
    try:
        newton = NewtonOptions(
            max_iters=int(ncfg.get("max_iters", 50)),
            rtol=float(ncfg.get("rtol", 1e-10)),
            atol=float(ncfg.get("atol", 1e-12)),
            max_halvings=int(ncfg.get("max_halvings", 8)))
    except ParameterError as exc:
        raise ConfigError(f"newton: {exc}")

    ocfg = cfg.get("outer", {})
    try:
        outer = OuterOptions(max_iters=int(ocfg.get("max_iters", 60)),
                             tol=float(ocfg.get("tol", 1e-8)),
                             theta=float(ocfg.get("theta", 1.0)))
    except ParameterError as exc:
        raise ConfigError(f"outer: {exc}")

    pcfg = cfg.get("penalty", {})
    pextra = {
        "variant": pcfg.get("variant", "magnitude"),
        "cap": float(pcfg.get("cap", 1e12)),
        "allow_small_eps": bool(pcfg.get("allow_small_eps", False)),
    }
    if pextra["variant"] not in ("magnitude", "power"):
        raise ConfigError("config key 'penalty.variant' must be "
                          "'magnitude' or 'power'")

    try:
        spec = ProblemSpec(grid, tg, op, law, con, source, u0)
    except ParameterError as exc:
        raise ConfigError(f"problem assembly: {exc}")
    return spec, schedule, newton, outer, pextra


def load_config(arg: str) -> dict:
    builtins = catalog.builtin_scenarios()
    if arg in builtins:
        return copy.deepcopy(builtins[arg])
    path = Path(arg)
    if not path.exists():
        raise ConfigError(f"no config file or builtin scenario named {arg!r}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config does not parse as JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def output_root(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get("PENVI_OUTPUT_ROOT")
    return Path(env) if env else Path("penvi-out")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _summary_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def run_scenario(cfg: dict, out_dir: Path, dump_fields: bool = False) -> dict:
    """Solve one scenario and write summary.json / timeseries.csv /
    stages.csv (plus fields.csv when requested).  Returns the summary."""
    spec, schedule, newton, outer, pextra = build_spec(cfg)
    name = cfg.get("name", "scenario")
    status = 0
    error = None
    bundle = None
    try:
        bundle = qvi_solve(spec, schedule, newton, outer,
                           variant=pextra["variant"], cap=pextra["cap"],
                           allow_small_eps=pextra["allow_small_eps"])
    except NonConvergenceError as exc:
        status = 2
        error = str(exc)

    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"name": name, "status": status, "seed": cfg.get("seed", 0)}
    if error:
        summary["error"] = error
    if bundle is not None:
        from .core import norm_l2
        traj = bundle.trajectory
        dt = spec.timegrid.dt
        stages = []
        for s in bundle.stage_summaries:
            stages.append({
                "eps": s.eps, "delta": s.delta,
                "violation_spacetime": s.violation_spacetime,
                "penalty_mass_spacetime": s.penalty_mass_spacetime,
                "lu_lp_norm": s.lu_lp_norm, "final_l2": s.final_l2,
                "newton_iters": s.newton_iters, "halvings": s.halvings,
            })
        summary.update({
            "converged": bundle.converged,
            "final_l2": norm_l2(traj.final, spec.grid),
            "violation_spacetime": stages[-1]["violation_spacetime"],
            "penalty_mass_spacetime": stages[-1]["penalty_mass_spacetime"],
            "lu_lp_norm": stages[-1]["lu_lp_norm"],
            "clamp_events": bundle.clamp_events,
            "fixed_point_residual": bundle.fixed_point_residual,
            "outer_iterations": [len(h) for h in bundle.outer_histories],
            "outer_histories": bundle.outer_histories,
            "stages": stages,
        })

        times = spec.timegrid.times()
        rows = ["k,t,l2_norm,violation,penalty_mass,newton_iters,halvings"]
        rows.append(",".join(["0", _fmt(times[0]),
                              _fmt(norm_l2(traj.fields[0], spec.grid)),
                              _fmt(0.0), _fmt(0.0), "0", "0"]))
        for k, d in enumerate(traj.diagnostics, start=1):
            rows.append(",".join([
                str(k), _fmt(times[k]),
                _fmt(norm_l2(traj.fields[k], spec.grid)),
                _fmt(d.violation), _fmt(d.penalty_mass),
                str(d.newton_iters), str(d.halvings)]))
        _write_text(out_dir / "timeseries.csv", "\n".join(rows) + "\n")

        srows = ["stage,eps,delta,violation_spacetime,penalty_mass,"
                 "lu_lp_norm,delta_scaled_lu,final_l2,newton_iters,halvings,"
                 "outer_iters,outer_final_residual"]
        for i, (s, hist) in enumerate(zip(bundle.stage_summaries,
                                          bundle.outer_histories)):
            srows.append(",".join([
                str(i), _fmt(s.eps), _fmt(s.delta),
                _fmt(s.violation_spacetime), _fmt(s.penalty_mass_spacetime),
                _fmt(s.lu_lp_norm),
                _fmt(s.delta ** (1.0 / spec.law.p) * s.lu_lp_norm),
                _fmt(s.final_l2), str(s.newton_iters), str(s.halvings),
                str(len(hist)), _fmt(hist[-1])]))
        _write_text(out_dir / "stages.csv", "\n".join(srows) + "\n")

        if dump_fields or cfg.get("output", {}).get("dump_fields", False):
            coords = spec.grid.coords()
            header = ["x%d" % a for a in range(spec.grid.dim)]
            header += ["u_t%d" % k for k in range(len(traj.fields))]
            frows = [" ".join(header)]
            arr = traj.array()
            for i in range(spec.grid.n_nodes):
                vals = [_fmt(c) for c in coords[i]]
                vals += [_fmt(arr[k, i]) for k in range(arr.shape[0])]
                frows.append(" ".join(vals))
            _write_text(out_dir / "fields.csv", "\n".join(frows) + "\n")
        summary["config"] = cfg
    _write_text(out_dir / "summary.json", _summary_json(summary))
    return summary


def _set_axis(cfg: dict, axis: str, value: float) -> dict:
    out = copy.deepcopy(cfg)
    parts = axis.split(".")
    node = out
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    leaf = parts[-1]
    existing = node.get(leaf)
    if isinstance(existing, list):
        node[leaf] = [value]
    else:
        node[leaf] = value
    return out


def run_sweep(cfg: dict, axis: str, values: list[float], out_dir: Path,
              threads: int = 1) -> list[dict]:
    """One scenario run per axis value; rows aggregate in input order.
    Failed rows are flagged and the sweep continues."""
    if not axis or any(not p for p in axis.split(".")):
        raise ConfigError("sweep axis must be a dotted key path")

    def one(i_v):
        i, v = i_v
        row_cfg = _set_axis(cfg, axis, v)
        row_dir = out_dir / f"row{i:03d}"
        try:
            summary = run_scenario(row_cfg, row_dir)
        except ConfigError as exc:
            return {"status": 3, "error": str(exc), "name": cfg.get("name", "")}
        return summary

    items = list(enumerate(values))
    if threads > 1 and len(items) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, items))
    else:
        results = [one(it) for it in items]

    cols = ["axis", "value", "status", "violation_spacetime", "penalty_mass",
            "lu_lp_norm", "delta_scaled_lu", "final_l2"]
    rows = [",".join(cols)]
    for v, summary in zip(values, results):
        if summary.get("status", 1) == 0:
            stages = summary["stages"]
            last = stages[-1]
            p = float(_num(cfg, "material.p"))
            rows.append(",".join([
                axis, _fmt(v), "0",
                _fmt(last["violation_spacetime"]),
                _fmt(last["penalty_mass_spacetime"]),
                _fmt(last["lu_lp_norm"]),
                _fmt(last["delta"] ** (1.0 / p) * last["lu_lp_norm"]),
                _fmt(last["final_l2"])]))
        else:
            rows.append(",".join([axis, _fmt(v),
                                  str(summary.get("status", 1)),
                                  "nan", "nan", "nan", "nan", "nan"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "sweep.csv", "\n".join(rows) + "\n")
    return results


def emit_plot_data(result_dir: Path, kind: str, out_dir: Path | None = None) -> Path:
    """Convert a result directory into whitespace-delimited plot columns."""
    out_dir = out_dir or result_dir
    if kind == "profile":
        src = result_dir / "fields.csv"
        if not src.exists():
            raise ConfigError("profile plots need fields.csv "
                              "(run solve with dump_fields)")
        table = [line.split() for line in src.read_text().splitlines()]
        header, data = table[0], table[1:]
        ncoord = sum(1 for h in header if h.startswith("x"))
        ntimes = len(header) - ncoord
        picks = sorted({0, (ntimes - 1) // 2, ntimes - 1})
        rows = []
        for r in data:
            vals = r[:ncoord] + [r[ncoord + k] for k in picks]
            rows.append(" ".join(vals))
        dest = out_dir / "plot_profile.dat"
        _write_text(dest, "\n".join(rows) + "\n")
        return dest
    if kind == "residual-history":
        src = result_dir / "summary.json"
        if not src.exists():
            raise ConfigError("residual-history plots need summary.json")
        summary = json.loads(src.read_text())
        histories = summary.get("outer_histories")
        if not histories:
            raise ConfigError("summary.json carries no outer residual history")
        depth = max(len(h) for h in histories)
        rows = []
        for i in range(depth):
            vals = []
            for h in histories:
                j = min(i, len(h) - 1)  # pad short stages with their last value
                vals += [str(i), _fmt(h[j])]
            rows.append(" ".join(vals))
        dest = out_dir / "plot_residuals.dat"
        _write_text(dest, "\n".join(rows) + "\n")
        return dest
    if kind == "sweep":
        src = result_dir / "sweep.csv"
        if not src.exists():
            raise ConfigError("sweep plots need sweep.csv in the result dir")
        lines = src.read_text().splitlines()
        rows = [" ".join(line.split(",")) for line in lines]
        dest = out_dir / "plot_sweep.dat"
        _write_text(dest, "\n".join(rows) + "\n")
        return dest
    raise ConfigError(f"unknown plot kind {kind!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="penvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run one scenario")
    p_solve.add_argument("config")
    p_solve.add_argument("--out")
    p_solve.add_argument("--dump-fields", action="store_true")

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True)
    p_sweep.add_argument("--values", required=True)
    p_sweep.add_argument("--out")
    p_sweep.add_argument("--threads", type=int, default=1)

    p_plot = sub.add_parser("plot", help="emit plot-ready data files")
    p_plot.add_argument("result_dir")
    p_plot.add_argument("--kind", required=True)

    p_verify = sub.add_parser("verify", help="run the acceptance suite")
    p_verify.add_argument("--out")
    p_verify.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            cfg = load_config(args.config)
            root = output_root(args.out)
            name = cfg.get("name", Path(args.config).stem)
            summary = run_scenario(cfg, root / name,
                                   dump_fields=args.dump_fields)
            print(f"{name}: status={summary['status']} "
                  f"-> {root / name / 'summary.json'}")
            return summary["status"]
        if args.command == "sweep":
            cfg = load_config(args.config)
            try:
                values = [float(v) for v in args.values.split(",") if v != ""]
            except ValueError:
                raise ConfigError("--values must be a comma-separated "
                                  "numeric list")
            root = output_root(args.out)
            name = cfg.get("name", Path(args.config).stem) + "-sweep"
            results = run_sweep(cfg, args.axis, values, root / name,
                                threads=args.threads)
            bad = sum(1 for r in results if r.get("status", 1) != 0)
            print(f"{name}: {len(results) - bad}/{len(results)} rows ok "
                  f"-> {root / name / 'sweep.csv'}")
            return 0 if bad == 0 else 2
        if args.command == "plot":
            dest = emit_plot_data(Path(args.result_dir), args.kind)
            print(f"wrote {dest}")
            return 0
        if args.command == "verify":
            from .acceptance import run_all
            root = output_root(args.out)
            results = run_all(root / "acceptance", seed=args.seed)
            return 0 if all(r.passed for r in results) else 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
