"""Command-line harness: ``ocuflow run|mms-convergence|sweep|bench-solvers``.

Exit codes: 0 when every solve converged, 2 when a solve did not converge
(artifacts are still written), 1 on any error including bad usage.
Precedence: ``--posture``, ``--variant`` and ``--solver`` override the
config file; without the flag the config value is used.
"""
from __future__ import annotations

import hashlib
import json
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import __version__
from .fem import Field, n_threads
from .forms import FLOW_VARIANTS, RADIATION_VARIANTS
from .krylov import PRESETS
from .mesh import mesh_stats
from .newton import NewtonError, newton_solve
from .postproc import (RegionStats, export_csv, export_vtu, field_statistics, normalize_pressure, stats_record,
                       wall_shear_stress)
from .scenario import ScenarioError, ScenarioSpec, dumps_config, mms_errors

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

# expected observed orders on the final levels (theory 3/2/2)
MMS_MIN_ORDERS = {"u": 2.7, "p": 1.7, "T": 1.7}

# column names for common sweep parameters
SWEEP_COLUMNS = {"params.T_amb": ("TAMB", "K"), "params.T_bl": ("TBL", "K"), "params.h_amb": ("HAMB", "W/(m^2 K)"),
                 "params.E": ("E", "W/m^2"), "posture": ("posture", "")}


class CLIError(click.ClickException):
    exit_code = EXIT_ERROR


# -- shared helpers ----------------------------------------------------------------------

def _variant(value: str | None):
    if value is None:
        return None
    parts = [p.strip() for p in value.replace(":", ",").split(",")]
    if len(parts) != 2 or parts[0] not in FLOW_VARIANTS or parts[1] not in RADIATION_VARIANTS:
        raise CLIError(f"--variant must be FLOW,RADIATION with FLOW in {FLOW_VARIANTS} and RADIATION in "
                       f"{RADIATION_VARIANTS}, got {value!r}")
    return tuple(parts)


def load_spec(config, posture=None, variant=None, solver=None) -> ScenarioSpec:
    """Config file plus command-line overrides."""
    try:
        spec = ScenarioSpec.load(config)
        if posture is not None:
            spec = spec.with_posture(None if posture == "none" else posture)
        v = _variant(variant)
        if v is not None:
            spec = spec.with_variant(*v)
        if solver is not None:
            spec = spec.replace(solver=solver)
    except (FileNotFoundError, ScenarioError, ValueError) as exc:
        raise CLIError(str(exc)) from None
    if spec.solver not in PRESETS:
        raise CLIError(f"unknown solver preset {spec.solver!r}; choose from {list(PRESETS)}")
    return spec


def config_hash(spec: ScenarioSpec) -> str:
    return hashlib.sha256(dumps_config(spec.to_config()).encode()).hexdigest()


def versions() -> dict:
    out = {"ocuflow": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pyamg", "sympy", "click"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:  # pragma: no cover
            out[pkg] = "unknown"
    return out


def write_manifest(out: Path, command: str, spec: ScenarioSpec, timings: dict, **extra) -> Path:
    dim = extra.pop("dim", None)
    data = {
        "command": command,
        "config_hash": config_hash(spec),
        "scenario": spec.name,
        "posture": spec.posture.value if spec.posture is not None else None,
        "variant": [spec.flow, spec.radiation],
        "solver": spec.solver,
        "threads": n_threads(),
        "versions": versions(),
        "timings": {k: float(v) for k, v in timings.items()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if dim is not None:
        data["gravity"] = list(spec.gravity(dim))
    data.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _build(spec: ScenarioSpec, timings: dict):
    t0 = time.perf_counter()
    try:
        mesh = spec.build_mesh()
    except (FileNotFoundError, ScenarioError, ValueError) as exc:
        raise CLIError(str(exc)) from None
    t1 = time.perf_counter()
    try:
        problem = spec.build_problem(mesh)
    except (ScenarioError, ValueError, KeyError) as exc:
        raise CLIError(f"invalid scenario: {exc}") from None
    timings["load"] = t1 - t0
    timings["init"] = time.perf_counter() - t1
    return mesh, problem


def _solve(spec, problem, timings):
    try:
        return newton_solve(problem, cfg=spec.newton_config(), solver=spec.solver, timings=timings)
    except NewtonError as exc:
        raise CLIError(f"Newton iteration failed: {exc}") from None


def _statistics(spec, problem, state, iop_mmhg: float | None) -> tuple[list, object | None, Field]:
    """Region statistics for T, |u|, p and wall shear stress."""
    m = problem.mesh
    stats = []
    for lab in sorted(m.subdomain_names.values()):
        if len(m.cells_in(lab)):
            stats.append(field_statistics(state.T, lab, "T", "K"))
    for lab in spec.gamma_amb:
        stats.append(field_statistics(state.T, lab, "T", "K"))
    p = state.p if iop_mmhg is None else normalize_pressure(state.p, iop_mmhg, "mmHg")
    for lab in spec.fluid_labels:
        stats.append(field_statistics(state.u, lab, "u", "m/s"))
        stats.append(field_statistics(p, lab, "p", "Pa"))
    wss = None
    if spec.wall_labels and problem.params.mu > 0:
        wss = wall_shear_stress(state.u, spec.wall_labels, problem.params.mu)
        for lab in spec.wall_labels:
            stats.append(_wss_stats(wss, lab))
        stats.append(_wss_stats(wss, None))
    return stats, wss, p


def _wss_stats(wss, label):
    return RegionStats(label or "walls", "wss", "Pa", wss.max(label), wss.mean(label), wss.min(label))


def _stats_rows(stats) -> list[dict]:
    return [s.as_dict() for s in stats]


STATS_COLUMNS = ("field", "region", "unit", "max", "mean", "min")


def _exit(converged: bool):
    sys.exit(EXIT_OK if converged else EXIT_NOT_CONVERGED)


# -- commands ------------------------------------------------------------------------------

@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="ocuflow")
def cli():
    """Aqueous humor flow and heat transfer in the eye.

    OCUFLOW_THREADS caps the assembly worker threads. Flags override the
    config file; without a flag the config value is used.
    """


_posture_opt = click.option("--posture", type=click.Choice(["standing", "supine", "prone", "none"]),
                            help="Override the config posture.")
_variant_opt = click.option("--variant", help="Override the model variant, e.g. 'stokes,linearized'.")
_solver_opt = click.option("--solver", type=click.Choice(PRESETS), help="Override the solver preset.")
_out_opt = click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
                        help="Output directory.")


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@_out_opt
@_posture_opt
@_variant_opt
@_solver_opt
@click.option("--iop", type=float, default=None, help="Shift the pressure to this mean [mmHg] before export.")
def run(config, out, posture, variant, solver, iop):
    """Solve one scenario and export fields, statistics, Newton log and timings."""
    spec = load_spec(config, posture, variant, solver)
    outd = _out_dir(out)
    timings: dict = {}
    mesh, problem = _build(spec, timings)
    res = _solve(spec, problem, timings)
    t0 = time.perf_counter()
    stats, wss, p = _statistics(spec, problem, res.state, iop)
    try:
        export_vtu(mesh, outd / "fields.vtu", {"T": res.state.T, "u": res.state.u, "p": p})
        export_csv(outd / "stats.csv", _stats_rows(stats), STATS_COLUMNS)
        res.log.to_csv(outd / "newton_log.csv")
    except OSError as exc:
        raise CLIError(str(exc)) from None
    timings["export"] = time.perf_counter() - t0
    phases = ("load", "init", "assembly", "solve", "export")
    export_csv(outd / "timings.csv", [{"phase": k, "seconds": timings[k]} for k in phases],
               ("phase", "seconds"), {"seconds": "s"})
    write_manifest(outd, "run", spec, timings, dim=mesh.dim, converged=res.converged, status=res.status,
                   iterations=res.iterations, n_cells=mesh.n_cells)
    click.echo(f"{spec.name}: {res.status} after {res.iterations} Newton iteration(s); output in {outd}")
    _exit(res.converged)


@cli.command("mms-convergence")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--levels", type=click.IntRange(min=1), default=4, show_default=True,
              help="Number of uniform refinement levels (factor 2 each).")
@_out_opt
@_solver_opt
def mms_convergence(config, levels, out, solver):
    """Manufactured-solution convergence study; writes convergence.csv."""
    spec = load_spec(config, solver=solver)
    if spec.mms is None:
        raise CLIError("the config has no mms section (mms.u, mms.p, mms.T)")
    if spec.generator is None:
        raise CLIError("convergence studies need a generated mesh (mesh.generator)")
    outd = _out_dir(out)
    timings = {"load": 0.0, "init": 0.0, "assembly": 0.0, "solve": 0.0}
    rows, all_converged = [], True
    for level in range(levels):
        s = spec.refined(2**level)
        tm: dict = {}
        mesh, problem = _build(s, tm)
        res = _solve(s, problem, tm)
        for k in timings:
            timings[k] += tm.get(k, 0.0)
        all_converged &= res.converged
        err = mms_errors(problem, res.state, s.manufactured(mesh.dim))
        rows.append({"level": level, "n_cells": mesh.n_cells, "h": mesh_stats(mesh).h_max,
                     "err_u": err["u"], "err_p": err["p"], "err_T": err["T"],
                     "newton_iterations": res.iterations})
    orders_ok = None
    columns = ["level", "n_cells", "h", "err_u", "err_p", "err_T", "newton_iterations"]
    if levels > 1:
        columns += ["order_u", "order_p", "order_T"]
        for prev, cur in zip(rows, rows[1:]):
            for f in ("u", "p", "T"):
                cur[f"order_{f}"] = observed_order(prev[f"err_{f}"], cur[f"err_{f}"], prev["h"], cur["h"])
        for f in ("u", "p", "T"):
            rows[0][f"order_{f}"] = ""
        final = rows[-1]
        orders_ok = all(final[f"order_{f}"] >= lim for f, lim in MMS_MIN_ORDERS.items())
        if not orders_ok:
            click.echo(f"warning: observed orders below {MMS_MIN_ORDERS} on the final level", err=True)
    export_csv(outd / "convergence.csv", rows, columns, {"h": "m"})
    write_manifest(outd, "mms-convergence", spec, timings, levels=levels, converged=all_converged,
                   orders_ok=orders_ok)
    for r in rows:
        click.echo(" ".join(f"{c}={r[c]:.4g}" if isinstance(r[c], float) else f"{c}={r[c]}" for c in columns))
    _exit(all_converged)


def observed_order(e_coarse: float, e_fine: float, h_coarse: float, h_fine: float) -> float:
    """``log(e_coarse / e_fine) / log(h_coarse / h_fine)``."""
    if e_fine <= 0 or e_coarse <= 0:
        return float("nan")
    return math.log(e_coarse / e_fine) / math.log(h_coarse / h_fine)


def parse_values(text: str) -> list:
    """``"283,288"``, ``"283:323:5"`` (inclusive) or non-numeric names."""
    text = text.strip()
    if ":" in text and "," not in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise CLIError(f"range must be START:STOP:STEP, got {text!r}")
        a, b, step = (float(x) for x in parts)
        if step <= 0 or b < a:
            raise CLIError("range needs STEP > 0 and STOP >= START")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return [a + i * step for i in range(n)]
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            out.append(float(item))
        except ValueError:
            out.append(item)
    if not out:
        raise CLIError("--values is empty")
    return out


def apply_param(spec: ScenarioSpec, key: str, value) -> ScenarioSpec:
    if key == "posture":
        return spec.with_posture(value)
    if key == "variant":
        return spec.with_variant(*_variant(str(value)))
    if key.startswith("params."):
        return spec.with_param(key, value)
    raise ScenarioError(f"cannot sweep {key!r}; use params.<name>, posture or variant")


@dataclass
class _Point:
    spec: ScenarioSpec
    key: str
    value: object
    report: str


def _label_column(lab: str) -> str:
    return "WSS_" + (lab[len("wall_"):] if lab.startswith("wall_") else lab)


def _sweep_point(pt: _Point) -> dict:
    """One isolated solve of a sweep; failures become a status string."""
    col = SWEEP_COLUMNS.get(pt.key, (pt.key, ""))[0]
    rec: dict = {col: pt.value}
    try:
        spec = apply_param(pt.spec, pt.key, pt.value)
        problem = spec.build_problem()
        res = newton_solve(problem, cfg=spec.newton_config(), solver=spec.solver)
        rec["status"] = res.status
        rec["newton_iterations"] = res.iterations
        if pt.report == "wss":
            wss = wall_shear_stress(res.state.u, spec.wall_labels, problem.params.mu)
            rec["WSS_total"] = wss.mean()
            for lab in spec.wall_labels:
                rec[_label_column(lab)] = wss.mean(lab)
        else:
            stats, _, _ = _statistics(spec, problem, res.state, None)
            r, _ = stats_record(stats)
            rec.update(r)
    except (NewtonError, ScenarioError, ValueError, KeyError) as exc:
        rec["status"] = f"failed: {exc}"
    return rec


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--param", "key", required=True, help="Swept key: params.<name>, posture or variant.")
@click.option("--values", required=True, help="Comma list or START:STOP:STEP (inclusive).")
@click.option("--report", type=click.Choice(["wss", "stats"]), default="wss", show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
              help="Sweep points solved concurrently (separate processes).")
@_out_opt
@_posture_opt
@_variant_opt
@_solver_opt
def sweep(config, key, values, report, jobs, out, posture, variant, solver):
    """One solve per value; writes sweep.csv ordered by value (failed points keep a status)."""
    spec = load_spec(config, posture, variant, solver)
    vals = parse_values(values)
    if key.startswith("params."):
        vals = [float(v) if not isinstance(v, str) else v for v in vals]
        try:
            spec.with_param(key, vals[0])
        except (ScenarioError, ValueError) as exc:
            raise CLIError(str(exc)) from None
    elif key not in ("posture", "variant"):
        raise CLIError(f"cannot sweep {key!r}; use params.<name>, posture or variant")
    if report == "wss" and not spec.wall_labels:
        raise CLIError("--report wss needs boundaries.walls in the config")
    outd = _out_dir(out)
    points = [_Point(spec, key, v, report) for v in vals]
    t0 = time.perf_counter()
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(points))) as pool:
            recs = list(pool.map(_sweep_point, points))  # map keeps the input order
    else:
        recs = [_sweep_point(p) for p in points]
    col, unit = SWEEP_COLUMNS.get(key, (key, ""))
    if all(isinstance(v, float) for v in vals):
        order = np.argsort(np.asarray(vals, dtype=float), kind="stable")
        recs = [recs[i] for i in order]
    columns = [col]
    if report == "wss":
        columns += ["WSS_total"] + [_label_column(lab) for lab in spec.wall_labels]
    else:
        for r in recs:
            columns += [c for c in r if c not in columns and c not in ("status", "newton_iterations")]
    columns += ["newton_iterations", "status"]
    units = {col: unit}
    units.update({c: "Pa" for c in columns if c.startswith("WSS_")})
    for r in recs:
        for c in columns:
            r.setdefault(c, float("nan") if c != "status" else "")
    export_csv(outd / "sweep.csv", recs, columns, units)
    converged = all(r["status"] == "converged" for r in recs)
    write_manifest(outd, "sweep", spec, {"total": time.perf_counter() - t0}, param=key,
                   values=[v if isinstance(v, str) else float(v) for v in vals], converged=converged)
    for r in recs:
        click.echo(f"{col}={r[col]} status={r['status']}")
    _exit(converged)


BENCH_VARIANTS = (("navier_stokes", "nonlinear"), ("navier_stokes", "linearized"),
                  ("stokes", "nonlinear"), ("stokes", "linearized"))


@cli.command("bench-solvers")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--trees", default="table2,unpreconditioned", show_default=True,
              help="Comma-separated solver presets (at least two).")
@_out_opt
@_posture_opt
def bench_solvers(config, trees, out, posture):
    """Run the four model variants with every solver preset; writes bench.csv."""
    spec = load_spec(config, posture)
    names = [t.strip() for t in trees.split(",") if t.strip()]
    if len(names) < 2:
        raise CLIError("--trees needs at least two presets")
    bad = [t for t in names if t not in PRESETS]
    if bad:
        raise CLIError(f"unknown solver preset(s) {bad}; choose from {list(PRESETS)}")
    outd = _out_dir(out)
    rows = []
    total: dict = {}
    t_start = time.perf_counter()
    for flow, radiation in BENCH_VARIANTS:
        s = spec.with_variant(flow, radiation)
        tm: dict = {}
        mesh, problem = _build(s, tm)
        ref = None
        for tree in names:
            rec = {"flow": flow, "radiation": radiation, "tree": tree}
            t = dict(tm)
            try:
                res = newton_solve(problem, cfg=s.newton_config(), solver=tree, timings=t)
                x = np.concatenate([res.state.u.coeffs, res.state.p.coeffs, res.state.T.coeffs])
                rec.update(status=res.status, newton_iterations=res.iterations,
                           linear_iterations=sum(r.linear_iterations for r in res.log.records))
                if res.converged and ref is None:
                    ref = x
                rec["rel_diff"] = (float(np.linalg.norm(x - ref) / max(np.linalg.norm(ref), 1e-300))
                                   if ref is not None and res.converged else float("nan"))
            except NewtonError as exc:
                rec.update(status=f"failed: {exc}", newton_iterations=-1, linear_iterations=-1,
                           rel_diff=float("nan"))
            for k in ("load", "init", "assembly", "solve"):
                rec[f"t_{k}"] = t.get(k, 0.0)
                total[k] = total.get(k, 0.0) + t.get(k, 0.0)
            rows.append(rec)
    cols = ["flow", "radiation", "tree", "status", "newton_iterations", "linear_iterations", "rel_diff",
            "t_load", "t_init", "t_assembly", "t_solve"]
    export_csv(outd / "bench.csv", rows, cols, {c: "s" for c in cols if c.startswith("t_")})
    total["total"] = time.perf_counter() - t_start
    ok = all(r["status"] == "converged" for r in rows)
    write_manifest(outd, "bench-solvers", spec, total, trees=names, converged=ok)
    for r in rows:
        click.echo(f"{r['flow']:>13s} {r['radiation']:>10s} {r['tree']:>22s} {r['status']:>10s} "
                   f"newton={r['newton_iterations']} linear={r['linear_iterations']}")
    _exit(ok)


def main(argv=None) -> int:
    """Entry point; usage errors exit with 1 (2 is reserved for non-convergence)."""
    try:
        cli.main(args=argv, prog_name="ocuflow", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_ERROR
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError, TypeError, KeyError, RuntimeError) as exc:
        # wrongly typed config values can surface as TypeError or KeyError deep in a solve
        click.echo(f"error: {exc}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
