"""Command-line front end.

    jetreduce run CONFIG.json      [--out DIR] [--tol X] [--seed N] [--refine K]
    jetreduce closure CONFIG.json  [--out DIR] [--tol X] [--seed N]
    jetreduce verify [FIELD.csv ...] CONFIG.json [--out DIR] [--tol X] [--refine K]

Exit codes: 0 all checks passed, 2 configuration error, 3 tangency or
closure failure, 4 numerical blow-up (including domain exit and breaking),
5 solver non-convergence. Each command writes ``report.json`` (schema 1,
floats with 17 significant digits, keys sorted) into the output directory;
``run`` also writes the solution grid as CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import sympy as sp

from .constraint import tangency_check
from .errors import ConfigError, JetReduceError, ResidualCheckFailed, TangencyFailure
from .jetcalc import closure_report
from .oracle import fd_residual
from .problems import Problem, problem_from_config
from .reduce import (CoefficientSet, SolutionField, Trajectory, integrate_reduced, reconstruct,
                     reduced_system)
from .symexpr import to_text

log = logging.getLogger("jetreduce")

SCHEMA = 1
SECTIONS = {"problem", "coeffs", "grid", "init", "tol", "output", "seed", "refine", "closure"}
DEFAULT_TOL = {
    "tangency": 1e-9,
    "tangency_points": 8,
    "closure": 1e-6,
    "closure_samples": 20,
    "residual": 1e-6,
    "order_min": 1.5,
    "max_step": 1e-3,
}


# --------------------------------------------------------------------------
# configuration


@dataclass
class GridSpec:
    x_range: tuple[float, float]
    nx: int
    t_range: tuple[float, float]
    nt: int

    def refined(self, k: int) -> "GridSpec":
        f = 2 ** k
        return GridSpec(self.x_range, (self.nx - 1) * f + 1, self.t_range, (self.nt - 1) * f + 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.nx)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(*self.t_range, self.nt)


@dataclass
class RunConfig:
    problem: Problem
    coeffs: CoefficientSet
    grid: GridSpec
    init: dict
    tol: dict
    out_dir: Path
    field_name: str = "solution.csv"
    report_name: str = "report.json"
    seed: int = 0
    refine: int = 2
    closure: list | None = None
    raw: dict = field(default_factory=dict)


def _axis(spec, name: str) -> tuple[tuple[float, float], int]:
    if isinstance(spec, Mapping):
        try:
            lo, hi = spec["range"] if "range" in spec else (spec["min"], spec["max"])
            n = spec["count"] if "count" in spec else spec["n"]
        except KeyError as exc:
            raise ConfigError(f"grid.{name} lacks {exc.args[0]!r}") from None
    elif isinstance(spec, (list, tuple)) and len(spec) == 3:
        lo, hi, n = spec
    else:
        raise ConfigError(f"grid.{name} must be [min, max, count] or an object")
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ConfigError(f"grid.{name} range [{lo}, {hi}] is degenerate")
    if int(n) != n or int(n) < 9:
        raise ConfigError(f"grid.{name} count must be an integer of at least 9")
    return (lo, hi), int(n)


def _coeff_specs(specs: Mapping, base: Path) -> dict:
    out = {}
    for name, spec in specs.items():
        if isinstance(spec, Mapping) and "table" in spec:
            path = Path(spec["table"])
            path = path if path.is_absolute() else base / path
            try:
                with open(path, newline="") as fh:
                    rows = [r for r in csv.reader(fh) if r]
            except OSError as exc:
                raise ConfigError(f"coefficient table {path}: {exc.strerror}") from None
            if rows and not _is_number(rows[0][0]):
                rows = rows[1:]
            try:
                data = np.array([[float(v) for v in r[:2]] for r in rows])
            except ValueError:
                raise ConfigError(f"coefficient table {path} is not numeric") from None
            if data.ndim != 2 or data.shape[1] != 2:
                raise ConfigError(f"coefficient table {path} needs two columns t,value")
            out[name] = {"t": data[:, 0].tolist(), "values": data[:, 1].tolist()}
        else:
            out[name] = spec
    return out


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def load_config(path, out: str | None = None, tol: float | None = None, seed: int | None = None,
                refine: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    return config_from_dict(raw, base=path.parent, out=out, tol=tol, seed=seed, refine=refine)


def config_from_dict(raw: Mapping, base: Path = Path("."), out: str | None = None,
                     tol: float | None = None, seed: int | None = None,
                     refine: int | None = None) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    if "problem" not in raw:
        raise ConfigError("config needs a 'problem' section")
    problem = problem_from_config(raw["problem"])
    coeffs = problem.coefficients(_coeff_specs(raw.get("coeffs", {}), base))
    grid_raw = {**problem.defaults.get("grid", {}), **raw.get("grid", {})}
    if "x" not in grid_raw or "t" not in grid_raw:
        raise ConfigError("grid needs 'x' and 't'")
    (xr, nx), (tr, nt) = _axis(grid_raw["x"], "x"), _axis(grid_raw["t"], "t")
    init = {**problem.defaults.get("init", {}), **raw.get("init", {})}
    tols = dict(DEFAULT_TOL)
    unknown_tol = set(raw.get("tol", {})) - set(DEFAULT_TOL)
    if unknown_tol:
        raise ConfigError(f"unknown tolerance(s): {sorted(unknown_tol)}")
    tols.update({k: float(v) for k, v in raw.get("tol", {}).items()})
    if tol is not None:
        tols["tangency"] = tols["closure"] = float(tol)
    output = raw.get("output", {})
    out_dir = Path(out if out is not None else output.get("dir", "."))
    if not out_dir.is_absolute() and out is None:
        out_dir = base / out_dir
    seed_v = int(seed if seed is not None else raw.get("seed", 0))
    refine_v = int(refine if refine is not None else raw.get("refine", 2))
    if refine_v < 0:
        raise ConfigError("refine must be non-negative")
    closure = raw.get("closure", {}).get("generators") if isinstance(raw.get("closure"), Mapping) else None
    return RunConfig(problem, coeffs, GridSpec(xr, nx, tr, nt), init, tols, out_dir,
                     output.get("field", "solution.csv"), output.get("report", "report.json"),
                     seed_v, refine_v, closure, dict(raw))


# --------------------------------------------------------------------------
# deterministic JSON


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        return "null"
    s = format(v, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def dumps(obj: Any, indent: int = 0) -> str:
    """JSON with sorted keys and floats printed with 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, sp.Basic):
        return json.dumps(to_text(obj))
    if isinstance(obj, Path):
        return json.dumps(str(obj))
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = ",\n".join(f"{inner}{json.dumps(k)}: {dumps(v, indent + 1)}" for k, v in items)
        return "{\n" + body + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number, type(None))) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _error_entry(exc: BaseException) -> dict:
    d = {"code": getattr(exc, "code", "INTERNAL_ERROR"), "message": str(exc)}
    for attr in ("t", "x", "last_parameter", "position", "point"):
        v = getattr(exc, attr, None)
        if isinstance(v, (int, float)):
            d[attr] = v
    return d


class Report(dict):
    def __init__(self, command: str, cfg: RunConfig | None):
        super().__init__(schema=SCHEMA, command=command, stages=[], status="OK", exit_code=0)
        if cfg is not None:
            self["problem"] = cfg.problem.label
            self["seed"] = cfg.seed
            self["tol"] = cfg.tol
            self["grid"] = {"x": [*cfg.grid.x_range, cfg.grid.nx], "t": [*cfg.grid.t_range, cfg.grid.nt]}
            self["coeffs"] = cfg.coeffs.describe()

    active: str | None = None

    def begin(self, name: str):
        self.active = name

    def stage(self, name: str, **data) -> dict:
        entry = {"name": name, "status": "OK", **data}
        self["stages"].append(entry)
        self.active = None
        return entry

    def fail(self, exc: BaseException) -> int:
        code = getattr(exc, "exit_code", 1)
        self["status"] = getattr(exc, "code", "INTERNAL_ERROR")
        self["exit_code"] = code
        self["error"] = _error_entry(exc)
        if self.active is not None:
            self["stages"].append({"name": self.active, "status": self["status"]})
            self.active = None
        return code


def _write_report(report: Report, cfg: RunConfig | None, out_dir: Path | None) -> Path | None:
    target = out_dir if out_dir is not None else (cfg.out_dir if cfg else None)
    if target is None:
        return None
    target.mkdir(parents=True, exist_ok=True)
    path = target / (cfg.report_name if cfg else "report.json")
    path.write_text(dumps(report) + "\n")
    return path


def _summary(report: Report) -> str:
    line = f"{report['command']} {report.get('problem', '')}: {report['status']} (exit {report['exit_code']})"
    if "error" in report:
        line += f": {report['error']['message']}"
    return line


# --------------------------------------------------------------------------
# pipeline


def _integrate(rs, cfg: RunConfig, grid: GridSpec) -> Trajectory:
    # the integrator wants at least 16 steps; finer steps are subsampled to the grid
    sub = max(1, math.ceil(16 / (grid.nt - 1)))
    tr = integrate_reduced(rs, cfg.init, cfg.coeffs, grid.t_range[0], grid.t_range[1], (grid.nt - 1) * sub)
    if sub == 1:
        return tr
    return Trajectory(tr.t[::sub], tr.values[:, ::sub], tr.names, tr.error_estimate, tr.steps)


def _residual_entry(rep, tol: dict) -> tuple[dict, bool]:
    d = rep.to_dict()
    finest = rep.levels[-1]["l2"] if rep.levels else rep.l2
    order = rep.order
    ok = finest <= tol["residual"] or (order is not None and order >= tol["order_min"])
    d["passed"] = bool(ok)
    return d, ok


def _run_pipeline(cfg: RunConfig, report: Report) -> SolutionField:
    problem = cfg.problem
    report.begin("build_constraint")
    K = problem.constraint()
    ts = K.transversal
    report.stage("transversality", choice=[list(c) for c in ts.choice],
                 functions=[to_text(f) for f in ts.functions], counts=ts.counts)
    pm = K.parameters
    params = {}
    if pm.method == "SYMBOLIC":
        params = {p.name: to_text(pm.expr(p)) for p in pm.params}
    report.stage("solve_parameters", method=pm.method, branches=len(pm.branches), branch=pm.branch,
                 parameters=params)
    st = report.stage("build_constraint", chart=[str(c) for c in K.chart.coords],
                      kdef_jets=[str(kd.jet) for kd in K.kdefs])
    if problem.expected_kdefs and pm.method == "SYMBOLIC":
        st["kdefs"] = [to_text(kd.solved(pm)) for kd in K.kdefs]

    report.begin("tangency_check")
    rng = np.random.default_rng(cfg.seed)
    failed, checks = [], []
    for name, V in zip(problem.coeff_names, problem.all_generators()):
        tr = tangency_check(K, V, points=int(cfg.tol["tangency_points"]), tol=cfg.tol["tangency"], rng=rng)
        checks.append({"coefficient": name, "ok": tr.ok, "residuals": tr.residuals})
        if not tr.ok:
            failed.append(name)
    st = report.stage("tangency_check", points=int(cfg.tol["tangency_points"]), fields=checks)
    if failed:
        st["status"] = TangencyFailure.code
        raise TangencyFailure(f"evolution field(s) of {', '.join(failed)} not tangent to K")

    report.begin("reduced_system")
    rs = reduced_system(problem, K)
    report.stage("reduced_system", state=rs.state_names, guards=[to_text(g) for g in rs.guards],
                 parameter_rates_decoupled=list(rs.psi_decoupled),
                 t_rhs={str(k): to_text(v) for k, v in rs.t_rhs().items()},
                 x_rhs={str(y): to_text(v) for y, v in zip(rs.fibre, rs.x_rhs)})

    fields = []
    for k in range(cfg.refine + 1):
        grid = cfg.grid.refined(k)
        report.begin("integrate_reduced")
        tr = _integrate(rs, cfg, grid)
        if k == 0:
            report.stage("integrate_reduced", steps=tr.steps, error_estimate=tr.error_estimate.tolist(),
                         final=tr.final())
        report.begin("reconstruct")
        fld = reconstruct(rs, tr, grid.x, max_step=cfg.tol["max_step"], label=problem.label)
        if k == 0:
            bps = fld.meta.get("branch_points", [])
            report.stage("reconstruct", nx=grid.nx, nt=grid.nt,
                         max_abs={c: float(np.max(np.abs(v))) for c, v in fld.values.items()},
                         branch_points=sorted({round(p, 12) for row in bps for p in row}))
        fields.append(fld)

    report.begin("fd_residual")
    rep = fd_residual(fields[0], problem, cfg.coeffs, refined=fields[1:])
    entry, ok = _residual_entry(rep, cfg.tol)
    st = report.stage("fd_residual", **entry)
    if not ok:
        st["status"] = ResidualCheckFailed.code
        raise ResidualCheckFailed("finite-difference residual neither small nor converging")
    return fields[0]


def cmd_run(cfg: RunConfig) -> tuple[int, Report]:
    report = Report("run", cfg)
    try:
        fld = _run_pipeline(cfg, report)
    except JetReduceError as exc:
        return report.fail(exc), report
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    fld.to_csv(cfg.out_dir / cfg.field_name)
    report["field"] = cfg.field_name
    return 0, report


def _parse_family(problem: Problem, family: Sequence) -> list:
    from .jetcalc import Generator

    out = []
    for g in family:
        comps = g if isinstance(g, (list, tuple)) else [g]
        if len(comps) != problem.n:
            raise ConfigError(f"closure generator {g!r} needs {problem.n} component(s)")
        out.append(Generator(tuple(problem.parse(c) for c in comps), problem.space))
    return out


def cmd_closure(cfg: RunConfig) -> tuple[int, Report]:
    report = Report("closure", cfg)
    try:
        gens = _parse_family(cfg.problem, cfg.closure) if cfg.closure else cfg.problem.closure_family()
        rep = closure_report(gens, samples=int(cfg.tol["closure_samples"]), tol=cfg.tol["closure"],
                             rng=np.random.default_rng(cfg.seed), fixed=cfg.problem.constant_symbols)
    except JetReduceError as exc:
        return report.fail(exc), report
    except ValueError as exc:
        return report.fail(ConfigError(str(exc))), report
    report.stage("closure_report", generators=[[to_text(c) for c in g.components] for g in gens],
                 **rep.to_dict())
    if not rep.closed:
        report["status"] = "CLOSURE_FAILURE"
        report["exit_code"] = 3
        report["stages"][-1]["status"] = "CLOSURE_FAILURE"
        return 3, report
    return 0, report


def _subsample(fld: SolutionField, k: int) -> SolutionField:
    f = 2 ** k
    if (fld.t_grid.size - 1) % f or (fld.x_grid.size - 1) % f:
        raise ConfigError(f"field grid cannot be coarsened {k} time(s) by a factor 2")
    return SolutionField(fld.t_grid[::f], fld.x_grid[::f], {c: v[::f, ::f] for c, v in fld.values.items()})


def cmd_verify(cfg: RunConfig, paths: Sequence[Path]) -> tuple[int, Report]:
    """Residual of stored fields. One file is coarsened ``refine`` times to estimate the order."""
    report = Report("verify", cfg)
    try:
        if not paths:
            paths = [cfg.out_dir / cfg.field_name]
        try:
            flds = [SolutionField.from_csv(p) for p in paths]
        except OSError as exc:
            raise ConfigError(f"cannot read field {exc.filename}: {exc.strerror}") from None
        if len(flds) == 1 and cfg.refine > 0:
            k = cfg.refine
            while k > 0 and ((flds[0].t_grid.size - 1) % 2 ** k or (flds[0].x_grid.size - 1) % 2 ** k
                             or (flds[0].x_grid.size - 1) // 2 ** k < 8):
                k -= 1
            flds = [_subsample(flds[0], j) for j in range(k, 0, -1)] + flds
        flds.sort(key=lambda f: f.x_grid.size)
        rep = fd_residual(flds[0], cfg.problem, cfg.coeffs, refined=flds[1:])
        entry, ok = _residual_entry(rep, cfg.tol)
        report.stage("fd_residual", files=[str(p) for p in paths], **entry)
        if not ok:
            report["stages"][-1]["status"] = ResidualCheckFailed.code
            raise ResidualCheckFailed("finite-difference residual neither small nor converging")
    except JetReduceError as exc:
        return report.fail(exc), report
    return 0, report


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jetreduce", description="Differential-constraint reduction of "
                                 "evolution equations with time-dependent forcing.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run the full reduction pipeline"),
                           ("closure", "test the generator family for closure"),
                           ("verify", "finite-difference residual of stored solution fields")):
        p = sub.add_parser(name, help=helptext)
        if name == "verify":
            p.add_argument("paths", nargs="+", help="[FIELD.csv ...] CONFIG.json")
        else:
            p.add_argument("config")
        p.add_argument("--out", help="output directory (default: config output.dir or the config's folder)")
        p.add_argument("--tol", type=float, help="zero-test tolerance for tangency and closure")
        p.add_argument("--seed", type=int, help="seed for the sampling RNG")
        p.add_argument("--refine", type=int, help="number of grid refinements for the order estimate")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        config_path = args.paths[-1]
        field_paths = [Path(p) for p in args.paths[:-1]]
    else:
        config_path, field_paths = args.config, []
    cfg = None
    try:
        cfg = load_config(config_path, out=args.out, tol=args.tol, seed=args.seed, refine=args.refine)
    except JetReduceError as exc:
        report = Report(args.command, None)
        code = report.fail(exc)
        _write_report(report, None, Path(args.out) if args.out else None)
        print(_summary(report), file=sys.stderr)
        return code
    if args.command == "run":
        code, report = cmd_run(cfg)
    elif args.command == "closure":
        code, report = cmd_closure(cfg)
    else:
        code, report = cmd_verify(cfg, field_paths)
    path = _write_report(report, cfg, None)
    print(_summary(report) + (f" -> {path}" if path else ""), file=sys.stderr if code else sys.stdout)
    return code


if __name__ == "__main__":
    sys.exit(main())
