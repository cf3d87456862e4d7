"""Command-line interface.

Every solve writes its output file and, beside it, ``<out>.manifest.json``
with the config digest, seed, version, timings, warnings and every
effective setting (defaults included).  ``--manifest`` replays a run from
such a file; flags given next to it still win.

Exit codes: 0 success, 2 invalid problem or config, 3 solver failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import PicardConfig, solve_semilinear
from .config import build_problem, config_digest, load_config, parse_field
from .errors import (
    ConfigError,
    DriverBlowup,
    EllipticMCError,
    GaugeOverflow,
    NewtonDiverged,
    NoConvergence,
    SolverStall,
    StageError,
    TooManyCensored,
    ValidationError,
)
from .feynman_kac import estimate_gauge, gauge_is_unstable, solve_linear, solve_linear_gauged
from .fixtures import get_fixture
from .grid import GridFunction
from .htransform import check_gauge_condition, default_delta, solve_general, transform_trace_summary
from .oracle import fd_assemble, fd_solve_linear, fd_solve_semilinear
from .problem import CHECK_ERRORS, validate_problem
from .sde import SimConfig, simulate_path, write_paths

log = logging.getLogger("ellipticmc")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

# defaults echoed into every manifest
DEFAULTS = {
    "n_paths": 10_000,
    "dt": 1e-3,
    "seed": 0,
    "t_max": 50.0,
    "bridge_correction": True,
    "div_step": 1e-5,
    "censor_limit": 1e-3,
    "trapezoid": False,
    "grid": None,
    "aux_grid": None,
    "tol": None,
    "max_iters": 15,
    "theta": "auto",
    "control_variate": "auto",
    "points": None,
}


class UsageError(Exception):
    pass


# -- settings -----------------------------------------------------------------


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _resolve(args, cfg: dict, fixture_settings: dict) -> dict:
    """defaults < fixture settings < config 'run' < manifest settings < flags."""
    out = dict(DEFAULTS)
    for key in DEFAULTS:
        if key in fixture_settings:
            out[key] = fixture_settings[key]
    fixture_alias = {"dims": "grid", "aux_dims": "aux_grid"}
    for src, dst in fixture_alias.items():
        if src in fixture_settings:
            out[dst] = list(fixture_settings[src])
    run = dict(cfg.get("run", {}))
    unknown = set(run) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown run settings: {sorted(unknown)}")
    out.update(run)
    flags = {
        "n_paths": getattr(args, "paths", None),
        "dt": getattr(args, "dt", None),
        "seed": getattr(args, "seed", None),
        "t_max": getattr(args, "t_max", None),
        "tol": getattr(args, "tol", None),
        "max_iters": getattr(args, "max_iters", None),
        "theta": getattr(args, "theta", None),
        "grid": _csv_ints(args.grid) if getattr(args, "grid", None) else None,
        "aux_grid": _csv_ints(args.aux_grid) if getattr(args, "aux_grid", None) else None,
    }
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    if getattr(args, "no_bridge", False):
        out["bridge_correction"] = False
    if getattr(args, "trapezoid", False):
        out["trapezoid"] = True
    if getattr(args, "no_control_variate", False):
        out["control_variate"] = False
    if getattr(args, "control_variate", False):
        out["control_variate"] = True
    if getattr(args, "points", None):
        out["points"] = read_points(args.points)
    if isinstance(out["theta"], str) and out["theta"] != "auto":
        out["theta"] = float(out["theta"])
    out["n_paths"] = int(out["n_paths"])
    out["seed"] = int(out["seed"])
    return out


def _sim_config(s: dict) -> SimConfig:
    return SimConfig(dt=float(s["dt"]), t_max=float(s["t_max"]),
                     bridge_correction=bool(s["bridge_correction"]),
                     div_step=float(s["div_step"]), seed=s["seed"],
                     censor_limit=float(s["censor_limit"]))


def _picard_config(s: dict) -> PicardConfig:
    if not s["grid"]:
        raise ConfigError("a grid is needed: --grid n1,n2,...")
    return PicardConfig(dims=tuple(s["grid"]), n_paths=s["n_paths"], dt=float(s["dt"]), seed=s["seed"],
                        max_iters=int(s["max_iters"]), tol_sup=s["tol"], theta=s["theta"],
                        t_max=float(s["t_max"]), bridge_correction=bool(s["bridge_correction"]),
                        div_step=float(s["div_step"]), censor_limit=float(s["censor_limit"]),
                        control_variate=s["control_variate"])


def _load(args):
    """(problem, config dict, effective settings) from --problem / --manifest."""
    if getattr(args, "manifest", None):
        man = json.loads(Path(args.manifest).read_text())
        run_settings = {k: v for k, v in man.get("settings", {}).items() if k in DEFAULTS}
        cfg = load_config(args.problem) if args.problem else dict(man["config"])
        cfg["run"] = run_settings
    elif getattr(args, "problem", None):
        cfg = load_config(args.problem)
    else:
        raise UsageError("--problem (a config file or registry:<name>) is required")
    fixture_settings = {}
    if isinstance(cfg["problem"], str) and cfg["problem"].startswith("registry:"):
        fixture_settings = get_fixture(cfg["problem"].split(":", 1)[1]).settings
    p = build_problem(cfg)
    settings = _resolve(args, cfg, fixture_settings)
    return p, cfg, settings


# -- outputs --------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def read_points(path) -> list[list[float]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise ConfigError(f"{path}: non-numeric row {row}")
                continue    # header
    if not rows:
        raise ConfigError(f"{path}: no points")
    return rows


def write_manifest(out_path, command: str, cfg: dict, settings: dict, timings: dict,
                   warnings: list[str], extra: dict | None = None) -> Path:
    man = {
        "tool": "ellipticmc",
        "version": __version__,
        "command": command,
        "config_digest": config_digest({"problem": cfg["problem"], "run": settings}),
        "seed": settings.get("seed"),
        "config": {k: v for k, v in cfg.items() if k != "run"},
        "settings": settings,
        "timings": timings,
        "wall_time": float(sum(timings.values())),
        "warnings": warnings,
        "output": str(out_path),
    }
    if extra:
        man.update(extra)
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if callable(o):
        return getattr(o, "__name__", "callable")
    return str(o)


def _emit(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


# -- subcommands ------------------------------------------------------------------


def cmd_validate(args) -> int:
    p, cfg, _ = _load(args)
    report = validate_problem(p, n_samples=args.samples, rng_seed=args.rng_seed, strict=False)
    for c in report.checks:
        status = "skip" if c.skipped else ("pass" if c.passed else "FAIL")
        _emit(args, f"{status} {c.name}: worst margin {c.worst_margin:.6g}"
                    + (f" at {np.round(c.witness, 6).tolist()}" if c.witness is not None else "")
                    + (f" ({c.detail})" if c.detail else ""))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, default=_json_default) + "\n")
    if report.passed:
        _emit(args, "problem is valid")
        return EXIT_OK

    for c in report.failures():
        cls = CHECK_ERRORS.get(c.name, ValidationError).__name__
        print(f"{cls}: {c.name} check failed, worst margin {c.worst_margin:.3g} at "
              f"{np.round(c.witness, 6).tolist()}" + (f"; {c.detail}" if c.detail else ""),
              file=sys.stderr)
    return EXIT_INVALID


def cmd_solve_linear(args) -> int:
    p, cfg, s = _load(args)
    if not s["points"]:
        raise ConfigError("no evaluation points: give --points <csv> or run.points")
    pts = np.atleast_2d(np.asarray(s["points"], dtype=float))
    sim = _sim_config(s)
    timings = {}
    t0 = time.perf_counter()
    if args.gauged:
        ests = solve_linear_gauged(p, pts, s["n_paths"], sim, trapezoid=s["trapezoid"])
    else:
        ests = solve_linear(p, pts, s["n_paths"], sim, trapezoid=s["trapezoid"])
    timings["simulate"] = time.perf_counter() - t0
    warnings = list(ests[0].warnings) if ests else []
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"x_{k + 1}" for k in range(p.d)] + ["mean", "std_error", "ci_lo", "ci_hi", "n_censored"]
        if args.gauged:
            header.append("max_exponent")
        w.writerow(header)
        for x, e in zip(pts, ests):
            lo, hi = e.ci95
            row = [_fmt(v) for v in x] + [_fmt(e.mean), _fmt(e.std_error), _fmt(lo), _fmt(hi), e.n_censored]
            if args.gauged:
                row.append(_fmt(e.max_exponent))
            w.writerow(row)
    if args.dump_paths:
        _dump_paths(p, pts[0], sim, args.dump_paths, args.dump_count)
    extra = {}
    if args.gauged:
        extra["max_exponents"] = [e.max_exponent for e in ests]
        for x, e in zip(pts, ests):
            if gauge_is_unstable(e):
                warnings.append(f"gauge at {x.tolist()} looks unstable (max exponent {e.max_exponent:.3g})")
    write_manifest(out, "solve-linear", cfg, s, timings, warnings, extra)
    for x, e in zip(pts, ests):
        _emit(args, f"{x.tolist()}: {e.mean:.6g} +- {e.std_error:.2g}")
    return EXIT_OK


def _dump_paths(p, x0, sim: SimConfig, path, count: int) -> None:
    with open(path, "wb") as fh:
        write_paths(fh, [simulate_path(p, x0, sim, path_index=i) for i in range(count)])


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "sup_diff", "noise_floor"])
        for k, dsup, floor in trace.to_rows():
            w.writerow([k, _fmt(dsup), _fmt(floor)])


def _trace_info(trace) -> dict:
    return {"iterations": trace.iterations, "converged": trace.converged, "theta": trace.theta,
            "tol": trace.tol, "sup_diffs": trace.sup_diffs, "noise_floors": trace.noise_floors,
            "mean_exit_max": trace.mean_exit_max, "lipschitz_y": trace.lipschitz_y,
            "n_censored": trace.n_censored}


def cmd_solve_semilinear(args) -> int:
    p, cfg, s = _load(args)
    pc = _picard_config(s)
    t0 = time.perf_counter()
    u, trace = solve_semilinear(p, pc)
    timings = {"picard": time.perf_counter() - t0}
    u.save(args.out)
    if args.trace:
        _write_trace(args.trace, trace)
    write_manifest(args.out, "solve-semilinear", cfg, s, timings, list(trace.warnings),
                   {"trace": _trace_info(trace)})
    _emit(args, f"converged in {trace.iterations} iterations (last sup diff "
                f"{trace.sup_diffs[-1]:.3g}, tolerance {trace.tol:.3g})")
    return EXIT_OK


def cmd_solve_general(args) -> int:
    p, cfg, s = _load(args)
    pc = _picard_config(s)
    aux = s["aux_grid"] or [4 * n + 1 for n in s["grid"]]
    s["aux_grid"] = list(aux)
    t0 = time.perf_counter()
    u, trace, data = solve_general(p, aux, pc)
    timings = {"general": time.perf_counter() - t0}
    u.save(args.out)
    if args.trace:
        _write_trace(args.trace, trace)
    if args.dump_v:
        data.v.save(args.dump_v)
    write_manifest(args.out, "solve-general", cfg, s, timings, list(trace.warnings),
                   {"trace": _trace_info(trace), "transform": transform_trace_summary(trace, data)})
    _emit(args, f"converged in {trace.iterations} iterations; sup |v| = "
                f"{float(np.max(np.abs(data.v.values))):.4g}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    p, cfg, s = _load(args)
    if not s["grid"]:
        raise ConfigError("a grid is needed: --grid n1,n2,...")
    t0 = time.perf_counter()
    sys_ = fd_assemble(p, s["grid"], upwind=not args.central)
    timings = {"assemble": time.perf_counter() - t0}
    t0 = time.perf_counter()
    extra = {}
    if p.mode == "semilinear":
        u, tr = fd_solve_semilinear(sys_, p.driver)
        extra["newton_residuals"] = tr.residuals
    else:
        u = fd_solve_linear(sys_)
    timings["solve"] = time.perf_counter() - t0
    u.save(args.out)
    write_manifest(args.out, "oracle", cfg, s, timings, [], extra)
    _emit(args, f"FD solution on {tuple(s['grid'])} written to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = GridFunction.load(args.a)
    b = GridFunction.load(args.b)
    nodes = a.nodes()
    bv = b(nodes) if (a.dims != b.dims or not np.allclose(a.lo, b.lo) or not np.allclose(a.hi, b.hi)) \
        else b.values.reshape(-1)
    av = a.values.reshape(-1)
    keep = np.ones(nodes.shape[0], dtype=bool)
    if args.problem:
        p = build_problem(load_config(args.problem))
        keep = np.asarray(p.domain.contains(nodes), dtype=bool)
    diff = av - bv
    sup = float(np.max(np.abs(diff[keep]))) if np.any(keep) else 0.0
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{k + 1}" for k in range(a.d)] + ["a", "b", "diff", "interior"])
        for x, u, v, dd, k in zip(nodes, av, bv, diff, keep):
            w.writerow([_fmt(t) for t in x] + [_fmt(u), _fmt(v), _fmt(dd), int(k)])
    print(f"sup_diff={sup!r}")
    return EXIT_OK


def cmd_gauge(args) -> int:
    p, cfg, s = _load(args)
    x = np.asarray([float(t) for t in args.point.split(",")])
    sim = _sim_config(s)
    t0 = time.perf_counter()
    if args.transform:
        from .htransform import prepare_transform
        aux = s["aux_grid"] or [41] * p.d
        data = prepare_transform(p, aux)
        delta = args.delta if args.delta is not None else default_delta(p)
        est = check_gauge_condition(data, x, delta, s["n_paths"], sim)
    else:
        extra = parse_field(args.extra, "scalar", p.d) if args.extra else None
        est = estimate_gauge(p, x, extra, s["n_paths"], sim)
    timings = {"simulate": time.perf_counter() - t0}
    unstable = gauge_is_unstable(est)
    warnings = list(est.warnings)
    if unstable:
        warnings.append(f"gauge looks unstable: relative SE {est.std_error / abs(est.mean):.3g}, "
                        f"max exponent {est.max_exponent:.3g}")
    result = {"mean": est.mean, "std_error": est.std_error, "max_exponent": est.max_exponent,
              "n_paths": est.n_paths, "unstable": unstable}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        write_manifest(args.out, "gauge", cfg, s, timings, warnings)
    _emit(args, f"gauge {est.mean:.6g} +- {est.std_error:.2g}, max exponent "
                f"{est.max_exponent:.4g}{' UNSTABLE' if unstable else ''}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    failed = 0
    for name, check in selftest_checks():
        try:
            ok = bool(check())
        except Exception as exc:    # a crash is a failure, reported as such
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        failed += not ok
        _emit(args, f"{'pass' if ok else 'FAIL'} {name}")
    return EXIT_OK if failed == 0 else EXIT_INVALID


def selftest_checks():
    """Closed-form sanity checks that run in well under a second."""
    from .problem import Driver, EllipticProblem, MatrixField, ScalarField, fold_q_into_driver
    from .sde import diffusion_factor, effective_drift
    from .domain import Box

    def chol(m, expect):
        return np.allclose(diffusion_factor(np.asarray(m, float)), expect, atol=1e-12)

    def drift_1d():
        a = MatrixField(lambda x: (1 + x[:, 0] ** 2)[:, None, None], 1,
                        div=lambda x: 2 * x)
        p = EllipticProblem(Box([-1.0], [1.0]), a, ScalarField.zero(1), 1.0, 2.0)
        return abs(effective_drift(p, np.array([0.5]))[0] - 0.5) < 1e-12

    def fold():
        box = Box([-2.0, -2.0], [2.0, 2.0])
        p = EllipticProblem(box, MatrixField.identity(2), ScalarField.zero(2), 1.0, 1.0,
                            q=ScalarField(lambda x: -np.einsum("ij,ij->i", x, x), 2),
                            driver=Driver.linear_decay(2, 1.0), mode="semilinear")
        return fold_q_into_driver(p)(np.array([[1.0, 0.0]]), np.array([2.0]), np.zeros((1, 2)))[0] == -4.0

    def gauge_one():
        p = EllipticProblem(Box([-1.0], [1.0]), MatrixField.identity(1), ScalarField.const(1.0, 1), 1.0, 1.0)
        e = estimate_gauge(p, [0.0], None, 50, SimConfig(dt=1e-2))
        return e.mean == 1.0 and e.std_error == 0.0

    def const_boundary():
        p = EllipticProblem(Box([-1.0], [1.0]), MatrixField.identity(1), ScalarField.const(2.5, 1), 1.0, 1.0)
        e = solve_linear(p, [[0.3]], 50, SimConfig(dt=1e-2))[0]
        return e.mean == 2.5 and e.std_error == 0.0

    def grid_roundtrip():
        g = GridFunction.from_function(lambda x: x[:, 0] - 2 * x[:, 1], [0, 0], [1, 2], (3, 4))
        return np.array_equal(GridFunction.from_bytes(g.to_bytes()).values, g.values)

    return [
        ("cholesky of I", lambda: chol(np.eye(2), np.eye(2))),
        ("cholesky of diag(4,1)", lambda: chol(np.diag([4.0, 1.0]), np.diag([2.0, 1.0]))),
        ("cholesky of [[2,1],[1,2]]", lambda: chol([[2, 1], [1, 2]],
                                                   [[math.sqrt(2), 0], [1 / math.sqrt(2), math.sqrt(1.5)]])),
        ("Ito drift for a = 1 + x^2", drift_1d),
        ("folded driver at x = (1, 0), y = 2", fold),
        ("gauge with q = 0 is 1", gauge_one),
        ("constant boundary data", const_boundary),
        ("grid file round trip", grid_roundtrip),
    ]


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ellipticmc", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"ellipticmc {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def problem_args(sp, sim=True):
        sp.add_argument("--problem", help="config file or registry:<name>")
        sp.add_argument("--manifest", help="replay the settings of a previous run")
        if sim:
            sp.add_argument("--paths", type=int)
            sp.add_argument("--dt", type=float)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--t-max", type=float)
            sp.add_argument("--no-bridge", action="store_true", help="disable the Brownian-bridge exit test")

    sp = sub.add_parser("validate", help="check ellipticity and driver conditions")
    problem_args(sp, sim=False)
    sp.add_argument("--samples", type=int, default=256)
    sp.add_argument("--rng-seed", type=int, default=0)
    sp.add_argument("--out")

    sp = sub.add_parser("solve-linear", help="Feynman-Kac estimates at points")
    problem_args(sp)
    sp.add_argument("--points", help="CSV of evaluation points")
    sp.add_argument("--gauged", action="store_true", help="E[exp(int q) phi(X_tau)] instead")
    sp.add_argument("--trapezoid", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-paths")
    sp.add_argument("--dump-count", type=int, default=10)

    for name, help_ in (("solve-semilinear", "Picard iteration on a grid"),
                        ("solve-general", "h-transform then Picard iteration")):
        sp = sub.add_parser(name, help=help_)
        problem_args(sp)
        sp.add_argument("--grid")
        sp.add_argument("--tol", type=float)
        sp.add_argument("--max-iters", type=int)
        sp.add_argument("--theta")
        cv = sp.add_mutually_exclusive_group()
        cv.add_argument("--no-control-variate", action="store_true")
        cv.add_argument("--control-variate", action="store_true",
                        help="use the control variate even for a zero driver")
        sp.add_argument("--out", required=True)
        sp.add_argument("--trace")
        if name == "solve-general":
            sp.add_argument("--aux-grid")
            sp.add_argument("--dump-v")

    sp = sub.add_parser("oracle", help="finite-difference reference solution")
    problem_args(sp, sim=False)
    sp.add_argument("--grid")
    sp.add_argument("--central", action="store_true", help="central instead of upwind drift")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("compare", help="nodewise difference of two grid files")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--problem", help="restrict the sup to nodes inside this problem's domain")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("gauge", help="estimate E[exp(int (q + extra))] at a point")
    problem_args(sp)
    sp.add_argument("--point", required=True, help="comma-separated coordinates")
    sp.add_argument("--extra", help="scalar field spec added to q")
    sp.add_argument("--transform", action="store_true", help="gauge of the h-transformed problem")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--aux-grid")
    sp.add_argument("--out")

    sub.add_parser("selftest", help="quick closed-form checks")
    return ap


COMMANDS = {
    "validate": cmd_validate,
    "solve-linear": cmd_solve_linear,
    "solve-semilinear": cmd_solve_semilinear,
    "solve-general": cmd_solve_general,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
    "gauge": cmd_gauge,
    "selftest": cmd_selftest,
}

_SOLVER_ERRORS = (NoConvergence, NewtonDiverged, SolverStall, TooManyCensored, GaugeOverflow,
                  DriverBlowup)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, (ValidationError, ConfigError, UsageError)):
        return EXIT_INVALID
    if isinstance(exc, _SOLVER_ERRORS):
        return EXIT_SOLVER
    if isinstance(exc, (OSError, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(exc, EllipticMCError):
        return EXIT_SOLVER
    if isinstance(exc, ValueError) and "grid file" in str(exc):
        return EXIT_IO
    raise exc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (EllipticMCError, UsageError, OSError, ValueError) as exc:
        code = exit_code_for(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
