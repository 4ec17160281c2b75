"""Command-line experiment runner.

Every subcommand reads an optional JSON config (``--config``) whose keys are
the long flag names with dashes replaced by underscores; flags given on the
command line win.  CSV rows carry a short hash of the resolved config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_INCONCLUSIVE = 2
EXIT_CONFIG = 3
EXIT_UNKNOWN_MAP = 4
EXIT_BAD_GRID = 5
EXIT_UNWRITABLE = 6

# neutral-point maps need the holding adversary to expose their worst case
DEFAULT_NOISE = {"circle_example": "adversarial"}

DEFAULTS: Dict[str, Dict[str, object]] = {
    "common": {"seed": 0, "out": None, "jobs": 1, "map": None},
    "shadow": {"d": 1e-4, "n": 100, "noise": None, "solver": "auto", "start": None},
    "exponent": {
        "d_start": 1e-6,
        "d_stop": 1e-3,
        "d_points": 8,
        "window": "power",
        "n": 100,
        "C": 1.0,
        "omega": 0.5,
        "trials": 32,
        "noise": None,
        "solver": "auto",
        "theta_min": None,
        "theta_max": None,
    },
    "circle-verify": {"runs": 1000, "noise": "both"},
    "cocycle": {
        "file": None,
        "op": "info",
        "p0": None,
        "k0": 0,
        "k1": 199,
        "i": None,
        "N": 10,
        "w": None,
        "samples": 16,
        "N_grid": "10,20,40,80,160",
        "export": None,
    },
    "dichotomy": {"file": None, "check": "property-a", "p0": None, "horizon": 100, "T": 30, "N": 2},
    "bridge": {"op": "lift", "runs": 1000, "N_grid": "10,20,40,80", "orbits": 4, "samples": 8},
}


class ConfigError(Exception):
    code = EXIT_CONFIG


class UnknownMap(ConfigError):
    code = EXIT_UNKNOWN_MAP


class BadGrid(ConfigError):
    code = EXIT_BAD_GRID


class Unwritable(ConfigError):
    code = EXIT_UNWRITABLE


def _floats(text) -> List[float]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="holsh", description="Hoelder shadowing experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--map", help="catalog map name")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
        p.add_argument("--out", help="output path (CSV or JSON)")
        p.add_argument("--jobs", type=int, help="worker processes over grid cells")

    p = sub.add_parser("shadow", help="shadow one pseudotrajectory")
    common(p)
    p.add_argument("--d", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--noise", choices=["none", "uniform", "adversarial"])
    p.add_argument("--solver", choices=["auto", "optimal", "newton"])
    p.add_argument("--start", help="comma-separated start point")

    p = sub.add_parser("exponent", help="fit the Hoelder exponent over a d grid")
    common(p)
    p.add_argument("--d-start", type=float, dest="d_start")
    p.add_argument("--d-stop", type=float, dest="d_stop")
    p.add_argument("--d-points", type=int, dest="d_points")
    p.add_argument("--window", choices=["fixed", "power"])
    p.add_argument("--n", type=int, help="window length for --window fixed")
    p.add_argument("--C", type=float, help="window constant: n = C d^-omega")
    p.add_argument("--omega", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--noise", choices=["none", "uniform", "adversarial"])
    p.add_argument("--solver", choices=["auto", "optimal", "newton"])
    p.add_argument("--theta-min", type=float, dest="theta_min", help="pass/fail lower bound")
    p.add_argument("--theta-max", type=float, dest="theta_max", help="pass/fail upper bound")

    p = sub.add_parser("circle-verify", help="bounds near the neutral fixed point")
    common(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--noise", choices=["uniform", "adversarial", "both"])

    p = sub.add_parser("cocycle", help="cocycle files, min-sup, Q and slow growth")
    common(p)
    p.add_argument("--file", help="cocycle file ('m k0 k1 R' header, one matrix per line)")
    p.add_argument("--op", choices=["info", "solve", "Q", "fit", "export"])
    p.add_argument("--p0", help="orbit start when building from --map")
    p.add_argument("--k0", type=int)
    p.add_argument("--k1", type=int)
    p.add_argument("--i", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--w", help="constant forcing vector, comma-separated")
    p.add_argument("--samples", type=int)
    p.add_argument("--N-grid", dest="N_grid")
    p.add_argument("--export", help="write the cocycle to this file")

    p = sub.add_parser("dichotomy", help="dichotomy, transversality, trichotomy, Property A")
    common(p)
    p.add_argument("--file")
    p.add_argument("--check", choices=["property-a", "detect", "transversality", "trichotomy"])
    p.add_argument("--p0")
    p.add_argument("--horizon", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--N", type=int)

    p = sub.add_parser("bridge", help="lift, residual and growth experiments")
    common(p)
    p.add_argument("--op", choices=["lift", "residual", "growth"])
    p.add_argument("--runs", type=int)
    p.add_argument("--N-grid", dest="N_grid")
    p.add_argument("--orbits", type=int)
    p.add_argument("--samples", type=int)
    return ap


def resolve(args: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults < config file < flags."""
    known = dict(DEFAULTS["common"])
    known.update(DEFAULTS[args.command])
    cfg: Dict[str, object] = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(cfg) - set(known) - {"command"}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
    out = {"command": args.command}
    for key, default in known.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else cfg.get(key, default)
    return out


def config_hash(cfg: Dict[str, object]) -> str:
    keep = {k: v for k, v in cfg.items() if k not in ("out", "jobs")}
    blob = json.dumps(keep, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def write_csv(rows: Sequence[dict], columns: Sequence[str], cfg: Dict[str, object]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(list(columns) + ["config_hash"])
    h = config_hash(cfg)
    for row in rows:
        wr.writerow([_fmt(row[c]) for c in columns] + [h])
    text = buf.getvalue()
    emit(text, cfg.get("out"))
    return text


def emit(text: str, path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise Unwritable(f"cannot write {path}: {exc}") from exc


def record(fields: Dict[str, object]) -> str:
    """One-line structured text record: key=value pairs."""
    return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())


def _check_writable(cfg):
    path = cfg.get("out")
    if path is None:
        return
    try:
        with open(path, "a"):
            pass
    except OSError as exc:
        raise Unwritable(f"cannot write {path}: {exc}") from exc


def _map(cfg):
    from .maps import get_map

    name = cfg.get("map")
    if not name:
        raise UnknownMap("a --map is required")
    try:
        return get_map(str(name))
    except KeyError as exc:
        raise UnknownMap(f"unknown map {name!r}") from exc


def _point(text, dim):
    vals = _floats(text)
    if len(vals) != dim:
        raise ConfigError(f"expected {dim} coordinates, got {text!r}")
    return np.array(vals)


# --------------------------------------------------------------------------
# subcommands


def cmd_shadow(cfg) -> int:
    from .pseudo import DivergenceError, NoiseModel, generate, shadow_newton, shadow_optimal, validate

    fmap = _map(cfg)
    _check_writable(cfg)
    d, n = float(cfg["d"]), int(cfg["n"])
    if not d > 0 or n < 1:
        raise BadGrid("need d > 0 and n >= 1")
    rng = np.random.default_rng(int(cfg["seed"]))
    if cfg["start"] is not None:
        start = _point(cfg["start"], fmap.dim)
    elif fmap.sample_start is not None:
        start = fmap.sample_start(rng, d)
    else:
        raise ConfigError(f"map {fmap.name!r} needs --start")
    noise = cfg["noise"] or DEFAULT_NOISE.get(fmap.name, "uniform")
    traj = generate(fmap, start, n, NoiseModel(noise, d, int(cfg["seed"])), rng)
    val = validate(fmap, traj, d)
    solver = cfg["solver"]
    if solver == "auto":
        solver = "optimal" if fmap.dim == 1 else "newton"
    try:
        res = shadow_optimal(fmap, traj) if solver == "optimal" else shadow_newton(fmap, traj)
    except DivergenceError as exc:
        emit(record({"status": "diverged", "error": str(exc)}) + "\n", cfg["out"])
        return EXIT_INCONCLUSIVE
    out = {
        "map": fmap.name,
        "d": d,
        "n": n,
        "noise": noise,
        "valid": val.ok,
        "max_defect": val.max_defect,
        "x0": ",".join(repr(float(x)) for x in np.ravel(res.x0)),
        "epsilon": res.epsilon,
        "solver": res.solver,
        "status": res.status,
        "config_hash": config_hash(cfg),
    }
    emit(record(out) + "\n", cfg["out"])
    return EXIT_PASS if res.status in ("ok", "fallback-optimal") else EXIT_INCONCLUSIVE


def _exponent_cell(args):
    from .maps import get_map
    from .pseudo import cell_rng, run_cell

    name, d, n, trials, seed, j, noise, solver = args
    return run_cell(get_map(name), d, n, trials, cell_rng(seed, j), noise, solver)


EXPONENT_COLUMNS = ["map", "d", "n", "trial", "epsilon", "solver", "status"]


def cmd_exponent(cfg) -> int:
    from .pseudo import WindowRule, fit_exponent

    fmap = _map(cfg)
    _check_writable(cfg)
    lo, hi, pts = float(cfg["d_start"]), float(cfg["d_stop"]), int(cfg["d_points"])
    if not (0 < lo < hi < 1) or pts < 4:
        raise BadGrid("d grid must satisfy 0 < d_start < d_stop < 1 with at least 4 points")
    grid = np.geomspace(lo, hi, pts)
    rule = WindowRule(str(cfg["window"]), int(cfg["n"]), float(cfg["C"]), float(cfg["omega"]))
    noise = cfg["noise"] or DEFAULT_NOISE.get(fmap.name, "uniform")
    seed, trials = int(cfg["seed"]), int(cfg["trials"])
    tasks = [(fmap.name, float(d), rule.length(d), trials, seed, j, noise, cfg["solver"]) for j, d in enumerate(grid)]
    jobs = max(1, int(cfg["jobs"]))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_exponent_cell, tasks))
    else:
        cells = [_exponent_cell(t) for t in tasks]
    rows = [r for cell in cells for r in cell]
    fit = fit_exponent(rows)
    write_csv(rows, EXPONENT_COLUMNS, cfg)
    summary = {"theta_hat": fit.theta_hat, "stderr": fit.stderr, "n_cells": fit.n_cells, "failures": fit.failures}
    sys.stderr.write(record(summary) + "\n")
    if not math.isfinite(fit.theta_hat):
        return EXIT_INCONCLUSIVE
    tmin, tmax = cfg["theta_min"], cfg["theta_max"]
    if (tmin is not None and fit.theta_hat < float(tmin)) or (tmax is not None and fit.theta_hat > float(tmax)):
        return EXIT_FAIL
    return EXIT_PASS


CIRCLE_COLUMNS = ["check", "noise", "runs", "checked", "violations", "worst_ratio"]


def cmd_circle_verify(cfg) -> int:
    from .maps import CircleExampleParams, build_circle_example
    from .pseudo import check_backward_cube_root, check_backward_linear, check_neutral_confinement

    _check_writable(cfg)
    params = CircleExampleParams()
    fmap = build_circle_example(params)
    runs = int(cfg["runs"])
    if runs < 1:
        raise BadGrid("runs must be >= 1")
    noises = ["uniform", "adversarial"] if cfg["noise"] == "both" else [cfg["noise"]]
    rows = []
    for j, check in enumerate((check_backward_cube_root, check_neutral_confinement, check_backward_linear)):
        for noise in noises:
            rng = np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), j, noises.index(noise)]))
            r = check(fmap, params, runs, rng, noise=noise)
            rows.append({"check": r.name, "noise": noise, "runs": r.runs, "checked": r.checked, "violations": r.violations, "worst_ratio": r.worst_ratio})
    write_csv(rows, CIRCLE_COLUMNS, cfg)
    return EXIT_PASS if all(r["violations"] == 0 for r in rows) else EXIT_FAIL


def _load_cocycle(cfg):
    from .cocycle import Cocycle, CocycleError

    if cfg.get("file"):
        try:
            return Cocycle.load(cfg["file"])
        except (OSError, CocycleError, ValueError) as exc:
            raise ConfigError(f"cannot load cocycle: {exc}") from exc
    fmap = _map(cfg)
    if cfg.get("p0") is not None:
        p0 = _point(cfg["p0"], fmap.dim)
    elif fmap.sample_start is not None:
        p0 = fmap.sample_start(np.random.default_rng(int(cfg["seed"])), 1e-6)
    else:
        raise ConfigError(f"map {fmap.name!r} needs --p0")
    try:
        return Cocycle.from_orbit(fmap, p0, int(cfg.get("k0", 0)), int(cfg.get("k1", 199)))
    except (CocycleError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_cocycle(cfg) -> int:
    from .cocycle import CocycleError, InhomogeneousProblem, estimate_Q, fit_slow_growth, solve_min_sup

    _check_writable(cfg)
    coc = _load_cocycle(cfg)
    op = cfg["op"]
    i = coc.k0 if cfg["i"] is None else int(cfg["i"])
    N = int(cfg["N"])
    try:
        if op == "export" or cfg.get("export"):
            target = cfg.get("export") or cfg.get("out")
            if target is None:
                raise ConfigError("export needs --export or --out")
            try:
                coc.save(target)
            except OSError as exc:
                raise Unwritable(f"cannot write {target}: {exc}") from exc
            if op == "export":
                return EXIT_PASS
        if op == "info":
            out = {"m": coc.dim, "k0": coc.k0, "k1": coc.k1, "R": coc.R}
        elif op == "solve":
            w = _floats(cfg["w"]) or [1.0] * coc.dim
            if len(w) != coc.dim:
                raise ConfigError("--w must have m entries")
            sol = solve_min_sup(InhomogeneousProblem(coc, i, N, np.tile(w, (N, 1))))
            out = {"i": i, "N": N, "F": sol.F, "v0": ",".join(repr(float(x)) for x in sol.v0)}
        elif op == "Q":
            est = estimate_Q(coc, i, N, int(cfg["samples"]), int(cfg["seed"]))
            out = {"i": i, "N": N, "Q_hat": est.Q_hat, "evaluations": est.evaluations, "lower_bound": True}
        elif op == "fit":
            grid = [int(x) for x in _floats(cfg["N_grid"])]
            if len(grid) < 4 or min(grid) < 1:
                raise BadGrid("N grid needs at least 4 positive entries")
            fit = fit_slow_growth(coc, grid, int(cfg["samples"]), int(cfg["seed"]), i)
            rows = [{"N": int(n), "Q_hat": float(q)} for n, q in zip(fit.N, fit.Q_hat)]
            write_csv(rows, ["N", "Q_hat"], cfg)
            sys.stderr.write(record({"L": fit.L, "gamma_hat": fit.gamma, "residual": fit.residual, "regime": fit.regime}) + "\n")
            return EXIT_PASS
        else:
            raise ConfigError(f"unknown op {op!r}")
    except CocycleError as exc:
        raise BadGrid(str(exc)) from exc
    out["config_hash"] = config_hash(cfg)
    emit(record(out) + "\n", cfg["out"])
    return EXIT_PASS


def cmd_dichotomy(cfg) -> int:
    from .cocycle import Cocycle, CocycleError
    from .dichotomy import WindowTooShort, detect, pliss_transversality, property_A_check, property_A_check_cocycle, trichotomy_1d

    _check_writable(cfg)
    check, T = cfg["check"], int(cfg["T"])
    horizon = int(cfg["horizon"])
    if cfg.get("file"):
        coc = _load_cocycle(cfg)
    else:
        fmap = _map(cfg)
        if cfg.get("p0") is not None:
            p0 = _point(cfg["p0"], fmap.dim)
        elif fmap.sample_start is not None:
            p0 = fmap.sample_start(np.random.default_rng(int(cfg["seed"])), 1e-6)
        else:
            raise ConfigError(f"map {fmap.name!r} needs --p0")
        if check == "property-a":
            rep = property_A_check(fmap, p0, horizon, T)
            emit(record({"A1_fwd": rep.A1_fwd, "A1_bwd": rep.A1_bwd, "A2": rep.A2, "verdict": rep.verdict, "angle": rep.angle, "evidence": "numerical"}) + "\n", cfg["out"])
            return rep.exit_code
        coc = Cocycle.from_orbit(fmap, p0, -horizon, horizon - 1)
    try:
        if check == "property-a":
            rep = property_A_check_cocycle(coc, T)
            emit(record({"A1_fwd": rep.A1_fwd, "A1_bwd": rep.A1_bwd, "A2": rep.A2, "verdict": rep.verdict, "angle": rep.angle, "evidence": "numerical"}) + "\n", cfg["out"])
            return rep.exit_code
        if check == "detect":
            out = {}
            for half in ("forward", "backward"):
                sp = detect(coc, half, T)
                out[f"{half}_found"] = sp is not None
                if sp is not None:
                    out.update({f"{half}_lambda": sp.lam, f"{half}_C": sp.C, f"{half}_H": sp.H, f"{half}_dim_s": sp.dim_s})
            emit(record(out) + "\n", cfg["out"])
            return EXIT_PASS if out["forward_found"] and out["backward_found"] else EXIT_FAIL
        if check == "transversality":
            tr = pliss_transversality(detect(coc, "forward", T), detect(coc, "backward", T))
            emit(record({"status": tr.status, "angle": tr.angle, "sigma_min": tr.sigma_min, "defect_dim": tr.defect_dim}) + "\n", cfg["out"])
            return EXIT_PASS if tr.passed else EXIT_FAIL
        if check == "trichotomy":
            tri = trichotomy_1d(coc, int(cfg["N"]))
            emit(record({"case": tri.case, "N": tri.N, "i1": tri.i1, "i2": tri.i2, "ordered": tri.ordered}) + "\n", cfg["out"])
            return EXIT_PASS if tri.case != "none" else EXIT_FAIL
    except WindowTooShort as exc:
        raise BadGrid(str(exc)) from exc
    except CocycleError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown check {check!r}")


def cmd_bridge(cfg) -> int:
    from .bridge import random_lift, random_residual, sublinear_growth_experiment

    fmap = _map(cfg)
    _check_writable(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    op = cfg["op"]
    if op == "growth":
        grid = [int(x) for x in _floats(cfg["N_grid"])]
        if len(grid) < 4 or min(grid) < 1:
            raise BadGrid("N grid needs at least 4 positive entries")
        starts = []
        for _ in range(int(cfg["orbits"])):
            if fmap.sample_start is not None:
                starts.append(fmap.sample_start(rng, 1e-6))
            else:
                starts.append(fmap.space.wrap(rng.uniform(-0.5, 0.5, fmap.dim)))
        rows = sublinear_growth_experiment(fmap, starts, grid, int(cfg["samples"]), int(cfg["seed"]))
        write_csv(rows, ["map", "orbit_id", "N", "Q_hat", "gamma_hat"], cfg)
        return EXIT_PASS
    runs = int(cfg["runs"])
    if runs < 1:
        raise BadGrid("runs must be >= 1")
    rows = []
    for r in range(runs):
        if op == "lift":
            lift = random_lift(fmap, rng)
            rows.append({"map": fmap.name, "run": r, "d": lift.d, "measured": lift.defect, "bound": lift.bound, "ok": lift.ok})
        else:
            res = random_residual(fmap, rng)
            tn = np.linalg.norm(res.t, axis=1)
            worst = int(np.argmax(tn / res.bound))
            rows.append({"map": fmap.name, "run": r, "d": float(np.linalg.norm(res.c[0])), "measured": float(tn[worst]), "bound": float(res.bound[worst]), "ok": res.ok})
    write_csv(rows, ["map", "run", "d", "measured", "bound", "ok"], cfg)
    return EXIT_PASS if all(r["ok"] for r in rows) else EXIT_FAIL


COMMANDS = {
    "shadow": cmd_shadow,
    "exponent": cmd_exponent,
    "circle-verify": cmd_circle_verify,
    "cocycle": cmd_cocycle,
    "dichotomy": cmd_dichotomy,
    "bridge": cmd_bridge,
}


def run(config: Dict[str, object]) -> int:
    """Run one subcommand from an already-resolved config mapping."""
    command = config.get("command")
    if command not in COMMANDS:
        sys.stderr.write(f"error: unknown command {command!r}\n")
        return EXIT_CONFIG
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    cfg.update(config)
    try:
        return COMMANDS[command](cfg)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
