"""Command-line driver.

Subcommands: run, validate-hypergrad, sweep-selection, probe-kinks,
sample-diag, list-problems. Exit codes: 0 ok, 2 configuration error,
3 runtime error, 4 validation tolerance exceeded.

Config files are INI-style with sections ``problem``, ``feasible_set``,
``sampler``, ``hypergrad``, ``outer`` and ``output``. Unknown keys are errors,
and ``sampler.seed`` is required (``--seed`` may supply or override it).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import FeasibleSet, InvalidConfig, OracleDisagreement, ToolError
from .hypergrad import HyperGradConfig, exact_pseudoinverse_hypergradient, hypergradient
from .oracle import GridSpec, fd_gradF, kink_probe
from .outer import OuterConfig, run_hgms
from .sampler import (
    MIX_FUNCTION,
    GaussianAtCenter,
    GaussianOnManifold,
    GibbsSamplerConfig,
    stationary_variance_diag,
)
from .selector import selection_error_sweep
from .testbed import bump, get_problem, list_problems

LOG = logging.getLogger("hgms")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TOLERANCE = 0, 2, 3, 4

SCHEMA = {
    "problem": {"name", "b", "A"},
    "feasible_set": {"kind", "lower", "upper", "dim"},
    "sampler": {"lambda", "chains", "steps", "stepsize", "init", "tau", "center", "seed", "workers",
                "warm_start"},
    "hypergrad": {"gamma", "eta", "max_cg_iters", "clip_radius", "warm_start"},
    "outer": {"alpha", "T", "stop_on_error", "record_oracle_error", "theta0"},
    "output": {"dir"},
}

DEFAULTS = {
    "sampler": {"lambda": "1e-4", "chains": "64", "steps": "1000", "stepsize": "1e-3", "init": "manifold",
                "tau": "1.0", "workers": "1", "warm_start": "false"},
    "hypergrad": {"gamma": "0.1", "eta": "1e-8", "warm_start": "false"},
    "outer": {"alpha": "0.2", "T": "100", "stop_on_error": "false", "record_oracle_error": "true"},
    "output": {"dir": "hgms_out"},
}

SUMMARY_FIELDS = {
    "tool_version": "str", "command": "str", "seed": "int", "config_sha256": "str", "problem": "str",
    "iterations": "int", "theta0": "list[float]", "theta0_projected": "bool",
    "theta_final": "list[float] | null", "F_final": "float | null", "mean_grad_map_sq": "float | null",
    "final_grad_map_norm": "float | null", "mean_oracle_err_sq": "float | null",
    "mean_cg_iters": "float | null", "flagged_rows": "int", "aborted": "bool", "error": "str | null",
    "warnings": "list[str]", "wall_time": "float", "mix_function": "str", "configs": "object",
}

SWEEP_DEFAULTS = {
    "circle-kink": {"theta": "0.3", "ns": "4,8,16,32,64,128,256,512,1024"},
    "sphere": {"theta": "1.0", "ns": "16,32,64,128,256,512,1024,2048,4096"},
}


# --- config -----------------------------------------------------------------

def _floats(text: str, name: str) -> list:
    try:
        return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise InvalidConfig("expected comma-separated numbers", name=name, value=text) from None


def _bool(text: str, name: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig("expected a boolean", name=name, value=text)


def _int(text: str, name: str) -> int:
    try:
        val = float(text)
    except ValueError:
        raise InvalidConfig("expected an integer", name=name, value=text) from None
    if val != int(val):
        raise InvalidConfig("expected an integer", name=name, value=text)
    return int(val)


def _float(text: str, name: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise InvalidConfig("expected a number", name=name, value=text) from None


def read_config(path) -> dict:
    """Parse an INI config into a ``{section: {key: str}}`` dict with defaults filled in."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise InvalidConfig("config file not found", name="config", value=str(path)) from None
    except configparser.Error as exc:
        raise InvalidConfig(f"unparseable config: {exc}", name="config", value=str(path)) from None
    raw = {}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise InvalidConfig("unknown config section", name=sec, value=sec)
        for key in parser[sec]:
            if key not in SCHEMA[sec]:
                raise InvalidConfig("unknown config key", name=f"{sec}.{key}", value=parser[sec][key])
        raw[sec] = dict(parser[sec])
    for sec, vals in DEFAULTS.items():
        raw[sec] = {**vals, **raw.get(sec, {})}
    if "name" not in raw.get("problem", {}):
        raise InvalidConfig("problem.name is required", name="problem.name", value=None)
    return raw


def config_hash(raw: dict) -> str:
    """sha256 of the resolved config; the output directory does not count."""
    kept = {k: v for k, v in raw.items() if k != "output"}
    return hashlib.sha256(json.dumps(kept, sort_keys=True).encode()).hexdigest()


def resolve_workers(cli_value, config_value=None) -> int:
    """``--workers`` beats the config key, which beats ``HGMS_WORKERS``; 0 means all cores."""
    for val in (cli_value, config_value, os.environ.get("HGMS_WORKERS")):
        if val is not None and str(val).strip() != "":
            n = _int(val, "workers")
            if n < 0:
                raise InvalidConfig("workers must be >= 0", name="workers", value=n)
            return n or (os.cpu_count() or 1)
    return 1


def build_problem(raw: dict):
    prob = raw["problem"]
    name = prob["name"]
    params = {}
    if "b" in prob:
        params["b"] = _float(prob["b"], "b")
    if "A" in prob:
        try:
            params["A"] = np.asarray(json.loads(prob["A"]), dtype=float)
        except (ValueError, TypeError):
            raise InvalidConfig("A must be a JSON matrix", name="A", value=prob["A"]) from None
    fs = raw.get("feasible_set")
    override = None
    if fs:
        kind = fs.get("kind", "box")
        if kind == "box":
            if "lower" not in fs or "upper" not in fs:
                raise InvalidConfig("box needs lower and upper", name="feasible_set", value=fs)
            lo, hi = _floats(fs["lower"], "lower"), _floats(fs["upper"], "upper")
            if len(lo) == 1 and len(hi) == 1:
                params["theta_box"] = (lo[0], hi[0])
            else:
                override = FeasibleSet.box(lo, hi)
        elif kind == "simplex":
            override = FeasibleSet.simplex(_int(fs.get("dim", "0"), "dim"))
        elif kind == "full":
            override = FeasibleSet.full()
        else:
            raise InvalidConfig("unknown feasible set kind", name="feasible_set.kind", value=kind)
    try:
        ap = get_problem(name, **params)
    except TypeError as exc:
        raise InvalidConfig(f"bad problem parameters: {exc}", name="problem", value=name) from None
    if override is not None:
        if override.kind in ("box", "simplex") and override.dim != ap.dims.m:
            raise InvalidConfig("feasible set dimension differs from m", name="feasible_set", value=override.dim)
        ap = replace(ap, problem=replace(ap.problem, feasible=override))
    return ap


def build_configs(raw: dict, ap):
    s, h, o = raw["sampler"], raw["hypergrad"], raw["outer"]
    if "seed" not in s:
        raise InvalidConfig("sampler.seed is required", name="seed", value=None)
    seed = _int(s["seed"], "seed")
    tau = _float(s["tau"], "tau")
    init_kind = s["init"]
    if init_kind == "manifold":
        init = GaussianOnManifold(tau)
    elif init_kind == "center":
        center = _floats(s.get("center", ",".join(["0"] * ap.dims.d)), "center")
        init = GaussianAtCenter(np.asarray(center), tau)
    else:
        raise InvalidConfig("init must be 'manifold' or 'center'", name="init", value=init_kind)
    sampler = GibbsSamplerConfig(
        _float(s["lambda"], "lambda"), _int(s["chains"], "chains"), _int(s["steps"], "steps"),
        _float(s["stepsize"], "stepsize"), init, seed, _bool(s["warm_start"], "warm_start"),
    )
    hyper = HyperGradConfig(
        _float(h["gamma"], "gamma"), _float(h["eta"], "eta"),
        _int(h["max_cg_iters"], "max_cg_iters") if "max_cg_iters" in h else None,
        _float(h["clip_radius"], "clip_radius") if "clip_radius" in h else None,
        _bool(h["warm_start"], "warm_start"),
    )
    outer = OuterConfig(_float(o["alpha"], "alpha"), _int(o["T"], "T"), _bool(o["stop_on_error"], "stop_on_error"),
                        _bool(o["record_oracle_error"], "record_oracle_error"))
    theta0 = np.asarray(_floats(o["theta0"], "theta0")) if "theta0" in o else np.zeros(ap.dims.m)
    return sampler, hyper, outer, theta0


# --- output helpers -----------------------------------------------------------

def _provenance(command: str, seed, digest: str) -> list:
    return [f"hgms {__version__} {command}", f"seed={seed}", f"config_sha256={digest}"]


def _write_csv(path: Path, header: list, rows: list, comments: list) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _num(v) -> str:
    if v is None:
        return "null"
    return repr(float(v))


def _outdir(args, default="hgms_out") -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidConfig(f"output directory not writable: {exc}", name="out", value=str(out)) from None
    if not os.access(out, os.W_OK):
        raise InvalidConfig("output directory not writable", name="out", value=str(out))
    return out


def _problem_from_args(args):
    if args.config:
        raw = read_config(args.config)
        return build_problem(raw), raw
    name = args.problem
    return get_problem(name), {"problem": {"name": name}}


def _seed(args, raw) -> int:
    if args.seed is not None:
        return int(args.seed)
    if raw and "seed" in raw.get("sampler", {}):
        return _int(raw["sampler"]["seed"], "seed")
    raise InvalidConfig("a seed is required (--seed or sampler.seed)", name="seed", value=None)


# --- subcommands -----------------------------------------------------------------

def cmd_run(args) -> int:
    raw = read_config(args.config)
    if args.seed is not None:
        raw["sampler"]["seed"] = str(args.seed)
    if args.workers is not None:
        raw["sampler"]["workers"] = str(args.workers)
    if args.out:
        raw["output"]["dir"] = args.out
    ap = build_problem(raw)
    sampler, hyper, outer, theta0 = build_configs(raw, ap)
    resolve_workers(None, raw["sampler"].get("workers"))
    digest = config_hash(raw)
    args.out = raw["output"]["dir"]
    out = _outdir(args)
    trace = run_hgms(ap, theta0, sampler, hyper, outer)
    trace.write_csv(out / "trace.csv", _provenance("run", sampler.seed, digest))
    summary = {**trace.summary(), "tool_version": __version__, "command": "run", "config_sha256": digest}
    _write_json(out / "summary.json", summary)
    if trace.aborted:
        LOG.error("run aborted: %s", trace.error)
        return EXIT_RUNTIME
    return EXIT_OK


def _theta_grid(text: str, m: int) -> list:
    pts = []
    for chunk in text.split(";"):
        vals = _floats(chunk, "thetas") if chunk.strip() else []
        if not vals:
            continue
        if m > 1 and len(vals) == m:
            pts.append(np.asarray(vals))
        elif m == 1:
            pts.extend(np.array([v]) for v in vals)
        else:
            raise InvalidConfig("theta grid entries must have m components", name="thetas", value=chunk)
    if not pts:
        raise InvalidConfig("empty theta grid", name="thetas", value=text)
    return pts


def cmd_validate_hypergrad(args) -> int:
    ap, raw = _problem_from_args(args)
    thetas = _theta_grid(args.thetas, ap.dims.m)
    gammas = _floats(args.gammas, "gammas")
    if not gammas:
        raise InvalidConfig("empty gamma grid", name="gammas", value=args.gammas)
    out = _outdir(args)
    rows = []
    worst = 0.0
    for th in thetas:
        xs = ap.x_star(th)
        try:
            ref = fd_gradF(ap, th)
            status = "smooth"
        except OracleDisagreement:
            ref, status = None, "kink"
        if xs is None:
            status = "kink"
        pinv = exact_pseudoinverse_hypergradient(ap, th) if status == "smooth" else None
        for gamma in gammas:
            if status != "smooth":
                rows.append([_num(v) for v in th] + [_num(gamma), "", "", "", "null", "null", status])
                continue
            est = hypergradient(ap.problem, th, xs, HyperGradConfig(gamma, args.eta))
            err = float(np.linalg.norm(est.h_hat - ref))
            rel = err / max(float(np.linalg.norm(ref)), 1e-300)
            worst = max(worst, err)
            rows.append([_num(v) for v in th] + [
                _num(gamma), json.dumps(est.h_hat.tolist()), json.dumps(ref.tolist()),
                json.dumps(pinv.tolist()), _num(err), _num(rel), status,
            ])
    header = [f"theta_{i}" for i in range(ap.dims.m)] + ["gamma", "h_hat", "fd_grad", "pinv_grad", "abs_err",
                                                        "rel_err", "status"]
    digest = config_hash({"problem": raw["problem"], "thetas": args.thetas, "gammas": args.gammas,
                          "eta": args.eta, "tol": args.tol})
    _write_csv(out / "validate_hypergrad.csv", header, rows, _provenance("validate-hypergrad", "none", digest))
    if worst > args.tol:
        LOG.error("hyper-gradient disagreement %.3g exceeds tolerance %.3g", worst, args.tol)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_sweep_selection(args) -> int:
    ap, raw = _problem_from_args(args)
    seed = _seed(args, raw)
    key = "sphere" if ap.name.startswith("sphere") else ap.name
    defaults = SWEEP_DEFAULTS.get(key, {"theta": "0.3", "ns": "4,16,64,256"})
    theta = np.asarray(_floats(args.theta or defaults["theta"], "theta"))
    lambdas = _floats(args.lambdas, "lambdas")
    ns = [int(v) for v in _floats(args.ns or defaults["ns"], "ns")]
    workers = resolve_workers(args.workers, raw.get("sampler", {}).get("workers"))
    template = GibbsSamplerConfig(lambdas[0] if lambdas else 1e-5, 1, args.steps, args.stepsize,
                                  GaussianOnManifold(args.tau), seed)
    table = selection_error_sweep(ap, theta, lambdas, ns, args.replicates, template, workers)
    out = _outdir(args)
    digest = config_hash({"problem": raw["problem"], "theta": theta.tolist(), "lambdas": lambdas, "ns": ns,
                          "replicates": args.replicates, "steps": args.steps, "stepsize": args.stepsize,
                          "tau": args.tau, "seed": seed})
    rows = [[_num(r.lam), str(r.n), _num(r.mean_sq_err), _num(r.stderr), str(r.replicates)] for r in table.rows]
    _write_csv(out / "rates.csv", ["lambda", "N", "mean_sq_err", "stderr", "replicates"], rows,
               _provenance("sweep-selection", seed, digest))

    def fit_json(fit):
        if fit is None:
            return None
        half = 1.96 * fit.slope_stderr
        return {**fit.to_dict(), "ci95": [fit.slope - half, fit.slope + half]}

    _write_json(out / "slopes.json", {
        "tool_version": __version__, "seed": seed, "config_sha256": digest, "problem": ap.name,
        "theta": theta.tolist(), "replicates": args.replicates,
        "slope_vs_N": fit_json(table.slope_vs_n), "slope_vs_lambda": fit_json(table.slope_vs_lambda),
    })
    return EXIT_OK


def cmd_probe_kinks(args) -> int:
    ap, raw = _problem_from_args(args)
    lo, hi = _floats(args.window, "window")
    report = kink_probe(ap, GridSpec(lo, hi, args.points), source=args.source)
    out = _outdir(args)
    circle = ap.name == "circle-kink"
    flagged = set(report.flagged_cells.tolist())
    rows = []
    for j, th in enumerate(report.theta):
        ra = minus_ra = ""
        if circle:
            r = float(np.sqrt(1.0 + th * th))
            a = float(bump(th))
            ra, minus_ra = _num(r * a), _num(-r * a)
        rows.append([_num(th), _num(report.F[j]), _num(report.d_minus[j]), _num(report.d_plus[j]),
                     "1" if report.candidates[j] else "0", "1" if j in flagged else "0", ra, minus_ra])
    digest = config_hash({"problem": raw["problem"], "window": [lo, hi], "points": args.points,
                          "source": args.source})
    prov = _provenance("probe-kinks", "none", digest)
    _write_csv(out / "kinks.csv", ["theta", "F", "d_minus", "d_plus", "candidate", "flagged", "ra", "minus_ra"],
               rows, prov)
    _write_json(out / "kinks.json", {
        "tool_version": __version__, "config_sha256": digest, "problem": ap.name, "window": [lo, hi],
        "points": args.points, "kinks": report.kinks.tolist(), "jump_ratios": report.jump_ratios,
    })
    return EXIT_OK


def cmd_sample_diag(args) -> int:
    seed = _seed(args, None)
    res = stationary_variance_diag(args.lam, args.h, args.steps, args.samples, seed)
    out = _outdir(args)
    digest = config_hash({"lambda": args.lam, "h": args.h, "steps": args.steps, "samples": args.samples,
                          "seed": seed})
    keys = ["lambda", "h", "k_steps", "samples", "empirical_var", "predicted_var", "rel_err"]
    _write_csv(out / "sample_diag.csv", keys, [[repr(res[k]) for k in keys]],
               _provenance("sample-diag", seed, digest) + [f"mix={MIX_FUNCTION}"])
    if res["rel_err"] > args.tol:
        LOG.error("stationary variance off by %.3g (tolerance %.3g)", res["rel_err"], args.tol)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_list_problems(args) -> int:
    for name in list_problems():
        print(name)
    return EXIT_OK


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides sampler.seed")
    common.add_argument("--workers", type=int, help="0 = all cores; falls back to HGMS_WORKERS")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hgms", description="Bilevel hyper-gradients with minima selection.")
    parser.add_argument("--version", action="version", version=f"hgms {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run the outer loop from a config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-hypergrad", parents=[common], help="compare estimates against oracles")
    p.add_argument("--problem", default="circle-kink")
    p.add_argument("--thetas", default="0.25,0.3,0.35", help="';'-separated points, ',' within a point")
    p.add_argument("--gammas", default="1e-4")
    p.add_argument("--eta", type=float, default=1e-8)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_validate_hypergrad)

    p = sub.add_parser("sweep-selection", parents=[common], help="selection error against N and lambda")
    p.add_argument("--problem", default="circle-kink")
    p.add_argument("--theta")
    p.add_argument("--lambdas", default="1e-5")
    p.add_argument("--ns")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--stepsize", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_sweep_selection)

    p = sub.add_parser("probe-kinks", parents=[common], help="locate kinks of F on a window")
    p.add_argument("--problem", default="circle-kink")
    p.add_argument("--window", default="0.08,0.36")
    p.add_argument("--points", type=int, default=4000)
    p.add_argument("--source", choices=("exact", "dense"), default="exact")
    p.set_defaults(func=cmd_probe_kinks)

    p = sub.add_parser("sample-diag", parents=[common], help="ULA variance on a Gaussian target")
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--tol", type=float, default=0.05)
    p.set_defaults(func=cmd_sample_diag)

    p = sub.add_parser("list-problems", parents=[common], help="print catalog names")
    p.set_defaults(func=cmd_list_problems)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ToolError as exc:
        print(f"runtime error [{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
