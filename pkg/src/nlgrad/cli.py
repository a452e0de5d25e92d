"""Batch experiment runner.

    nlgrad <identities|minimize|poincare|sweep> --config PATH [--out DIR] [--threads N] [--seed S]

Exit status: 0 when every configured tolerance passes, 1 on a failed
tolerance or runtime failure (the failing stage is named on stderr), 2 on a
malformed config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import calculus, kernels, operators, solve
from . import grid as gridmod
from .energy import StoredEnergy
from .errors import NlgradError

COMMANDS = ("identities", "minimize", "poincare", "sweep")

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 3}
_H = {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}]}

SCHEMA = {
    "type": "object",
    "required": ["kernel", "grid"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "kernel": {
            "type": "object",
            "required": ["n", "s", "delta"],
            "properties": {
                "n": {"enum": [2, 3]},
                "s": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "a0": {"type": "number", "exclusiveMinimum": 0},
                "b0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "required": ["lower", "upper", "h"],
            "properties": {"lower": _VEC, "upper": _VEC, "h": _H},
            "additionalProperties": False,
        },
        "near_field": {"enum": ["calibrated", "ball"]},
        "energy": {
            "type": "object",
            "required": ["form"],
            "properties": {
                "form": {"enum": ["QUADRATIC", "POLY_COERCIVE"]},
                "alpha": _NUM, "beta": _NUM, "gamma1": _NUM, "gamma2": _NUM,
                "p": _NUM, "q": _NUM, "anchor": _NUM, "eps_reg": _NUM,
                "barrier": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "datum": {"type": ["object", "array"]},
        "optimizer": {
            "type": "object",
            "properties": {
                "max_iter": {"type": "integer", "minimum": 0},
                "grad_tol": {"type": "number", "exclusiveMinimum": 0},
                "memory": {"type": "integer", "minimum": 1},
                "c1": _NUM, "c2": _NUM,
            },
            "additionalProperties": False,
        },
        "tolerances": {"type": "object", "additionalProperties": _NUM},
        "weak_continuity": {
            "type": "object",
            "properties": {
                "schedule": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "final_ratio": _NUM,
                "slope_target": _NUM,
                "slope_tol": _NUM,
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "required": ["task"],
            "properties": {
                "task": {"enum": ["identities", "poincare", "minimize"]},
                "s": {"type": "array", "items": _NUM, "minItems": 1},
                "delta": {"type": "array", "items": _NUM, "minItems": 1},
                "h": {"type": "array", "items": _NUM, "minItems": 1},
            },
            "additionalProperties": False,
        },
        "output": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "cache_dir": {"type": "string"},
    },
    "additionalProperties": False,
}

_REQUIRED_BLOCKS = {"minimize": ("energy", "datum"), "sweep": ("sweep",)}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


# --- config ---------------------------------------------------------------


def load_config(path, command):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.path)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            where = f"{where}.{missing}" if where else missing
            raise ConfigError(f"{path}: missing field '{where}'")
        raise ConfigError(f"{path}: field '{where or '<root>'}': {err.message}")
    if cfg.get("command", command) != command:
        raise ConfigError(f"{path}: field 'command' is {cfg['command']!r} but {command!r} was requested")
    for block in _REQUIRED_BLOCKS.get(command, ()):
        if block not in cfg:
            raise ConfigError(f"{path}: missing field '{block}' (required by {command})")
    if len(cfg["grid"]["lower"]) != cfg["kernel"]["n"] or len(cfg["grid"]["upper"]) != cfg["kernel"]["n"]:
        raise ConfigError(f"{path}: field 'grid.lower'/'grid.upper' must have kernel.n entries")
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def kernel_params(block):
    try:
        return kernels.KernelParams(**block)
    except NlgradError as exc:
        raise ConfigError(f"field 'kernel': {exc}") from None


def h_levels(cfg):
    h = cfg["grid"]["h"]
    return sorted(h if isinstance(h, list) else [h], reverse=True)


# --- output ------------------------------------------------------------------


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def header_line(cfg, params):
    kp = ",".join(f"{k}={fmt(v)}" for k, v in params.as_dict().items())
    return f"# config_sha256={config_hash(cfg)} kernel({kp})\n"


def write_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def csv_text(header, columns, rows):
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_json(path, obj):
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# --- operator cache --------------------------------------------------------------


class OperatorCache:
    """Assembled operators keyed by a hash of (grid, kernel, near-field)."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._store = {}
        self._lock = threading.Lock()
        self._key_locks = {}

    def _key(self, kind, grid, params, near):
        blob = json.dumps([kind, grid.fingerprint(), params.as_dict(), near], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    def get(self, kind, grid, params, near="calibrated"):
        key = self._key(kind, grid, params, near)
        with self._lock:
            if key in self._store:
                return self._store[key]
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            with self._lock:
                if key in self._store:
                    return self._store[key]
            op = self._load(key, grid)
            if op is None:
                if kind == operators.GRADIENT:
                    op = operators.assemble_gradient(grid, params, near)
                else:
                    op = operators.assemble_convolution(grid, kernels.build_Q_profile(params), near)
                self._save(key, op)
            with self._lock:
                self._store[key] = op
            return op

    def _load(self, key, grid):
        if self.directory is None:
            return None
        path = self.directory / f"{key}.nlgw"
        return operators.NonlocalOperator.load(path, grid) if path.exists() else None

    def _save(self, key, op):
        if self.directory is None:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self.directory / f"{key}.nlgw.tmp"
        op.save(tmp)
        os.replace(tmp, self.directory / f"{key}.nlgw")


def build(cfg, params, h):
    try:
        dom = gridmod.BoxDomain(tuple(cfg["grid"]["lower"]), tuple(cfg["grid"]["upper"]), params.delta)
        return gridmod.build_grid(dom, h)
    except NlgradError as exc:
        raise ConfigError(f"field 'grid': {exc}") from None


# --- tasks ---------------------------------------------------------------------------


def _tolerances(cfg):
    tol = dict(calculus.TOLERANCES)
    for name, value in cfg.get("tolerances", {}).items():
        if name not in tol:
            raise ConfigError(f"field 'tolerances.{name}': unknown identity")
        tol[name] = (tol[name][0], float(value))
    return tol


def _weak_continuity(cfg, op, params):
    wc = cfg["weak_continuity"]
    schedule = wc.get("schedule", [2, 4, 8, 16, 32])
    dom = op.grid.domain
    phi = calculus.test_battery(dom.lower, dom.upper, ks=(1,))[0]
    reports = calculus.weak_continuity_probe(op, op.grid.points.copy(), phi, schedule)
    resolved = [r for r in reports if r.extra["j"] * op.grid.h <= np.pi / 2]
    out = {}
    for key in ("det", "cof", "entries"):
        gaps = [r.extra["gaps"][key] for r in resolved]
        out[key] = {
            "j": [r.extra["j"] for r in resolved],
            "gaps": gaps,
            "monotone": bool(all(b <= a for a, b in zip(gaps, gaps[1:]))),
            "final_ratio": gaps[-1] / gaps[0],
        }
    slope = calculus.loglog_slope(out["entries"]["j"], out["entries"]["gaps"])
    ratio_tol = wc.get("final_ratio", 0.1)
    target, slope_tol = wc.get("slope_target", -1.0), wc.get("slope_tol", 0.3)
    out["entries"]["slope"] = slope
    out["pass"] = bool(
        all(out[k]["monotone"] and out[k]["final_ratio"] <= ratio_tol for k in ("det", "cof"))
        and abs(slope - target) <= slope_tol
    )
    return out


def run_identities(cfg, params, cache, seed, hs=None):
    hs = hs or h_levels(cfg)
    near = cfg.get("near_field", "calibrated")
    tol = _tolerances(cfg)
    levels, rows, wc = [], [], None
    for h in hs:
        g = build(cfg, params, h)
        try:
            op = cache.get(operators.GRADIENT, g, params, near)
            conv = cache.get(operators.CONVOLUTION, g, params, near)
            reports = calculus.identity_battery(op, conv, seed)
        except NlgradError as exc:
            raise StageError(f"identities (h={h})", exc) from exc
        levels.append(reports)
        rows.extend(r.row() for r in reports)
        if "weak_continuity" in cfg and h == hs[-1]:
            wc = _weak_continuity(cfg, op, params)
    summary = calculus.assess(levels, params.delta, tol)
    ok = all(v["pass"] for v in summary.values())
    result = {"identities": summary, "all_pass": ok}
    if wc is not None:
        result["weak_continuity"] = wc
        result["all_pass"] = ok and wc["pass"]
    return rows, result


def run_minimize(cfg, params, cache, h=None):
    h = h or h_levels(cfg)[-1]
    g = build(cfg, params, h)
    try:
        W = StoredEnergy(**cfg["energy"])
        opt = solve.OptimizerConfig(**cfg.get("optimizer", {}))
        op = cache.get(operators.GRADIENT, g, params, cfg.get("near_field", "calibrated"))
        problem = solve.DirichletProblem(g, op, W, cfg["datum"])
    except NlgradError as exc:
        raise ConfigError(f"field 'energy'/'optimizer'/'datum': {exc}") from None
    try:
        report = solve.minimize(problem, opt)
        report.el_residuals = solve.el_residual(report.state, problem, solve.el_battery(g.domain))
    except NlgradError as exc:
        raise StageError("minimize", exc) from exc
    dev = np.max(np.abs(report.state - problem.g), axis=1)
    el_ok = all(abs(r["pairing"]) <= 10 * opt.grad_tol * r["scale"] for r in report.el_residuals)
    history_ok = bool(np.all(np.diff(report.energy_history) <= 0))
    checks = {"converged": report.converged, "energy_nonincreasing": history_ok, "euler_lagrange": el_ok}
    max_dev = float(np.max(dev[g.interior_nodes])) if len(g.interior_nodes) else 0.0
    if "max_deviation" in cfg.get("tolerances", {}):
        checks["max_deviation"] = max_dev <= cfg["tolerances"]["max_deviation"]
    summary = report.to_dict()
    summary.update(h=h, max_deviation=max_dev, checks=checks, all_pass=all(checks.values()))
    summary.pop("wall_time")
    return problem, report, dev, summary


def run_poincare(cfg, params, cache, hs=None):
    hs = hs or h_levels(cfg)
    rows = []
    for h in hs:
        g = build(cfg, params, h)
        try:
            op = cache.get(operators.GRADIENT, g, params, cfg.get("near_field", "calibrated"))
            C = solve.estimate_poincare(g, op)
        except NlgradError as exc:
            raise StageError(f"poincare (h={h})", exc) from exc
        rows.append({"h": h, "s": params.s, "delta": params.delta, "constant": C})
    consts = [r["constant"] for r in rows]
    stable = all(abs(b - a) <= 0.1 * a for a, b in zip(consts, consts[1:]))
    positive = all(np.isfinite(c) and c > 0 for c in consts)
    return rows, {"constants": consts, "positive_finite": positive, "stable": stable,
                  "all_pass": bool(positive and stable)}


# --- commands ---------------------------------------------------------------------


def cmd_identities(cfg, out, args, cache):
    params = kernel_params(cfg["kernel"])
    rows, result = run_identities(cfg, params, cache, args.seed)
    cols = ["identity", "h", "s", "delta", "abs_residual", "rel_residual"]
    write_atomic(out / "identities.csv", csv_text(header_line(cfg, params), cols, rows))
    write_json(out / "summary.json", _wrap(cfg, params, result))
    return result["all_pass"]


def cmd_minimize(cfg, out, args, cache):
    params = kernel_params(cfg["kernel"])
    problem, report, dev, summary = run_minimize(cfg, params, cache)
    write_json(out / "solve_report.json", _wrap(cfg, params, summary))
    g = problem.grid
    n = g.dim
    cols = ["index"] + [f"x{i + 1}" for i in range(n)] + ["class"] + [f"u{i + 1}" for i in range(n)] + ["deviation"]
    rows = []
    for node in range(g.n_nodes):
        row = {"index": node, "class": gridmod.NodeClass(g.node_class[node]).name, "deviation": dev[node]}
        row.update({f"x{i + 1}": g.points[node, i] for i in range(n)})
        row.update({f"u{i + 1}": report.state[node, i] for i in range(n)})
        rows.append(row)
    write_atomic(out / "state.csv", csv_text(header_line(cfg, params), cols, rows))
    return summary["all_pass"]


def cmd_poincare(cfg, out, args, cache):
    params = kernel_params(cfg["kernel"])
    rows, result = run_poincare(cfg, params, cache)
    write_atomic(out / "poincare.csv", csv_text(header_line(cfg, params), ["h", "s", "delta", "constant"], rows))
    write_json(out / "summary.json", _wrap(cfg, params, result))
    return result["all_pass"]


def _sweep_point(cfg, task, point, cache, seed, out):
    idx, (s, delta, h) = point
    kblock = dict(cfg["kernel"], s=s, delta=delta)
    params = kernel_params(kblock)
    sub = dict(cfg, kernel=kblock)
    if task == "identities":
        rows, result = run_identities(sub, params, cache, seed, hs=[h])
        ok = all(v["level_pass"] for v in result["identities"].values())
        rows = [dict(r, point=idx, value=r["rel_residual"], quantity=r["identity"]) for r in rows]
    elif task == "poincare":
        prow, result = run_poincare(sub, params, cache, hs=[h])
        ok = result["positive_finite"]
        rows = [dict(r, point=idx, quantity="poincare", value=r["constant"]) for r in prow]
    else:
        _, _, _, summary = run_minimize(sub, params, cache, h=h)
        ok = summary["all_pass"]
        rows = [{"point": idx, "s": s, "delta": delta, "h": h, "quantity": q, "value": v}
                for q, v in (("final_energy", summary["final_energy"]), ("grad_norm", summary["grad_norm"]),
                             ("iterations", summary["iterations"]), ("max_deviation", summary["max_deviation"]))]
    cols = ["point", "s", "delta", "h", "quantity", "value"]
    text = csv_text(header_line(sub, params), cols, rows)
    write_atomic(out / "points" / f"point_{idx:04d}.csv", text)
    return idx, rows, ok


def cmd_sweep(cfg, out, args, cache):
    sw = cfg["sweep"]
    axes = [sw.get("s", [cfg["kernel"]["s"]]), sw.get("delta", [cfg["kernel"]["delta"]]),
            sw.get("h", h_levels(cfg))]
    points = list(enumerate(itertools.product(*axes)))
    (out / "points").mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(lambda p: _sweep_point(cfg, sw["task"], p, cache, args.seed, out), points))
    results.sort(key=lambda r: r[0])
    params = kernel_params(cfg["kernel"])
    rows = [row for _, rs, _ in results for row in rs]
    cols = ["point", "s", "delta", "h", "quantity", "value"]
    write_atomic(out / "sweep.csv", csv_text(header_line(cfg, params), cols, rows))
    ok = all(r[2] for r in results)
    write_json(out / "summary.json", _wrap(cfg, params, {
        "task": sw["task"], "points": len(points), "passed": [bool(r[2]) for r in results], "all_pass": ok,
    }))
    return ok


def _wrap(cfg, params, result):
    return {"config_sha256": config_hash(cfg), "kernel": params.as_dict(), **result}


HANDLERS = {
    "identities": cmd_identities,
    "minimize": cmd_minimize,
    "poincare": cmd_poincare,
    "sweep": cmd_sweep,
}


def parse_args(argv):
    ap = argparse.ArgumentParser(prog="nlgrad", description="Nonlocal gradient calculus experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", help="output directory (default: config 'output' or '.')")
    ap.add_argument("--threads", type=int, help="worker threads for sweeps")
    ap.add_argument("--seed", type=int, help="seed for random test inputs")
    return ap.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
    except ConfigError as exc:
        print(f"nlgrad: config error: {exc}", file=sys.stderr)
        return 2
    args.threads = args.threads or cfg.get("threads", 1)
    args.seed = cfg.get("seed", 0) if args.seed is None else args.seed
    if args.threads < 1:
        print("nlgrad: config error: --threads must be >= 1", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.get("output", "."))
    out.mkdir(parents=True, exist_ok=True)
    cache = OperatorCache(cfg.get("cache_dir"))
    try:
        ok = HANDLERS[args.command](cfg, out, args, cache)
    except ConfigError as exc:
        print(f"nlgrad: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"nlgrad: stage '{exc.stage}' failed: {exc}", file=sys.stderr)
        return 1
    except (NlgradError, ArithmeticError, RuntimeError) as exc:
        print(f"nlgrad: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1
    if not ok:
        print(f"nlgrad: {args.command}: one or more tolerances failed (see {out})", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
