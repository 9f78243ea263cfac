"""Command-line front end: ``gplasc {etf,verify,toy,continual,sweep}``.

Exit codes: 0 success, 1 failed check or runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from dataclasses import fields, replace

import numpy as np

from .bounds import DEFAULT_TRIAL_KS, run_bound_trials, run_equality_trials
from .geometry import (
    DimensionError,
    check_simplex,
    feasible_k_floor,
    gram_feasibility,
    k_min_for,
    make_region_plan,
    make_simplex_etf,
    simplex_radius,
)
from .harness import METHODS, ContinualConfig, DivergenceError as RunDivergence, dump_json, run_continual
from .losses import FeatureSet
from .metrics import mean_pairwise_overlap, overlap_matrix, simplex_fit, write_overlap_csv
from .sphere_optimizer import DivergenceError as ToyDivergence, ToyConfig, run_continual_toy, run_toy

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_MARGINS = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5]


class ConfigError(ValueError):
    pass


# Config defaults per command. Types of the defaults drive parsing.

ETF_DEFAULTS = {"seed": 0, "dim": 3, "vertices": 3, "tol": 1e-8}
VERIFY_DEFAULTS = {
    "seed": 0,
    "trials": 200,
    "thresholds": list(DEFAULT_TRIAL_KS),
    "max_classes": 4,
    "max_dim": 6,
    "gram_max_n": 16,
    "gram_grid": 50,
}
_TOY_FIELDS = ("n_per_class", "classes", "dim", "steps", "lr", "loss_mode", "seed", "snapshot_every", "tau",
               "lr_schedule", "lambda_range", "lambda_position", "lambda_distill", "threshold")
TOY_DEFAULTS = {
    **{f.name: f.default for f in fields(ToyConfig) if f.name in _TOY_FIELDS},
    "threshold": 0.7,
    "tasks": 1,
    "margin": 0.7,
    "freeze_past": True,
}
_CONTINUAL_BASE = {f.name: f.default for f in fields(ContinualConfig) if f.name != "method"}
CONTINUAL_DEFAULTS = {**_CONTINUAL_BASE, "methods": ["supcon", "gplasc"]}
SWEEP_DEFAULTS = {**_CONTINUAL_BASE, "method": "gplasc", "over": "margin", "values": list(SWEEP_MARGINS)}

DEFAULTS = {
    "etf": ETF_DEFAULTS,
    "verify": VERIFY_DEFAULTS,
    "toy": TOY_DEFAULTS,
    "continual": CONTINUAL_DEFAULTS,
    "sweep": SWEEP_DEFAULTS,
}


def _parse_scalar(text: str, kind: type):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        value = float(text)
        if not math.isfinite(value):
            raise ValueError(f"expected a finite number, got {text!r}")
        return value
    return text


def parse_value(text: str, default):
    """Parse ``text`` to the type of ``default``; lists are comma separated."""
    text = text.strip()
    if isinstance(default, list):
        kind = type(default[0]) if default else str
        items = [s.strip() for s in text.split(",") if s.strip()]
        return [_parse_scalar(s, kind) for s in items]
    return _parse_scalar(text, type(default))


def _coerce(value, default):
    """Match a JSON-decoded value to the type of ``default``."""
    if isinstance(default, list):
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {value!r}")
        kind = type(default[0]) if default else str
        return [_coerce(v, kind()) for v in value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
        raise TypeError(f"expected {type(default).__name__}, got {value!r}")
    return value


def parse_config_text(text: str, defaults: dict, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Returns only the keys given."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = parse_value(value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def load_config(path: str, command: str) -> dict:
    """Read a key-value config file or the ``config`` block of an emitted report."""
    defaults = DEFAULTS[command]
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            report = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        cfg = dict(report.get("config", {}))
        embedded = cfg.pop("command", command)
        if embedded != command:
            raise ConfigError(f"{path}: report was produced by '{embedded}', not '{command}'")
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        try:
            return {k: _coerce(v, defaults[k]) for k, v in cfg.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config_text(text, defaults, path)


FLAG_KEYS = {
    "seed": "seed",
    "method": "method",
    "margin": "margin",
    "tasks": "tasks",
    "classes": "classes",
    "dim": "dim",
    "buffer": "buffer",
    "trials": "trials",
    "vertices": "vertices",
    "threshold": "threshold",
}


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if getattr(args, "config", None):
        cfg.update(load_config(args.config, command))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if command == "continual" and key == "method":
            if value not in METHODS:
                raise ConfigError(f"--method must be one of {METHODS}")
            cfg["methods"] = [value]
        elif command == "verify" and key == "threshold":
            cfg["thresholds"] = [float(value)]
        elif key in defaults:
            cfg[key] = type(defaults[key])(value) if not isinstance(defaults[key], bool) else value
        else:
            raise ConfigError(f"--{flag} does not apply to '{command}'")
    cfg = {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in cfg.items()}
    return {"command": command, **cfg}


def _strip(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "command"}


def _write_json(out_dir: str, name: str, obj) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(dump_json(obj))
    return path


def _report(command: str, cfg: dict, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "seed": cfg.get("seed"), "config": cfg, **body}


# Commands ----------------------------------------------------------------------


def cmd_etf(cfg: dict, out: str) -> int:
    c = _strip(cfg)
    frame = make_simplex_etf(c["dim"], c["vertices"], c["seed"])
    rep = check_simplex(frame.vertices, c["tol"])
    gram = frame.gram()
    _write_json(out, "etf.json", _report("etf", cfg, frame=frame.to_dict(), gram=gram.tolist(), report=rep.to_dict()))
    return EXIT_OK if rep.passed else EXIT_FAIL


def _gram_checks(max_n: int, grid: int) -> tuple[list[dict], bool]:
    checks, ok = [], True
    for n in range(2, max_n + 1):
        floor = -1.0 / (n - 1)
        worst = 0.0
        for k in np.linspace(floor, 1.0, grid):
            G = (1.0 - k) * np.eye(n) + k * np.ones((n, n))
            _, lam1, lam2 = gram_feasibility(n, float(k), n)
            ev = np.sort(np.linalg.eigvalsh(G))
            expected = np.sort(np.array([lam1] + [lam2] * (n - 1)))
            worst = max(worst, float(np.max(np.abs(ev - expected))))
        at_floor = gram_feasibility(n, floor, n)[0]
        below = gram_feasibility(n, floor - 1e-9, n)[0]
        passed = worst < 1e-9 and at_floor and not below
        ok &= passed
        checks.append({"n": n, "max_eigen_error": worst, "feasible_at_floor": at_floor,
                       "feasible_below_floor": below, "passed": passed})
    return checks, ok


def _tangency_checks() -> tuple[list[dict], bool]:
    checks, ok = [], True
    for T, C in ((2, 2), (5, 2), (5, 3), (10, 5)):
        k_min, theta = k_min_for(T, C)
        err = abs(math.asin(simplex_radius(C, k_min)) - theta / 2)
        passed = err < 1e-12
        ok &= passed
        checks.append({"tasks": T, "classes": C, "k_min": k_min, "theta": theta, "tangency_error": err, "passed": passed})
    return checks, ok


def cmd_verify(cfg: dict, out: str) -> int:
    c = _strip(cfg)
    for k in c["thresholds"]:
        if not -1.0 <= k <= 1.0:
            raise ConfigError(f"threshold {k} outside [-1, 1]")
    if c["trials"] < 0:
        raise ConfigError("trials must be non-negative")
    if c["max_classes"] < 2 or c["max_dim"] < c["max_classes"]:
        raise ConfigError("need max_classes >= 2 and max_dim >= max_classes")
    ks = tuple(c["thresholds"])
    bound = run_bound_trials(c["trials"], c["seed"], ks, c["max_classes"], c["max_dim"])
    equal = run_equality_trials(c["trials"], c["seed"] + 1, ks, c["max_classes"], c["max_dim"])
    gram, gram_ok = _gram_checks(c["gram_max_n"], c["gram_grid"])
    tangency, tangency_ok = _tangency_checks()
    min_slack = min((t.slack for t in bound), default=None)
    max_eq = max((abs(t.slack) for t in equal), default=None)
    bound_ok = min_slack is None or min_slack >= -1e-9
    equal_ok = max_eq is None or max_eq < 1e-9
    passed = bound_ok and equal_ok and gram_ok and tangency_ok
    _write_json(out, "verify.json", _report(
        "verify", cfg,
        passed=passed,
        min_bound_slack=min_slack,
        max_equality_gap=max_eq,
        bound_trials=[t.to_dict() for t in bound],
        equality_trials=[t.to_dict() for t in equal],
        gram_checks=gram,
        tangency_checks=tangency,
    ))
    return EXIT_OK if passed else EXIT_FAIL


def _write_points(path: str, fs: FeatureSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "task"] + [f"z{j}" for j in range(fs.dim)])
        for z, y, t in zip(fs.features, fs.labels, fs.task_ids):
            w.writerow([int(y), int(t)] + [repr(float(v)) for v in z])


def _cross_class_stats(fs: FeatureSet) -> dict:
    G = fs.features @ fs.features.T
    cross = fs.labels[:, None] != fs.labels[None, :]
    vals = G[cross]
    return {"min": float(vals.min()), "max": float(vals.max()), "mean": float(vals.mean())}


def cmd_toy(cfg: dict, out: str) -> int:
    c = _strip(cfg)
    tasks, margin, freeze = c.pop("tasks"), c.pop("margin"), c.pop("freeze_past")
    if tasks < 1:
        raise ConfigError("tasks must be >= 1")
    tc = ToyConfig(**c)
    os.makedirs(out, exist_ok=True)
    body = {}
    if tasks == 1:
        traj = run_toy(tc)
        fs = traj.final
        k = feasible_k_floor(tc.classes) if tc.loss_mode == "supcon" else tc.threshold
        traj.write_loss_csv(os.path.join(out, "toy_loss.csv"))
        sidecars = {"loss": "toy_loss.csv"}
        if tc.snapshot_every:
            traj.write_snapshot_csv(os.path.join(out, "toy_snapshots.csv"))
            sidecars["snapshots"] = "toy_snapshots.csv"
        rep = simplex_fit(fs, k, tol=5e-2)
        body["final_loss"] = traj.losses[-1].to_dict()
    else:
        plan = make_region_plan(tasks, tc.classes, tc.dim, margin=margin, seed=tc.seed)
        res = run_continual_toy(plan if tc.loss_mode != "supcon" else None, tc, tasks, freeze_past=freeze)
        fs = res.global_set
        k = plan.k
        sidecars = {}
        for t, traj in enumerate(res.trajectories):
            name = f"toy_loss_task{t}.csv"
            traj.write_loss_csv(os.path.join(out, name))
            sidecars[f"loss_task{t}"] = name
        groups = [fs.features[fs.task_ids == t] for t in range(tasks)]
        M = overlap_matrix(groups)
        write_overlap_csv(os.path.join(out, "toy_overlap.csv"), M)
        sidecars["overlap"] = "toy_overlap.csv"
        G = fs.features @ fs.features.T
        cross_task = fs.task_ids[:, None] != fs.task_ids[None, :]
        body["plan"] = plan.to_dict()
        body["prototype_errors"] = [
            float(np.linalg.norm(g.mean(axis=0) - plan.center(t))) for t, g in enumerate(groups)
        ]
        body["max_cross_task_inner"] = float(G[cross_task].max())
        body["overlap_matrix"] = M.tolist()
        body["mean_pairwise_overlap"] = mean_pairwise_overlap(M)
        task_reports = [simplex_fit(FeatureSet.single_task(g, fs.labels[fs.task_ids == t]), k, tol=5e-2)
                        for t, g in enumerate(groups)]
        body["per_task_equality"] = [r.to_dict() for r in task_reports]
        rep = task_reports[-1]
    _write_points(os.path.join(out, "toy_points.csv"), fs)
    sidecars["points"] = "toy_points.csv"
    body["threshold"] = k
    body["cross_class_inner"] = _cross_class_stats(fs)
    body["equality"] = rep.to_dict()
    body["sidecars"] = sidecars
    _write_json(out, "toy.json", _report("toy", cfg, **body))
    return EXIT_OK


def _continual_config(c: dict, method: str) -> ContinualConfig:
    keys = {f.name for f in fields(ContinualConfig)}
    return ContinualConfig(method=method, **{k: v for k, v in c.items() if k in keys and k != "method"})


def _run_method(cfg: dict, ccfg: ContinualConfig, out: str, stem: str) -> dict:
    rep = run_continual(ccfg)
    rep.config = cfg
    rep.write(out, stem)
    write_overlap_csv(os.path.join(out, f"{stem}_overlap.csv"), np.asarray(rep.overlap_matrix))
    errs = [p["prototype_error"] for p in rep.per_task if p["prototype_error"] is not None]
    return {
        "method": ccfg.method,
        "report": f"{stem}.json",
        "final_cil": rep.final_cil,
        "final_til": rep.final_til,
        "forgetting": rep.forgetting,
        "max_prototype_error": max(errs) if errs else None,
        "mean_pairwise_overlap": mean_pairwise_overlap(np.asarray(rep.overlap_matrix)),
    }


def cmd_continual(cfg: dict, out: str) -> int:
    c = _strip(cfg)
    methods = c.pop("methods")
    if not methods:
        raise ConfigError("methods must name at least one method")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    configs = [(m, _continual_config(c, m)) for m in methods]
    rows = [_run_method(cfg, cc, out, f"continual_{m}") for m, cc in configs]
    _write_json(out, "summary.json", _report("continual", cfg, results=rows))
    return EXIT_OK


def cmd_sweep(cfg: dict, out: str) -> int:
    c = _strip(cfg)
    over, values = c.pop("over"), c.pop("values")
    if over not in ("margin", "seed"):
        raise ConfigError("over must be 'margin' or 'seed'")
    if not values:
        raise ConfigError("values must not be empty")
    base = _continual_config(c, c["method"])
    rows = []
    for v in values:
        if over == "seed" and float(v) != int(v):
            raise ConfigError(f"seed values must be integers, got {v}")
        cc = replace(base, **{over: int(v) if over == "seed" else float(v)})
        tag = f"{over}_{int(v)}" if over == "seed" else f"{over}_{float(v):g}"
        row = _run_method(cfg, cc, out, f"sweep_{tag}")
        rows.append({over: int(v) if over == "seed" else float(v), **row})
    columns = [over, "final_cil", "final_til", "forgetting", "max_prototype_error", "mean_pairwise_overlap"]
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[col] if col == over else repr(r[col]) for col in columns])
    _write_json(out, "sweep.json", _report("sweep", cfg, results=rows, table="sweep.csv"))
    return EXIT_OK


COMMANDS = {"etf": cmd_etf, "verify": cmd_verify, "toy": cmd_toy, "continual": cmd_continual, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gplasc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "etf": "build a simplex ETF and check it",
        "verify": "run the bound, equality and Gram-feasibility checks",
        "toy": "optimise raw points on the sphere (one task or a sequence)",
        "continual": "train the encoder on a synthetic task stream",
        "sweep": "repeat a continual run over margins or seeds",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key = value file, or a report JSON to re-run")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--method")
        p.add_argument("--margin", type=float)
        p.add_argument("--tasks", type=int)
        p.add_argument("--classes", type=int)
        p.add_argument("--dim", type=int)
        p.add_argument("--buffer", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--vertices", type=int)
        p.add_argument("--threshold", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args.command, args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, DimensionError, ValueError, TypeError) as exc:
        print(f"gplasc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ToyDivergence, RunDivergence) as exc:
        print(f"gplasc {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
