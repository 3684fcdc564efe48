"""Command-line experiment harness.

    dingo run --method dingo --problem synthetic-softmax:n=1000,p=20,C=5 \
        --workers 4 --seed 7 --out trace.csv
    dingo compare --problem synthetic-softmax:n=1000,p=20,C=5 --workers 4 \
        --run method=dingo --run method=gd,lr=0.5 --out merged.csv

Settings come from command-line flags, then an optional JSON ``--config``
file, then defaults. The effective settings are written as ``# key=value``
lines at the top of each CSV, followed by the fixed header row.

Exit codes: 0 success, 1 runtime diagnostic, 2 configuration error.
"""
import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time

import numpy as np

from .baselines import BaselineConfig, baseline_run
from .comms import ClusterEnv
from .errors import ConfigError, DingoError
from .optimizer import DingoConfig, dingo_run
from .problems import build_problem, partition

TRACE_HEADER = ["iteration", "rounds", "f", "grad_norm", "case", "alpha"]
COMPARE_HEADER = ["method"] + TRACE_HEADER
METHODS = ("dingo", "giant", "gd", "sync-sgd")

DEFAULTS = {
    "method": "dingo",
    "problem": "synthetic-softmax:n=1000,p=20,C=5",
    "workers": 4,
    "theta": 1e-4,
    "phi": 1e-6,
    "rho": 1e-4,
    "grad_tol": 1e-8,
    "max_iters": 100,
    "solver_cap": 50,
    "solver_tol": 1e-8,
    "exact": False,
    "lr": 1.0,
    "batch_fraction": 0.2,
    "reg": None,
    "seed": 0,
}
_TYPES = {
    "method": str, "problem": str, "workers": int, "theta": float, "phi": float,
    "rho": float, "grad_tol": float, "max_iters": int, "solver_cap": int,
    "solver_tol": float, "exact": bool, "lr": float, "batch_fraction": float,
    "reg": float, "seed": int,
}
# settings that matter to each method (echoed in the CSV header)
_RELEVANT = {
    "dingo": ("theta", "phi", "rho", "grad_tol", "max_iters", "solver_cap", "solver_tol", "exact"),
    "giant": ("rho", "grad_tol", "max_iters", "solver_cap", "solver_tol"),
    "gd": ("lr", "grad_tol", "max_iters"),
    "sync-sgd": ("lr", "batch_fraction", "grad_tol", "max_iters"),
}


def _coerce(key, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown setting {key!r}")
    kind = _TYPES[key]
    if value is None:
        return None
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError
                return value.lower() in ("true", "1")
            return bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): _coerce(k.replace("-", "_"), v) for k, v in data.items()}


def resolve_settings(flags, config=None):
    """Merge defaults < config file < flags and validate."""
    eff = dict(DEFAULTS)
    if config:
        eff.update(config)
    for key, val in flags.items():
        if val is not None:
            eff[key] = _coerce(key, val)
    if eff["method"] not in METHODS:
        raise ConfigError(f"unknown method {eff['method']!r} (choose from {', '.join(METHODS)})")
    if eff["workers"] < 1:
        raise ConfigError("--workers must be at least 1")
    return eff


def _dingo_config(s):
    return DingoConfig(theta=s["theta"], phi=s["phi"], rho=s["rho"], grad_tol=s["grad_tol"],
                       max_iters=s["max_iters"], solver_cap=s["solver_cap"],
                       solver_tol=s["solver_tol"], exact=s["exact"]).validate()


def _baseline_config(s):
    method = "sync_sgd" if s["method"] == "sync-sgd" else s["method"]
    return BaselineConfig(method=method, lr=s["lr"], batch_fraction=s["batch_fraction"],
                          cg_cap=s["solver_cap"], cg_tol=s["solver_tol"], rho=s["rho"],
                          grad_tol=s["grad_tol"], max_iters=s["max_iters"]).validate()


def execute(settings, threads=None):
    """Run one configured experiment.

    Returns:
        (rows, status, ledger snapshot or None, error or None). On a runtime
        error the rows of the completed iterations are returned.
    """
    cfg = _dingo_config(settings) if settings["method"] == "dingo" else _baseline_config(settings)
    data, obj = build_problem(settings["problem"], settings["seed"], settings["reg"])
    shards = partition(data.n, settings["workers"], settings["seed"], data)
    env = ClusterEnv(obj, shards, seed=settings["seed"], threads=threads)
    done = []
    w0 = np.zeros(obj.dim)
    try:
        if settings["method"] == "dingo":
            result = dingo_run(env, cfg, w0, callback=done.append)
        else:
            result = baseline_run(env, cfg, w0, callback=done.append)
    except DingoError as exc:
        if isinstance(exc, ConfigError):
            raise
        return [s.row() for s in done], "error", env.ledger_report(), exc
    return result.rows(), result.status, result.ledger, None


def _metadata(settings):
    keys = ("method", "problem", "workers", "seed", "reg") + _RELEVANT[settings["method"]]
    lines = []
    for key in keys:
        val = settings[key]
        if key == "reg" and val is None:
            val = "default"
        lines.append(f"# {key}={val}")
    return lines


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".csv", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_csv(comment_lines, header, rows):
    buf = io.StringIO()
    for line in comment_lines:
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _summary(label, rows, status, ledger, elapsed):
    last = rows[-1] if rows else None
    gnorm = last[3] if last else "nan"
    f = last[2] if last else "nan"
    rounds = ledger.rounds if ledger is not None else 0
    return (f"{label}: status={status} grad_norm={gnorm} f={f} rounds={rounds} "
            f"wall_time={elapsed:.3f}s")


# ---------------------------------------------------------------------------
# argument parsing


def _add_setting_flags(p):
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--problem", help="synthetic-<kind>:k=v,... | csv-<kind>:PATH | sparse-<kind>:PATH")
    p.add_argument("--workers", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--grad-tol", dest="grad_tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--solver-cap", dest="solver_cap", type=int)
    p.add_argument("--solver-tol", dest="solver_tol", type=float)
    p.add_argument("--exact", action="store_const", const=True, default=None,
                   help="exact sub-problem solves (tolerance 1e-14, cap d+5)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-fraction", dest="batch_fraction", type=float)
    p.add_argument("--reg", type=float, help="regulariser (default 1e-6 softmax/logistic, 0 least squares)")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="dingo", description="DINGO and baseline experiments with CSV traces")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run one method and write its trace")
    _add_setting_flags(run)
    run.add_argument("--out", default="trace.csv")
    cmp_ = sub.add_parser("compare", help="run several methods on one problem and merge traces")
    _add_setting_flags(cmp_)
    cmp_.add_argument("--run", action="append", default=[], metavar="K=V,...",
                      help="per-run overrides, e.g. method=gd,lr=0.5 (repeatable)")
    cmp_.add_argument("--out", default="compare.csv")
    return parser


_NON_SETTINGS = ("command", "out", "config", "run")


def _flag_settings(args):
    return {k: v for k, v in vars(args).items() if k not in _NON_SETTINGS}


def _parse_overrides(text):
    out = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"bad --run entry {item!r} (expected key=value)")
        out[key] = val.strip()
    return out


def cmd_run(args):
    config = load_config_file(args.config) if args.config else None
    settings = resolve_settings(_flag_settings(args), config)
    start = time.perf_counter()
    rows, status, ledger, err = execute(settings)
    elapsed = time.perf_counter() - start
    write_atomic(args.out, render_csv(_metadata(settings), TRACE_HEADER, rows))
    print(_summary(settings["method"], rows, status, ledger, elapsed))
    if err is not None:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 1 if status == "diverged" else 0


def cmd_compare(args):
    config = load_config_file(args.config) if args.config else None
    base = resolve_settings(_flag_settings(args), config)
    if len(args.run) < 2:
        raise ConfigError("compare needs at least two --run entries")
    runs = []
    for text in args.run:
        over = _parse_overrides(text)
        label = over.pop("label", None)
        if "problem" in over or "seed" in over or "workers" in over:
            raise ConfigError("compare runs must share the problem, seed and worker count; "
                              "set them once with --problem/--seed/--workers")
        settings = resolve_settings({k: _coerce(k, v) for k, v in over.items()}, base)
        runs.append((label or settings["method"], settings))
    labels = [lab for lab, _ in runs]
    for i, (lab, s) in enumerate(runs):
        if labels.count(lab) > 1:
            runs[i] = (f"{lab}#{labels[:i + 1].count(lab)}", s)
    merged, comments, code = [], [], 0
    for label, settings in runs:
        start = time.perf_counter()
        rows, status, ledger, err = execute(settings)
        elapsed = time.perf_counter() - start
        merged.extend([label] + r for r in rows)
        comments.append(f"# run {label}: " + " ".join(l[2:] for l in _metadata(settings)))
        print(_summary(label, rows, status, ledger, elapsed))
        if err is not None:
            print(f"error in {label}: {err}", file=sys.stderr)
            code = 1
    write_atomic(args.out, render_csv(comments, COMPARE_HEADER, merged))
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run":
            return cmd_run(args)
        return cmd_compare(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DingoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
