"""
Command line front end.

Commands
--------
ksvd            Kronecker SVD of a matrix file, with truncation errors.
train-linear    Alignment harness on planted tasks; trace CSV + bounds JSON per seed.
grad-stability  Gradient norms of several designs on one task; wide CSV.
plan            Rank component designs under a parameter budget.

Every command accepts ``--config FILE`` (a JSON object whose keys are the
long option names with dashes replaced by underscores); explicit flags win
over the file. Outputs go to ``--out``, else ``$KRONADAPT_OUT``, else
``./kronadapt-out``. Files are written to a temporary name and renamed, so
a failed run leaves no partial artifacts. The exit status reports whether
the command ran, not whether any scientific check passed.
"""
import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import alignlab
from .errors import KronError, ParameterError, ParseError
from .kron import KronConfig, ksvd
from .planner import BudgetQuery, plan

OUT_ENV = "KRONADAPT_OUT"
DEFAULT_OUT = "kronadapt-out"

DEFAULT_GRID = "2,2,8;4,4,8;2,16,2;8,8,1"


# -- matrix text format --------------------------------------------------------

def parse_matrix(text, path=None):
    """Parse ``rows cols`` followed by column-major values.

    Values may be spread over any number of lines; ``#`` starts a comment.
    """
    header = None
    values = []
    value_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if header is None:
            if len(tokens) != 2:
                raise ParseError("header must be 'rows cols'", lineno, path)
            try:
                header = (int(tokens[0]), int(tokens[1]))
            except ValueError:
                raise ParseError(f"non-integer header {line!r}", lineno, path)
            if header[0] < 1 or header[1] < 1:
                raise ParseError(f"dimensions must be positive, got {header}", lineno, path)
            continue
        for tok in tokens:
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"not a number: {tok!r}", lineno, path)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {tok!r}", lineno, path)
            values.append(v)
            value_lines.append(lineno)
    if header is None:
        raise ParseError("empty matrix file", None, path)
    rows, cols = header
    if len(values) != rows * cols:
        line = value_lines[rows * cols] if len(values) > rows * cols else None
        raise ParseError(f"expected {rows * cols} values, found {len(values)}", line, path)
    return np.asarray(values).reshape(rows, cols, order="F")


def format_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    for j in range(m.shape[1]):
        lines.append(" ".join(repr(float(v)) for v in m[:, j]))
    return "\n".join(lines) + "\n"


def read_matrix(path):
    with open(path) as fh:
        return parse_matrix(fh.read(), path)


# -- output helpers ----------------------------------------------------------

def output_dir(arg):
    d = arg or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(d, exist_ok=True)
    return d


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_all(outdir, files):
    """Write ``{name: text}`` only after every payload has been produced."""
    paths = []
    for name, text in files.items():
        p = os.path.join(outdir, name)
        atomic_write(p, text)
        paths.append(p)
    return paths


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- argument handling -------------------------------------------------------

def parse_triple(text):
    try:
        parts = [int(p) for p in text.replace(" ", "").split(",")]
    except ValueError:
        raise ParameterError(f"design must look like 'r1,r2,r', got {text!r}")
    if len(parts) != 3:
        raise ParameterError(f"design must have three entries, got {text!r}")
    return tuple(parts)


def parse_grid(text):
    if isinstance(text, (list, tuple)):
        return [tuple(t) if not isinstance(t, str) else parse_triple(t) for t in text]
    return [parse_triple(t) for t in text.split(";") if t.strip()]


def parse_seeds(text):
    """``"0-9"``, ``"1,4,7"`` or a mix; lists from a config file pass through."""
    if isinstance(text, int):
        return [text]
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ParameterError("empty seed list")
    return seeds


def load_config_file(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, path)
    if not isinstance(data, dict):
        raise ParseError("config file must hold a JSON object", None, path)
    return data


def resolve(args, defaults):
    """Merge defaults < config file < explicit flags (flags default to None)."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        data = load_config_file(args.config)
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ParseError(f"unknown keys {unknown}", None, args.config)
        merged.update(data)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


# -- commands ----------------------------------------------------------------

KSVD_DEFAULTS = {"input": None, "r1": None, "r2": None, "k": None, "factors": True}


def cmd_ksvd(args):
    p = resolve(args, KSVD_DEFAULTS)
    if p["input"] is None or p["r1"] is None or p["r2"] is None:
        raise ParameterError("ksvd needs an input file, --r1 and --r2")
    K = read_matrix(p["input"])
    d_out, d_in = K.shape
    cfg = KronConfig(int(p["r1"]), int(p["r2"]), 1, d_in, d_out)
    res = ksvd(K, cfg)
    k = res.rank if p["k"] is None else min(int(p["k"]), res.rank)
    norm = float(np.linalg.norm(K))
    rows = []
    for j in range(k + 1):
        err = float(np.linalg.norm(K - res.reconstruct(j))) if j else norm
        rows.append({"k": j, "tail_energy": res.tail_energy(j), "reconstruction_error": err})
    report = {"shape": [d_out, d_in], "r1": cfg.r1, "r2": cfg.r2, "rank": res.rank,
              "frobenius_norm": norm, "sigmas": [float(s) for s in res.sigmas],
              "truncations": rows}
    files = {"ksvd_report.json": _dumps(report)}
    if p["factors"]:
        for i, pair in enumerate(res.pairs[:k]):
            files[f"A_{i + 1}.txt"] = format_matrix(pair.A)
            files[f"B_{i + 1}.txt"] = format_matrix(pair.B)
    return files


TRAIN_DEFAULTS = {"d": 32, "n": 512, "r_star": 4, "design": "2,2,4", "theta": 0.3, "xi": 0.5,
                  "eta_sigma": 0.1, "alpha_mult": 1.0, "steps": None, "seeds": "0",
                  "noise": 0.0, "workers": 1}


def _train_one(job):
    seed, p = job
    r1, r2, r = parse_triple(p["design"]) if isinstance(p["design"], str) else p["design"]
    cfg = KronConfig(r1, r2, r, p["d"], p["d"])
    run = alignlab.theorem_run(seed, cfg, N=p["n"], r_star=p["r_star"], theta=p["theta"],
                               xi=p["xi"], eta_sigma=p["eta_sigma"], alpha_mult=p["alpha_mult"],
                               steps=p["steps"], noise_std=p["noise"])
    b = json.loads(run.bounds.to_json())
    b.update({"seed": seed, "alpha": run.alpha, "eta": run.eta, "theta": p["theta"], "xi": p["xi"],
              "first_step_align_A": run.trace.first_step_below("align_A", p["theta"]),
              "first_step_align_B": run.trace.first_step_below("align_B", p["theta"])})
    return seed, run.trace.to_csv(), _dumps(b)


def cmd_train_linear(args):
    p = resolve(args, TRAIN_DEFAULTS)
    if not (0 < p["theta"] < 1 and 0 < p["xi"] < 1):
        raise ParameterError("theta and xi must lie in (0, 1)")
    if p["steps"] is not None and int(p["steps"]) < 0:
        raise ParameterError("steps must be non-negative")
    r1, r2, r = parse_triple(p["design"]) if isinstance(p["design"], str) else p["design"]
    KronConfig(r1, r2, r, p["d"], p["d"])  # validate before any work
    seeds = parse_seeds(p["seeds"])
    jobs = [(s, p) for s in seeds]
    workers = max(1, int(p["workers"]))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    files = {}
    for seed, trace_csv, bounds_json in sorted(results, key=lambda x: x[0]):
        files[f"trace_seed{seed}.csv"] = trace_csv
        files[f"bounds_seed{seed}.json"] = bounds_json
    return files


STABILITY_DEFAULTS = {"grid": DEFAULT_GRID, "lambda_mode": "stabilized", "alpha": 16.0,
                      "eta": 1e-5, "steps": 200, "seed": 0, "d": 64, "n": 256,
                      "window_start": 50}


def cmd_grad_stability(args):
    p = resolve(args, STABILITY_DEFAULTS)
    if p["lambda_mode"] not in ("stabilized", "unit"):
        raise ParameterError(f"lambda mode must be 'stabilized' or 'unit', got {p['lambda_mode']!r}")
    grid = parse_grid(p["grid"])
    configs = [KronConfig(r1, r2, r, p["d"], p["d"], alpha=float(p["alpha"])) for r1, r2, r in grid]
    if int(p["steps"]) < 0 or not float(p["eta"]) >= 0:
        raise ParameterError("steps and eta must be non-negative")
    task = alignlab.stability_task(int(p["seed"]), p["d"], p["n"])
    series = [alignlab.grad_norm_series(task, c, p["lambda_mode"], float(p["eta"]), int(p["steps"]),
                                        rng=int(p["seed"]) + 1) for c in configs]
    names = ("grad_norm_A", "grad_norm_B", "input_grad_norm", "grad_norm")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"{c.label()}:{n}" for c in configs for n in names])
    for t in range(int(p["steps"]) + 1):
        w.writerow([t] + [repr(float(s[t, j])) for s in series for j in range(4)])
    start = int(p["window_start"])
    summary = {"lambda_mode": p["lambda_mode"], "alpha": float(p["alpha"]), "eta": float(p["eta"]),
               "steps": int(p["steps"]), "window_start": start,
               "designs": [c.label() for c in configs],
               "spread_ratio": {n: alignlab.spread_ratio([s[:, j] for s in series], start)
                                for j, n in enumerate(names)}}
    return {f"grad_stability_{p['lambda_mode']}.csv": buf.getvalue(),
            f"grad_stability_{p['lambda_mode']}.json": _dumps(summary)}


PLAN_DEFAULTS = {"d_in": None, "d_out": None, "budget": None, "r_star_hint": 8,
                 "r1_min": 2, "r1_max": 4, "top": None}


def cmd_plan(args):
    p = resolve(args, PLAN_DEFAULTS)
    if p["d_in"] is None or p["budget"] is None:
        raise ParameterError("plan needs --d-in and --budget")
    d_out = p["d_out"] if p["d_out"] is not None else p["d_in"]
    q = BudgetQuery(int(p["d_in"]), int(d_out), int(p["budget"]), int(p["r_star_hint"]),
                    (int(p["r1_min"]), int(p["r1_max"])))
    result = plan(q)
    if p["top"] is not None:
        result.entries = result.entries[: int(p["top"])]
    return {"plan.json": result.to_json() + "\n"}


# -- parser ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="kronadapt", description="Kronecker adapter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")

    sp = sub.add_parser("ksvd", help="Kronecker SVD of a matrix file")
    sp.add_argument("input", nargs="?")
    sp.add_argument("--r1", type=int)
    sp.add_argument("--r2", type=int)
    sp.add_argument("-k", type=int, help="largest truncation to report (default: all)")
    sp.add_argument("--no-factors", dest="factors", action="store_const", const=False)
    common(sp)
    sp.set_defaults(func=cmd_ksvd)

    sp = sub.add_parser("train-linear", help="alignment harness on planted tasks")
    sp.add_argument("--d", type=int, help="d_in = d_out")
    sp.add_argument("--n", type=int, help="number of samples")
    sp.add_argument("--r-star", type=int)
    sp.add_argument("--design", help="r1,r2,r")
    sp.add_argument("--theta", type=float)
    sp.add_argument("--xi", type=float)
    sp.add_argument("--eta-sigma", type=float, help="eta * sigma_1(Gt)")
    sp.add_argument("--alpha-mult", type=float, help="init std as a multiple of the alpha bound")
    sp.add_argument("--steps", type=int, help="fixed step count (default: until aligned)")
    sp.add_argument("--seeds", help="e.g. 0-9 or 1,3,5")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--workers", type=int)
    common(sp)
    sp.set_defaults(func=cmd_train_linear)

    sp = sub.add_parser("grad-stability", help="gradient norms across designs")
    sp.add_argument("--grid", help="designs 'r1,r2,r;r1,r2,r;...'")
    sp.add_argument("--lambda-mode", choices=["stabilized", "unit"])
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--window-start", type=int)
    common(sp)
    sp.set_defaults(func=cmd_grad_stability)

    sp = sub.add_parser("plan", help="rank designs under a parameter budget")
    sp.add_argument("--d-in", type=int)
    sp.add_argument("--d-out", type=int)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--r-star-hint", type=int)
    sp.add_argument("--r1-min", type=int)
    sp.add_argument("--r1-max", type=int)
    sp.add_argument("--top", type=int)
    common(sp)
    sp.set_defaults(func=cmd_plan)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        files = args.func(args)
        outdir = output_dir(args.out)
        for path in write_all(outdir, files):
            print(path)
    except (KronError, OSError) as exc:
        print(f"kronadapt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
