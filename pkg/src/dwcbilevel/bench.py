"""Benchmark harness: repeated trials of iP-DwCA and search baselines."""
import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import Optional

import numpy as np

from . import applications as ap
from .datagen import SQUARE_SIDE, GenSpec, generate
from .dwc import DwcParams, run_ipdwca

COLUMNS = ["method", "seed", "time_s", "val_err", "test_err", "val_err_infeas",
           "test_err_infeas", "feasibility", "iters", "beta_final"]
METHODS = ("ipdwca", "ipdwca-early", "grid", "random")


class ConfigError(ValueError):
    pass


# per-task defaults; rho_f-dependent entries are filled in at build time
DEFAULTS = {
    "elastic-net": {
        "task": {"p": 50, "n_train": 100, "n_val": 100, "n_test": 300},
        "dwc": {"epsilon": 1e-6, "beta0": 1.0, "delta_beta": 1.0, "c_beta": 1.0, "alpha": 0.01,
                "tol": 1e-3, "max_iters": 200},
        "early_stop": 10, "grid": 30, "random": 100, "init_grid": 6,
    },
    "sgl": {
        "task": {"p": 50, "groups": 10, "n_train": 100, "n_val": 100, "n_test": 300},
        "dwc": {"epsilon": 1e-6, "beta0": 1.0, "delta_beta": 0.1, "c_beta": 1.0, "alpha": 0.001,
                "tol": 1.0, "max_iters": 100},
        "early_stop": 5, "grid": 10, "random": 100, "init_grid": 5,
    },
    "svm": {
        "task": {"p": 2, "n_train": 100, "n_val": 100, "n_test": 300},
        "dwc": {"epsilon": 1e-4, "beta0": 1e-4, "delta_beta": 5e-4, "c_beta": 1.0, "alpha": 1e-4,
                "tol": 0.01, "max_iters": 200},
        "early_stop": 5, "grid": 10, "random": 100, "init": [0.1, 1.0],
    },
}


@dataclass
class BenchConfig:
    kind: str
    methods: list = field(default_factory=lambda: ["ipdwca", "grid", "random"])
    trials: int = 1
    seed: int = 0
    out: str = "bench-out"
    workers: int = 1
    task: dict = field(default_factory=dict)
    dwc: dict = field(default_factory=dict)
    early_stop: Optional[int] = None
    grid: Optional[int] = None
    random: Optional[int] = None
    init_grid: Optional[int] = None
    init: Optional[list] = None
    timing: str = "on"
    save_traces: bool = False

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        if self.trials < 1:
            raise ConfigError("at least one trial is required")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.timing not in ("on", "off"):
            raise ConfigError("timing must be 'on' or 'off'")
        d = DEFAULTS[self.kind]
        self.task = {**d["task"], **self.task}
        self.dwc = {**d["dwc"], **self.dwc}
        for name in ("early_stop", "grid", "random", "init_grid", "init"):
            if getattr(self, name) is None:
                setattr(self, name, d.get(name))
        try:
            self.gen_spec(self.seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def gen_spec(self, seed):
        return GenSpec(self.kind, seed=seed, **self.task)


@dataclass
class TrialRecord:
    method: str
    seed: int
    time_s: float = math.nan
    val_err: float = math.nan
    test_err: float = math.nan
    val_err_infeas: float = math.nan
    test_err_infeas: float = math.nan
    feasibility: float = math.nan
    iters: int = 0
    beta_final: float = math.nan
    failed: bool = False
    error: str = ""
    decrease_violations: int = 0
    worst_decrease_gap: float = -math.inf
    trace: list = field(default_factory=list, repr=False)

    def row(self):
        out = []
        for c in COLUMNS:
            v = getattr(self, c)
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


@dataclass
class SearchResult:
    x: np.ndarray
    y: np.ndarray
    val_err: float
    test_err: float
    n_solves: int


# --------------------------------------------------------------------------
# problems and candidate sets

def build_problem(kind, task):
    if kind == "elastic-net":
        return ap.build_elastic_net(task)
    if kind == "sgl":
        return ap.build_sgl(task)
    return ap.build_svm(task)


def dwc_params(cfg: BenchConfig, prob, early=False):
    kw = dict(cfg.dwc)
    rho_f = prob.rho_f
    kw.setdefault("gamma", 0.5 / rho_f)
    kw.setdefault("rho_v", 2.0 * rho_f)
    kw.setdefault("stop", "scaled")
    if early:
        kw["early_stop"] = cfg.early_stop
    return DwcParams(**kw)


def _expand(kind, prob, pts):
    """Map search coordinates to upper-level variables (SGL ties group weights)."""
    pts = np.atleast_2d(np.asarray(pts, float))
    if kind == "sgl" and pts.shape[1] == 2:
        M = prob.n - 1
        return np.hstack([np.repeat(pts[:, :1], M, axis=1), pts[:, 1:]])
    return pts


def grid_candidates(kind, resolution):
    if kind == "elastic-net":
        lo, hi = (0.0, 0.0), (100.0, 100.0)
    elif kind == "sgl":
        lo, hi = (5.0, 5.0), (500.0, 500.0)
    else:
        lo, hi = (0.1, 1.0), (10.0, 10.0)
    a = np.linspace(lo[0], hi[0], resolution)
    b = np.linspace(lo[1], hi[1], resolution)
    return np.array([[u, v] for u in a for v in b])


def random_candidates(kind, prob, count, rng):
    if kind == "elastic-net":
        return rng.uniform(0.0, 100.0, size=(count, 2))
    if kind == "sgl":
        return rng.uniform(5.0, 500.0, size=(count, prob.n))
    # the variable box keeps sigma and C away from zero
    return rng.uniform(prob.X.lower, prob.X.upper, size=(count, 2))


def _evaluate(prob, candidates):
    """Select the candidate with the smallest validation error (first wins ties)."""
    lower = prob.lower
    best = None
    warm = None
    for x in candidates:
        y = lower.solve_lower(x, warm=warm, target=1e-8)
        warm = y if hasattr(lower, "kinds") else None
        v = lower.val_error(x, y)
        if best is None or v < best[0]:
            best = (v, x.copy(), y.copy())
    v, x, y = best
    return SearchResult(x, y, v, lower.test_error(x, y), len(candidates))


def grid_search(prob, candidates=None, resolution=None, kind=None):
    """Exhaustive search over candidates (row-major order), or a uniform grid."""
    if candidates is None:
        candidates = _expand(kind, prob, grid_candidates(kind, resolution))
    return _evaluate(prob, np.atleast_2d(np.asarray(candidates, float)))


def random_search(prob, count, seed, kind):
    rng = np.random.default_rng(seed)
    return _evaluate(prob, random_candidates(kind, prob, count, rng))


# --------------------------------------------------------------------------
# trials

def _clock(cfg):
    return time.perf_counter if cfg.timing == "on" else (lambda: 0.0)


def run_method(cfg: BenchConfig, method, prob, seed):
    clock = _clock(cfg)
    rec = TrialRecord(method, seed)
    lower = prob.lower
    t0 = clock()
    if method == "grid":
        res = grid_search(prob, resolution=cfg.grid, kind=cfg.kind)
    elif method == "random":
        res = random_search(prob, cfg.random, seed + 7919, cfg.kind)
    if method in ("grid", "random"):
        rec.time_s = float(clock() - t0)
        rec.val_err = rec.val_err_infeas = res.val_err
        rec.test_err = rec.test_err_infeas = res.test_err
        rec.feasibility = 0.0
        rec.iters = res.n_solves
        return rec
    if cfg.init is not None:
        x0 = np.asarray(cfg.init, float)
    else:
        x0 = grid_search(prob, resolution=cfg.init_grid, kind=cfg.kind).x
    params = dwc_params(cfg, prob, early=(method == "ipdwca-early"))
    trace = run_ipdwca(prob, params, x0)
    rec.time_s = float(clock() - t0)
    x, y = trace.x, trace.y
    yf = lower.solve_lower(x, target=1e-8)
    rec.val_err = lower.val_error(x, yf)
    rec.test_err = lower.test_error(x, yf)
    rec.val_err_infeas = lower.val_error(x, y)
    rec.test_err_infeas = lower.test_error(x, y)
    rec.feasibility = float(trace.final.feasibility)
    rec.iters = int(trace.iters)
    rec.beta_final = float(trace.beta_final)
    rec.trace = trace.records
    gaps = [r["E"] + 0.25 * params.alpha * r["dz"] ** 2 - r["E_prev"] for r in trace.records]
    rec.decrease_violations = sum(not r["decrease_ok"] for r in trace.records)
    rec.worst_decrease_gap = max(
        (g / (1 + abs(r["E_prev"])) for g, r in zip(gaps, trace.records)), default=-math.inf)
    return rec


def run_trial(cfg: BenchConfig, index):
    seed = cfg.seed + index
    task = generate(cfg.gen_spec(seed))
    prob = build_problem(cfg.kind, task)
    out = []
    for m in cfg.methods:
        try:
            out.append(run_method(cfg, m, prob, seed))
        except Exception as e:  # recorded as a failed row
            out.append(TrialRecord(m, seed, failed=True, error=f"{type(e).__name__}: {e}"))
    return out


def _job(args):
    cfg, i = args
    return run_trial(cfg, i)


def summarize(records):
    """``{method: {column: (mean, std)}}`` over successful trials."""
    out = {}
    for m in dict.fromkeys(r.method for r in records):
        rows = [r for r in records if r.method == m and not r.failed]
        stats = {}
        for c in COLUMNS[2:]:
            v = np.array([float(getattr(r, c)) for r in rows])
            stats[c] = (float(np.mean(v)), float(np.std(v))) if v.size else (math.nan, math.nan)
        out[m] = stats
    return out


def write_summary(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + COLUMNS[2:])
        for m, stats in summary.items():
            w.writerow([m] + [f"{stats[c][0]:.6g}+-{stats[c][1]:.6g}" for c in COLUMNS[2:]])


def run_benchmark(cfg: BenchConfig):
    """Run all trials, streaming rows to ``<out>/results.csv``.

    Returns ``(records, summary)``.  Rows are written in trial order then
    method order regardless of the worker count.
    """
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "results.csv")
    records = []
    jobs = [(cfg, i) for i in range(cfg.trials)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        fh.flush()
        if cfg.workers > 1:
            pool = get_context("spawn").Pool(cfg.workers)
            results = pool.imap(_job, jobs)
        else:
            pool = None
            results = map(_job, jobs)
        try:
            for recs in results:
                for r in recs:
                    w.writerow(r.row())
                    records.append(r)
                fh.flush()
        finally:
            if pool is not None:
                pool.close()
                pool.join()
    if cfg.save_traces:
        tdir = os.path.join(cfg.out, "traces")
        os.makedirs(tdir, exist_ok=True)
        for r in records:
            if r.trace:
                with open(os.path.join(tdir, f"{r.method}-{r.seed}.jsonl"), "w") as fh:
                    for line in r.trace:
                        fh.write(json.dumps(line, sort_keys=True, default=float) + "\n")
    summary = summarize(records)
    write_summary(summary, os.path.join(cfg.out, "summary.csv"))
    return records, summary


# --------------------------------------------------------------------------
# decision regions

def export_decision_region(task: ap.SvmTask, sigma, C, eta, grid_resolution, path=None):
    """Decision values over a uniform grid on the data square.

    Returns an array of rows ``(x1, x2, value, sign)``; also written as CSV
    when ``path`` is given.
    """
    if grid_resolution < 1:
        raise ValueError("grid resolution must be positive")
    from . import kernels
    lower = ap.KernelSvm(task)
    eta = np.asarray(eta, float)
    half = 0.5 * SQUARE_SIDE
    ax = np.linspace(-half, half, grid_resolution)
    G = np.array([[u, v] for u in ax for v in ax])
    j = lower.jstar(C, eta)
    D = kernels.sqdist(G, task.splits.A_tr)
    val = lower.decision(float(sigma), eta, D, j)
    out = np.column_stack([G, val, np.sign(val)])
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "value", "sign"])
            for row in out:
                w.writerow([repr(float(v)) for v in row])
    return out
