"""Command-line entry point: ``dwcbilevel {bench,solve,region,selftest}``."""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .bench import (COLUMNS, BenchConfig, ConfigError, build_problem, dwc_params,
                    export_decision_region, grid_search, run_benchmark)
from .datagen import generate

log = logging.getLogger("dwcbilevel")


def _load_config(args):
    if args.config is None:
        raise ConfigError("--config is required")
    data = {}
    try:
        with open(args.config) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key in ("out", "seed", "trials", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if getattr(args, "method", None):
        data["methods"] = [m for spec in args.method for m in spec.split(",") if m]
    return BenchConfig.from_dict(data)


def cmd_bench(args):
    cfg = _load_config(args)
    records, summary = run_benchmark(cfg)
    for m, stats in summary.items():
        parts = [f"{c}={stats[c][0]:.4g}" for c in COLUMNS[2:]]
        print(m, " ".join(parts))
    failed = [r for r in records if r.failed]
    for r in failed:
        print(f"failed: {r.method} seed={r.seed}: {r.error}", file=sys.stderr)
    return 2 if failed else 0


def _solve(cfg):
    from .dwc import run_ipdwca
    task = generate(cfg.gen_spec(cfg.seed))
    prob = build_problem(cfg.kind, task)
    if cfg.init is not None:
        x0 = np.asarray(cfg.init, float)
    else:
        x0 = grid_search(prob, resolution=cfg.init_grid, kind=cfg.kind).x
    trace = run_ipdwca(prob, dwc_params(cfg, prob), x0)
    return task, prob, trace


def cmd_solve(args):
    cfg = _load_config(args)
    task, prob, trace = _solve(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    trace.to_jsonl(os.path.join(cfg.out, "trace.jsonl"))
    lower = prob.lower
    yf = lower.solve_lower(trace.x, target=1e-8)
    print(json.dumps({"reason": trace.reason, "iters": trace.iters, "x": trace.x.tolist(),
                      "feasibility": trace.final.feasibility,
                      "val_err": lower.val_error(trace.x, yf),
                      "test_err": lower.test_error(trace.x, yf)}, sort_keys=True))
    return 0


def cmd_region(args):
    cfg = _load_config(args)
    if cfg.kind != "svm":
        raise ConfigError("decision regions are defined for the svm task only")
    task = generate(cfg.gen_spec(cfg.seed))
    prob = build_problem(cfg.kind, task)
    if args.sigma is not None and args.C is not None:
        x = np.array([args.sigma, args.C])
    else:
        _, _, trace = _solve(cfg)
        x = trace.x
    eta = prob.lower.solve_lower(x, target=1e-8)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "region.csv")
    export_decision_region(task, x[0], x[1], eta, args.resolution, path)
    print(path)
    return 0


def cmd_selftest(args):
    from .applications import ElasticNetTask, Splits, build_elastic_net
    from .moreau import MoreauConfig, moreau_subgrad_check
    rng = np.random.default_rng(0)
    A = rng.standard_normal((20, 5))
    b = A @ np.ones(5) + 0.1 * rng.standard_normal(20)
    task = ElasticNetTask(Splits(A, b, A, b, A, b))
    prob = build_elastic_net(task)
    cfg = MoreauConfig(0.5 / prob.rho_f, 2 * prob.rho_f)
    _, _, rel = moreau_subgrad_check(prob, cfg, np.array([1.0, 2.0]), 0.3 * np.ones(5))
    ok = rel <= 1e-4
    print(f"moreau subgradient vs finite differences: rel={rel:.2e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="dwcbilevel")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("bench", "solve", "region", "selftest"):
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--method", action="append")
        if name == "region":
            sp.add_argument("--sigma", type=float)
            sp.add_argument("--C", type=float)
            sp.add_argument("--resolution", type=int, default=50)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    handler = {"bench": cmd_bench, "solve": cmd_solve, "region": cmd_region,
               "selftest": cmd_selftest}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
