import csv
import json

import numpy as np
import pytest

from dwcbilevel import bench
from dwcbilevel.applications import (ElasticNetTask, KernelSvm, Splits, SvmTask,
                                     build_elastic_net, build_toy)
from dwcbilevel.bench import (COLUMNS, BenchConfig, ConfigError, export_decision_region,
                              grid_search, run_benchmark, run_method)
from dwcbilevel.cli import main
from dwcbilevel.datagen import SQUARE_SIDE, GenSpec, generate
from dwcbilevel.dwc import DwcParams, run_ipdwca

SMALL_EN = {"p": 15, "n_train": 20, "n_val": 15, "n_test": 15}


def small_cfg(tmp_path, **kw):
    base = dict(kind="elastic-net", methods=["ipdwca", "grid"], trials=2, seed=3,
                out=str(tmp_path), task=SMALL_EN, grid=3, init_grid=2, timing="off",
                dwc={"max_iters": 8})
    base.update(kw)
    return BenchConfig(**base)


class Counting:
    """Wraps a lower adapter and counts lower-level solves."""

    def __init__(self, lower):
        self.inner = lower
        self.calls = 0

    def solve_lower(self, *a, **k):
        self.calls += 1
        return self.inner.solve_lower(*a, **k)

    def __getattr__(self, name):
        return getattr(self.inner, name)


def test_two_by_two_grid_counts_lower_solves(tmp_path):
    cfg = small_cfg(tmp_path, methods=["grid"], trials=1, grid=2)
    prob = bench.build_problem(cfg.kind, generate(cfg.gen_spec(cfg.seed)))
    prob.lower = Counting(prob.lower)
    rec = run_method(cfg, "grid", prob, cfg.seed)
    assert prob.lower.calls == 4
    assert rec.iters == 4 and rec.feasibility == 0.0


def test_single_candidate_grid_returns_it():
    prob = bench.build_problem("elastic-net", generate(GenSpec("elastic-net", 10, 10, 10, 15)))
    res = grid_search(prob, candidates=[[3.0, 7.0]])
    assert np.array_equal(res.x, [3.0, 7.0]) and res.n_solves == 1


def test_sgl_grid_ties_group_weights():
    prob = bench.build_problem("sgl", generate(GenSpec("sgl", 10, 10, 10, 25, groups=5)))
    pts = bench._expand("sgl", prob, bench.grid_candidates("sgl", 3))
    assert pts.shape == (9, 6)
    assert np.all(pts[:, :5] == pts[:, :1])
    assert np.array_equal(np.unique(pts[:, 0]), [5.0, 252.5, 500.0])


def test_grid_argmin_matches_independent_oracle():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(8, 2))
    b = A @ np.array([1.0, -0.5]) + 0.8 * rng.normal(size=8)
    Av = rng.normal(size=(6, 2))
    bv = Av @ np.array([1.0, -0.5]) + 0.8 * rng.normal(size=6)
    prob = build_elastic_net(ElasticNetTask(Splits(A, b, Av, bv, Av, bv)))
    cands = np.array([[u, v] for u in (0.0, 2.0, 6.0) for v in (0.0, 3.0, 9.0)])
    res = grid_search(prob, candidates=cands)

    def prox_by_grid(lam):
        # two-level 1e-4 grid over the coefficient box
        c, half = np.zeros(2), 2.0
        for step in (1e-2, 1e-4):
            ax = [np.clip(np.arange(ci - half, ci + half + step / 2, step), -2, 2) for ci in c]
            W = np.array(np.meshgrid(*ax, indexing="ij")).reshape(2, -1).T
            R = W @ A.T - b
            v = (0.5 * np.sum(R ** 2, 1) + lam[0] * np.abs(W).sum(1)
                 + 0.5 * lam[1] * np.sum(W ** 2, 1))
            c = W[np.argmin(v)]
            half = 1.5 * step
        return c

    errs = [np.mean((Av @ prox_by_grid(lam) - bv) ** 2) for lam in cands]
    assert np.array_equal(res.x, cands[int(np.argmin(errs))])
    assert res.val_err == pytest.approx(min(errs), rel=1e-3)


# ---------------------------------------------------------------- decision regions

def two_point():
    A = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([-1.0, 1.0])
    return SvmTask(Splits(A, b, A, b, A, b))


def test_region_row_count_and_zero_eta(tmp_path):
    task = generate(GenSpec("svm", 12, 6, 6, seed=1))
    path = tmp_path / "r.csv"
    out = export_decision_region(task, 1.0, 2.0, np.zeros(12), 7, path)
    assert out.shape == (49, 4)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["x1", "x2", "value", "sign"] and len(rows) == 50
    lower = KernelSvm(task)
    c = lower.decision_offset(1.0, np.zeros(12), lower.jstar(2.0, np.zeros(12)))
    assert np.all(out[:, 2] == -c)
    half = 0.5 * SQUARE_SIDE
    assert out[:, :2].min() == -half and out[:, :2].max() == half


def test_region_two_point_boundary():
    # with eta1 = eta2 = 1/(1 - e^-sigma) the decision function is
    # a (K(., a2) - K(., a1)), which changes sign on the bisector x1 = 1/2
    sigma = 1.0
    a = 1.0 / (1.0 - np.exp(-sigma))
    out = export_decision_region(two_point(), sigma, 10.0, np.array([a, a]), 20)
    P, val = out[:, :2], out[:, 2]
    ref = a * (np.exp(-sigma * ((P[:, 0] - 1) ** 2 + P[:, 1] ** 2))
               - np.exp(-sigma * (P[:, 0] ** 2 + P[:, 1] ** 2)))
    assert np.allclose(val, ref, atol=1e-12)
    assert np.array_equal(np.sign(val), np.sign(P[:, 0] - 0.5))


# ---------------------------------------------------------------- harness

def test_csv_columns_and_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = small_cfg(tmp_path / name)
        records, summary = run_benchmark(cfg)
        outs.append((tmp_path / name / "results.csv").read_bytes())
        assert not any(r.failed for r in records)
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert len(lines) == 1 + 2 * 2
    assert set(summary) == {"ipdwca", "grid"}
    rows = list(csv.DictReader(outs[0].decode().splitlines()))
    assert [r["method"] for r in rows] == ["ipdwca", "grid", "ipdwca", "grid"]
    assert [int(r["seed"]) for r in rows] == [3, 3, 4, 4]
    assert all(float(r["feasibility"]) >= 0 for r in rows)
    assert all(float(r["time_s"]) == 0.0 for r in rows)


def test_failed_method_recorded_and_run_continues(tmp_path):
    cfg = small_cfg(tmp_path, trials=1, dwc={"alpha": -1.0})
    records, _ = run_benchmark(cfg)
    assert [r.failed for r in records] == [True, False]
    assert "alpha" in records[0].error


def test_config_validation():
    for bad in ({"kind": "lasso"}, {"kind": "svm", "methods": []},
                {"kind": "svm", "methods": ["tpe"]}, {"kind": "svm", "trials": 0},
                {"kind": "svm", "timing": "maybe"}, {"kind": "sgl", "task": {"p": 52}},
                {"kind": "svm", "bogus": 1}):
        with pytest.raises(ConfigError):
            BenchConfig.from_dict(bad)


def test_toy_feasible_and_infeasible_metrics_converge():
    # the upper objective at (x, y) and at (x, S(x)) agree as feasibility vanishes
    p = build_toy()
    gaps, feas = [], []
    for eps in (1e-1, 1e-2, 1e-3, 1e-4):
        prm = DwcParams(gamma=0.5, rho_v=2.0, epsilon=eps, alpha=0.01, tol=1e-7,
                        max_iters=5000)
        tr = run_ipdwca(p, prm, [0.5], [0.5])
        x, y = float(tr.x[0]), float(tr.y[0])
        feas.append(tr.final.feasibility)
        gaps.append(abs(p.F(np.array([x, x])) - p.F(np.array([x, y]))))
    assert all(a > b for a, b in zip(feas, feas[1:]))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


# ---------------------------------------------------------------- CLI

def write_cfg(tmp_path, **kw):
    d = dict(kind="elastic-net", methods=["grid"], trials=1, task=SMALL_EN, grid=2,
             timing="off")
    d.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "results.csv").exists()
    assert (tmp_path / "o" / "summary.csv").exists()
    # a failing trial
    bad = write_cfg(tmp_path, methods=["ipdwca"], dwc={"alpha": -1.0})
    assert main(["bench", "--config", bad, "--out", str(tmp_path / "f")]) == 2
    # configuration errors
    assert main(["bench", "--out", str(tmp_path)]) == 1
    assert main(["bench", "--config", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["bench", "--config", str(tmp_path / "junk.json")]) == 1
    assert main(["bench", "--config", write_cfg(tmp_path, kind="lasso")]) == 1
    assert main(["region", "--config", write_cfg(tmp_path)]) == 1


def test_cli_overrides_and_method_flag(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert main(["bench", "--config", cfg, "--out", str(out), "--seed", "5", "--trials", "2",
                 "--method", "grid,random"]) == 0
    rows = list(csv.DictReader(open(out / "results.csv")))
    assert [(r["method"], r["seed"]) for r in rows] == [
        ("grid", "5"), ("random", "5"), ("grid", "6"), ("random", "6")]


def test_cli_solve_region_selftest(tmp_path, capsys):
    cfg = write_cfg(tmp_path, kind="svm", task={"n_train": 20, "n_val": 10, "n_test": 10},
                    dwc={"max_iters": 2})
    assert main(["region", "--config", cfg, "--out", str(tmp_path / "r"), "--sigma", "1",
                 "--C", "1", "--resolution", "5"]) == 0
    assert len((tmp_path / "r" / "region.csv").read_text().splitlines()) == 26
    en = write_cfg(tmp_path, dwc={"max_iters": 3}, init_grid=2)
    assert main(["solve", "--config", en, "--out", str(tmp_path / "s")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["iters"] <= 3 and out["feasibility"] >= 0
    assert (tmp_path / "s" / "trace.jsonl").exists()
    assert main(["selftest"]) == 0
