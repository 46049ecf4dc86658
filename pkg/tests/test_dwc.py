import io
import json

import numpy as np
import pytest

from dwcbilevel.applications import (ElasticNetTask, Splits, build_elastic_net, build_toy,
                                     toy_relaxed_solution)
from dwcbilevel.dca import DcIterationState, ipdca_step, linearize
from dwcbilevel.dwc import (DwcParams, build_dwc_program, dwc_subproblem, feasibility,
                            run_ipdwca)
from dwcbilevel.inner import solve_composite
from dwcbilevel.moreau import eval_moreau
from dwcbilevel.problem import BilevelProblem, Box, WeaklyConvexFn

TOY = dict(gamma=0.5, rho_v=2.0, beta0=1.0, delta_beta=1.0, alpha=0.01)


def toy_gap(x, y, gamma):
    # f - v_gamma on the toy problem with y = x + d, prox inside Y
    return (y - x) ** 2 * gamma / (2 * (1 + gamma))


def en_problem(seed=0, p=8, n=30):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3 * n, p))
    b = A @ (rng.random(p) < 0.5) + 0.5 * rng.normal(size=3 * n)
    s = Splits(A[:n], b[:n], A[n:2 * n], b[n:2 * n], A[2 * n:], b[2 * n:])
    return build_elastic_net(ElasticNetTask(s))


def en_params(prob, **kw):
    base = dict(gamma=0.5 / prob.rho_f, rho_v=2 * prob.rho_f, epsilon=1e-6, beta0=1.0,
                delta_beta=1.0, alpha=0.01, tol=1e-3, max_iters=30)
    base.update(kw)
    return DwcParams(**base)


def test_constraint_strictly_feasible_at_lower_solution():
    p = build_toy()
    prm = DwcParams(epsilon=1e-3, **TOY)
    prog = build_dwc_program(p, prm)
    for x in (0.2, 1.0, 2.5):
        z = np.array([x, x])
        assert prog.g1.value(z) - prog.h1.value(z) == pytest.approx(-1e-3, abs=1e-12)


def test_toy_constraint_matches_direct_value():
    p = build_toy()
    prm = DwcParams(epsilon=1e-2, **TOY)
    prog = build_dwc_program(p, prm)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(0, 3)
        y = rng.uniform(-2, 4)
        z = np.array([x, y])
        direct = toy_gap(x, y, 0.5) - 1e-2
        assert prog.g1.value(z) - prog.h1.value(z) == pytest.approx(direct, abs=1e-8)


def test_value_function_configuration():
    # convex lower level, gamma = inf: g1 = f, h1 = v + eps with v(x) = 0 here
    zero = WeaklyConvexFn(lambda z: 0.0, lambda z: np.zeros(2), 0.0)
    f = WeaklyConvexFn(lambda z: 0.5 * (z[1] - z[0]) ** 2,
                       lambda z: np.array([z[0] - z[1], z[1] - z[0]]), 0.0)
    p = BilevelProblem(n=1, m=1, F1=zero, F2=zero, rho_F=0.0, f=f,
                       f_x=lambda x, y: x - y, f_y=lambda x, y: y - x, rho_f=0.0,
                       X=Box([-1.0], [1.0]), Y=Box([-3.0], [3.0]), structure="smooth",
                       lower_lipschitz=1.0)
    p.lower_strong_convexity = 1.0
    prog = build_dwc_program(p, DwcParams(gamma=np.inf, epsilon=1e-3))
    z = np.array([0.4, -1.0])
    assert prog.g1.value(z) == pytest.approx(f.value(z))
    assert prog.h1.value(z) == pytest.approx(1e-3, abs=1e-9)


def test_affine_anchor_and_t_dual_path():
    prob = en_problem()
    prm = en_params(prob)
    cfg = prm.resolve(prob)
    rng = np.random.default_rng(1)
    zk = prob.lower.sample(rng, 1)[0]
    prog = build_dwc_program(prob, prm)
    lin = linearize(prog, zk)
    obj = dwc_subproblem(prob, prm, zk, lin, 2.0)
    ev = eval_moreau(prob, cfg, zk[:2], zk[2:])
    anchor = ev.value + 0.5 * cfg.rho_v * float(zk @ zk)
    # the affine minorant carries the relaxation: V(z^k) = v + rho_v/2 |z^k|^2 + eps
    assert obj.max_term.V(zk) == pytest.approx(anchor + prm.epsilon, abs=1e-9)
    cert = solve_composite(obj, zk, 1e-6)
    zn = cert.z
    x, y = zk[:2], zk[2:]

    def V(w):
        return (anchor + (ev.xi_x + cfg.rho_v * x) @ (w[:2] - x)
                + ((y - ev.prox_point) / cfg.gamma + cfg.rho_v * y) @ (w[2:] - y))

    t_direct = max(prob.f.value(zn) + 0.5 * cfg.rho_v * float(zn @ zn) - V(zn) - prm.epsilon, 0)
    t_engine = max(prog.g1.value(zn) - lin.h1 - lin.xi1 @ (zn - zk), 0.0)
    assert t_engine == pytest.approx(t_direct, abs=1e-10)


def test_zero_penalty_is_prox_step():
    p = build_toy()
    prm = DwcParams(**TOY)
    prog = build_dwc_program(p, prm)
    zk = np.array([0.3, 0.8])
    obj = dwc_subproblem(p, prm, zk, linearize(prog, zk), 0.0)
    cert = solve_composite(obj, zk, 1e-12)
    a = prm.alpha
    assert np.allclose(cert.z, (np.array([1.0, 2.0]) + a * zk) / (1 + a), atol=1e-10)


def _engine_path(p, prm, z0, steps):
    prog = build_dwc_program(p, prm)
    dp = prm.dca_params()
    lin = linearize(prog, z0)
    state = DcIterationState(0, z0, z0, lin, lin, prm.beta0)
    out = [z0]
    for _ in range(steps):
        state = ipdca_step(prog, dp, state)
        out.append(state.z)
    return np.array(out)


@pytest.mark.parametrize("which", ["toy", "elastic-net"])
def test_generic_engine_equivalence(which):
    if which == "toy":
        p = build_toy()
        prm = DwcParams(epsilon=1e-2, tol=1e-14, max_iters=15, **TOY)
        z0 = np.array([0.5, 0.5])
    else:
        p = en_problem(3)
        prm = en_params(p, tol=1e-14, max_iters=10)
        x0 = np.array([1.0, 2.0])
        z0 = p.join(x0, p.lower.solve_lower(x0))
    trace = run_ipdwca(p, prm, z0[:p.n], z0[p.n:])
    mine = np.array([it.z for it in trace.iterates])
    ref = _engine_path(p, prm, z0, len(mine) - 1)
    assert np.max(np.abs(mine - ref)) <= 1e-10


def test_toy_converges_to_relaxed_solution():
    p = build_toy()
    eps = 1e-2
    prm = DwcParams(epsilon=eps, tol=1e-6, max_iters=2000, **TOY)
    tr = run_ipdwca(p, prm, [0.5], [0.5], compute_kkt=True)
    assert tr.reason == "tol-met"
    xs, ys = toy_relaxed_solution(eps, 0.5)
    assert np.allclose(tr.final.z, [xs, ys], atol=1e-3)
    assert tr.kkt.stationarity <= 10 * prm.tol
    # the analytic multiplier: lam * d / 3 = x - 1 with d = y - x
    lam = (xs - 1) * 3 / (ys - xs)
    assert tr.kkt.multiplier == pytest.approx(lam, rel=1e-2)


def test_feasibility_nonnegative_and_trace_fields():
    prob = en_problem(2)
    prm = en_params(prob)
    x0 = np.array([5.0, 5.0])
    tr = run_ipdwca(prob, prm, x0)
    assert all(it.feasibility >= -1e-12 for it in tr.iterates)
    assert all(r["t"] >= 0 for r in tr.records)
    betas = [it.beta for it in tr.iterates]
    assert all(b2 >= b1 for b1, b2 in zip(betas, betas[1:]))
    buf = io.StringIO()
    tr.to_jsonl(buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == len(tr.records)
    assert {"k", "dz", "t", "beta", "E", "feasibility"} <= set(json.loads(lines[0]))
    fv = prob.f.value(tr.final.z)
    v = eval_moreau(prob, prm.resolve(prob), tr.x, tr.y).value
    assert tr.final.feasibility == pytest.approx(feasibility(prob, fv, v), abs=1e-8)


def test_early_stop_and_stop_rules():
    prob = en_problem(4)
    tr = run_ipdwca(prob, en_params(prob, early_stop=3, tol=1e-12), np.array([5.0, 5.0]))
    assert tr.reason == "early-stop" and tr.iters == 3
    tr = run_ipdwca(prob, en_params(prob, tol=1e3, stop="absolute"), np.array([5.0, 5.0]))
    assert tr.reason == "tol-met" and tr.iters == 1


def test_params_validation():
    with pytest.raises(ValueError):
        DwcParams(gamma=0.1, epsilon=-1)
    with pytest.raises(ValueError):
        DwcParams(gamma=0.1, early_stop=0)
    with pytest.raises(ValueError):
        DwcParams(gamma=0.1, alpha=0)
    prob = en_problem()
    with pytest.raises(ValueError):
        DwcParams(gamma=2.0 / prob.rho_f).resolve(prob)
    assert DwcParams(gamma=0.5 / prob.rho_f).resolve(prob).rho_v == pytest.approx(2 * prob.rho_f)


def test_start_outside_set_and_missing_y0():
    p = build_toy()
    with pytest.raises(ValueError):
        run_ipdwca(p, DwcParams(**TOY), [0.5])
    with pytest.raises(ValueError):
        run_ipdwca(p, DwcParams(**TOY), [0.5], [9.0])
