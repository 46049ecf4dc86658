import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwcbilevel.applications import ElasticNetTask, Splits, build_elastic_net, build_toy
from dwcbilevel.moreau import (MoreauConfig, eval_moreau, moreau_subgrad_check,
                               weak_convexity_probe)
from dwcbilevel.problem import BilevelProblem, Box, WeaklyConvexFn, WholeSpace


def smooth_problem(f, fx, fy, rho, X, Y, lip):
    zero = WeaklyConvexFn(lambda z: 0.0, lambda z: np.zeros(z.size), 0.0)
    return BilevelProblem(
        n=X.dim, m=Y.dim, F1=zero, F2=zero, rho_F=0.0,
        f=WeaklyConvexFn(lambda z: f(z[:X.dim], z[X.dim:]),
                         lambda z: np.r_[fx(z[:X.dim], z[X.dim:]), fy(z[:X.dim], z[X.dim:])], rho),
        f_x=fx, f_y=fy, rho_f=rho, X=X, Y=Y, lower_lipschitz=lip, structure="smooth")


def half_square():
    """f(x, w) = w^2 / 2 with a dummy upper variable."""
    return smooth_problem(lambda x, w: 0.5 * float(w @ w), lambda x, w: np.zeros(1),
                          lambda x, w: np.asarray(w, float), 0.0, WholeSpace(1), WholeSpace(1), 1.0)


def en_problem(p=10, n=20, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, p))
    b = A @ rng.normal(size=p) + 0.1 * rng.normal(size=n)
    task = ElasticNetTask(Splits(A, b, A[:5], b[:5], A[:5], b[:5]))
    prob = build_elastic_net(task)
    return prob, MoreauConfig(0.5 / prob.rho_f, 2 * prob.rho_f)


def test_closed_form_quadratic_envelope():
    ev = eval_moreau(half_square(), MoreauConfig(1.0, 0.0), [0.0], [2.0])
    assert ev.prox_point == pytest.approx([1.0], abs=1e-9)
    assert ev.value == pytest.approx(1.0, abs=1e-9)
    assert ev.xi_y == pytest.approx([1.0], abs=1e-9)


def test_fixed_point_at_lower_solution():
    p = build_toy()
    cfg = MoreauConfig(0.5, 2.0)
    for x in np.linspace(0, 3, 7):
        ev = eval_moreau(p, cfg, [x], [x])
        assert ev.prox_point[0] == x
        assert p.f.value(np.array([x, x])) - ev.value == 0.0


def test_y_part_is_prox_residual():
    prob, cfg = en_problem()
    rng = np.random.default_rng(1)
    z = prob.lower.sample(rng, 1)[0]
    ev = eval_moreau(prob, cfg, z[:2], z[2:])
    assert np.array_equal(ev.xi_y, (z[2:] - ev.prox_point) / cfg.gamma)


def test_quadratic_subgrad_check_tight():
    # toy lower level is smooth, so the envelope is differentiable everywhere
    p = build_toy()
    _, _, rel = moreau_subgrad_check(p, MoreauConfig(0.5, 2.0), [1.2], [0.3], h=1e-5)
    assert rel <= 1e-6


def test_toy_envelope_closed_form():
    # v(x, y) = -x^2/2 + (y - x)^2 / (2 (1 + gamma)) when the prox stays inside Y
    p = build_toy()
    for g in (0.25, 0.5, 0.9):
        for x, y in ((0.5, 1.0), (2.0, -1.0), (1.5, 3.0)):
            ev = eval_moreau(p, MoreauConfig(g, 2.0), [x], [y])
            assert ev.value == pytest.approx(-0.5 * x * x + (y - x) ** 2 / (2 * (1 + g)), abs=1e-10)


def test_elastic_net_envelope_vs_grid():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(5, 3))
    b = rng.normal(size=5)
    task = ElasticNetTask(Splits(A, b, A, b, A, b))
    prob = build_elastic_net(task)
    gamma = 0.5 / prob.rho_f
    lam = np.array([0.7, 0.4])
    y = rng.uniform(-1.5, 1.5, 3)
    ev = eval_moreau(prob, MoreauConfig(gamma, 2 * prob.rho_f), lam, y)

    def obj(W):
        R = W @ A.T - b
        return (0.5 * np.sum(R ** 2, 1) + lam[0] * np.abs(W).sum(1)
                + 0.5 * lam[1] * np.sum(W ** 2, 1) + np.sum((W - y) ** 2, 1) / (2 * gamma))

    def grid(center, half, step):
        axes = [np.clip(np.arange(c - half, c + half + step / 2, step), -2, 2) for c in center]
        return np.array(np.meshgrid(*axes, indexing="ij")).reshape(3, -1).T

    W = grid(np.zeros(3), 2.0, 0.02)
    v = obj(W)
    W = grid(W[np.argmin(v)], 0.03, 1e-3)
    v = obj(W)
    assert ev.value <= v.min() + 1e-9
    assert abs(ev.value - v.min()) <= 1e-2


def test_elastic_net_subgrad_vs_finite_differences():
    prob, cfg = en_problem()
    rng = np.random.default_rng(3)
    Z = prob.lower.sample(rng, 10)
    rels = [moreau_subgrad_check(prob, cfg, z[:2], z[2:])[2] for z in Z]
    assert np.mean(np.array(rels) <= 1e-4) >= 0.9


def test_x_outside_box_raises():
    prob, cfg = en_problem()
    with pytest.raises(ValueError):
        eval_moreau(prob, cfg, [-1.0, 0.0], np.zeros(10))


def test_config_validation():
    prob, _ = en_problem()
    with pytest.raises(ValueError):
        MoreauConfig(1.0 / prob.rho_f, 10 * prob.rho_f).validate(prob)
    with pytest.raises(ValueError):
        MoreauConfig(0.5 / prob.rho_f, prob.rho_f).validate(prob)
    with pytest.raises(ValueError):
        MoreauConfig(np.inf, 0.0).validate(prob)
    MoreauConfig(np.inf, 0.0).validate(half_square())
    MoreauConfig(0.5 / prob.rho_f, 2 * prob.rho_f).validate(prob)


def test_probe_convex_lower_no_violations():
    p = smooth_problem(lambda x, w: 0.5 * float((w - x) @ (w - x)), lambda x, w: x - w,
                       lambda x, w: w - x, 0.0, Box([-1.0], [1.0]), Box([-2.0], [2.0]), 1.0)
    rep = weak_convexity_probe(p, MoreauConfig(0.7, 0.0), sample_count=200)
    assert rep.violations == 0


def test_probe_detects_undersized_modulus():
    # f = -x^2/2 + w^2/2 is 1-weakly convex; v + rho_v/2 |z|^2 needs rho_v >= 1
    p = smooth_problem(lambda x, w: -0.5 * float(x @ x) + 0.5 * float(w @ w),
                       lambda x, w: -np.asarray(x, float), lambda x, w: np.asarray(w, float),
                       1.0, Box([-1.0], [1.0]), Box([-1.0], [1.0]), 1.0)
    ok = weak_convexity_probe(p, MoreauConfig(0.5, 2.0), sample_count=200)
    assert ok.violations == 0
    bad = weak_convexity_probe(p, MoreauConfig(0.5, 0.5), sample_count=200)
    assert bad.violations > 0 and bad.witness is not None


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_envelope_properties(seed):
    prob, cfg = en_problem(p=5, n=12, seed=seed % 7)
    rng = np.random.default_rng(seed)
    z1, z2 = prob.lower.sample(rng, 2)
    x = z1[:2]
    ev1 = eval_moreau(prob, cfg, x, z1[2:])
    # envelope bound
    assert ev1.value <= prob.f.value(z1) + 1e-9
    # prox nonexpansive in y
    ev2 = eval_moreau(prob, cfg, x, z2[2:])
    assert (np.linalg.norm(ev1.prox_point - ev2.prox_point)
            <= np.linalg.norm(z1[2:] - z2[2:]) + 1e-7)
    # monotone in gamma
    smaller = eval_moreau(prob, MoreauConfig(0.5 * cfg.gamma, cfg.rho_v), x, z1[2:])
    assert smaller.value >= ev1.value - 1e-9
    assert np.all(ev1.multipliers >= 0)
