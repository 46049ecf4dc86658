"""Moreau envelope of the lower-level problem and its subgradient.

For ``gamma > 0``::

    v(x, y) = inf_{w in Y, g(x, w) <= 0} f(x, w) + ||w - y||^2 / (2 gamma)

with prox point ``w = S(x, y)`` and KKT multipliers ``eta`` of the
constraints.  One subgradient element is

    (d_x f(x, w) + sum_i eta_i d_x g_i(x, w),  (y - w) / gamma).

``gamma = inf`` gives the plain value function (convex lower level only).
"""
from dataclasses import dataclass

import numpy as np

from .inner import CompositeObjective, SmoothTerm, solve_composite
from .problem import BilevelProblem


@dataclass(frozen=True)
class MoreauConfig:
    gamma: float
    rho_v: float
    target_residual: float = 1e-10

    def validate(self, p: BilevelProblem):
        if np.isinf(self.gamma):
            if p.rho_f > 0 or not p.convex_lower:
                raise ValueError("gamma = inf requires a convex lower level")
            return
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if p.rho_f > 0:
            if self.gamma * p.rho_f >= 1:
                raise ValueError("gamma must be below 1/rho_f")
            if self.rho_v < p.rho_f / (1 - self.gamma * p.rho_f) * (1 - 1e-12):
                raise ValueError("rho_v below rho_f / (1 - gamma rho_f)")


@dataclass
class MoreauEval:
    value: float
    prox_point: np.ndarray
    multipliers: np.ndarray
    xi_x: np.ndarray
    xi_y: np.ndarray
    residual: float

    @property
    def subgrad(self):
        return np.concatenate([self.xi_x, self.xi_y])


class LowerSolveError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


def _generic_prox(p, cfg, x, y, warm):
    """Prox of a lower objective that is smooth in ``y`` (no constraints)."""
    if p.constraints.count:
        raise NotImplementedError("generic prox path does not handle constraints")
    lip = getattr(p, "lower_lipschitz", None)
    if lip is None:
        raise NotImplementedError("generic prox path needs problem.lower_lipschitz")
    g = cfg.gamma
    inv = 0.0 if np.isinf(g) else 1.0 / g
    mu = inv if inv > 0 else getattr(p, "lower_strong_convexity", 0.0)
    sm = SmoothTerm(lambda w: p.f.value(p.join(x, w)) + 0.5 * inv * np.sum((w - y) ** 2),
                    lambda w: np.asarray(p.f_y(x, w), float) + inv * (w - y),
                    lip + inv)
    obj = CompositeObjective(sm, mu=max(mu, 1e-12), feasible_set=p.Y)
    start = y if warm is None else warm
    cert = solve_composite(obj, start, cfg.target_residual)
    if not cert.converged:
        raise LowerSolveError("prox solve did not reach the target", cert.z)
    return cert.z, np.zeros(0), cert.residual


def eval_moreau(p: BilevelProblem, cfg: MoreauConfig, x, y, warm_start=None) -> MoreauEval:
    """Evaluate ``v_gamma`` at ``(x, y)`` with prox point, multipliers and subgradient."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not p.X.contains(x):
        raise ValueError("x outside X")
    if p.lower is not None:
        w, eta, resid = p.lower.prox(x, y, cfg.gamma, warm_start, cfg.target_residual)
    else:
        w, eta, resid = _generic_prox(p, cfg, x, y, warm_start)
    fval = p.f.value(p.join(x, w))
    xi_x = np.asarray(p.f_x(x, w), dtype=float).copy()
    if p.constraints.count:
        xi_x += np.asarray(p.constraints.grad_x(x, w), float).T @ eta
    if np.isinf(cfg.gamma):
        value = fval
        xi_y = np.zeros_like(y)
    else:
        value = fval + np.sum((w - y) ** 2) / (2 * cfg.gamma)
        xi_y = (y - w) / cfg.gamma
    return MoreauEval(float(value), w, np.asarray(eta, float), xi_x, xi_y, float(resid))


def moreau_subgrad_check(p, cfg, x, y, h=None, warm_start=None):
    """Compare the assembled subgradient with central differences of ``v_gamma``.

    Returns ``(analytic, numeric, rel_err)`` where the first two are
    ``(x_part, y_part)`` pairs.
    """
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    fine = MoreauConfig(cfg.gamma, cfg.rho_v, min(cfg.target_residual, 1e-12))
    ev = eval_moreau(p, fine, x, y, warm_start)
    z = np.concatenate([x, y])
    if h is None:
        h = 1e-5 * (1.0 + np.max(np.abs(z)))
    num = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        vp = eval_moreau(p, fine, zp[: x.size], zp[x.size:], ev.prox_point).value
        vm = eval_moreau(p, fine, zm[: x.size], zm[x.size:], ev.prox_point).value
        num[i] = (vp - vm) / (2 * h)
    ana = ev.subgrad
    rel = float(np.linalg.norm(ana - num) / max(1.0, np.linalg.norm(num)))
    n = x.size
    return (ev.xi_x, ev.xi_y), (num[:n], num[n:]), rel


@dataclass
class ProbeReport:
    samples: int
    violations: int
    worst_gap: float
    witness: tuple = None


def weak_convexity_probe(p, cfg, sample_count=1000, rng_seed=0, sampler=None, slack=1e-7):
    """Sampled secant checks for ``v_gamma + rho_v/2 ||.||^2``.

    ``sampler(rng, k)`` draws ``k`` points of ``C`` as rows of ``z``; the
    default samples the boxes ``X`` and ``Y``.
    """
    rng = np.random.default_rng(rng_seed)
    if sampler is None:
        if p.lower is not None and hasattr(p.lower, "sample"):
            sampler = p.lower.sample
        else:
            from .problem import _sample_set

            def sampler(r, k):
                return np.hstack([_sample_set(p.X, r, k), _sample_set(p.Y, r, k)])
    Z1 = sampler(rng, sample_count)
    Z2 = sampler(rng, sample_count)
    lams = rng.random(sample_count)
    n = p.n

    def phi(z):
        ev = eval_moreau(p, cfg, z[:n], z[n:])
        return ev.value + 0.5 * cfg.rho_v * float(z @ z)

    bad = 0
    worst = -np.inf
    witness = None
    for z1, z2, lam in zip(Z1, Z2, lams):
        zm = lam * z1 + (1 - lam) * z2
        a, b, c = phi(zm), phi(z1), phi(z2)
        gap = a - (lam * b + (1 - lam) * c)
        tol = slack * (1 + abs(a) + abs(b) + abs(c))
        if gap > worst:
            worst = gap
        if gap > tol:
            bad += 1
            if witness is None:
                witness = (z1.copy(), z2.copy(), float(lam), float(gap))
    return ProbeReport(sample_count, bad, float(worst), witness)
