"""Inexact proximal DC algorithm on the Moreau-envelope reformulation.

The bilevel problem is rewritten as the single-level DC program

    min  F1 + rho_F/2 ||z||^2 - (F2 + rho_F/2 ||z||^2)
    s.t. f + rho_v/2 ||z||^2 - (v_gamma + rho_v/2 ||z||^2 + eps) <= 0,  z in C

and solved by linearizing both concave parts.  :func:`run_ipdwca` is a
self-contained loop; :func:`build_dwc_program` produces the same program for
the generic engine in :mod:`dwcbilevel.dca`.
"""
import json
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dca import ConvexFn, DcaParams, DcProgram, KKTReport, Linearization, kkt_residual
from .inner import CompositeObjective, solve_composite
from .moreau import MoreauConfig, eval_moreau
from .problem import BilevelProblem, Box, BoxHyperplane, WholeSpace


@dataclass
class DwcParams:
    gamma: float
    rho_v: Optional[float] = None
    epsilon: float = 1e-6
    beta0: float = 1.0
    delta_beta: float = 1.0
    c_beta: float = 1.0
    alpha: float = 0.01
    tol: float = 1e-3
    max_iters: int = 200
    early_stop: Optional[int] = None
    stop: str = "absolute"
    r_min: float = 1e-9
    moreau_target: float = 1e-9
    decrease_slack: float = 1e-8
    strict: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.early_stop is not None and self.early_stop < 1:
            raise ValueError("early_stop must be a positive iteration count")
        self.dca_params()

    def resolve(self, p: BilevelProblem):
        """Fill ``rho_v`` from ``rho_f`` and check the envelope parameters."""
        if self.rho_v is None:
            if np.isinf(self.gamma):
                rho_v = 0.0
            else:
                rho_v = p.rho_f / (1.0 - self.gamma * p.rho_f)
        else:
            rho_v = self.rho_v
        cfg = MoreauConfig(self.gamma, rho_v, self.moreau_target)
        cfg.validate(p)
        return cfg

    def dca_params(self):
        iters = self.max_iters if self.early_stop is None else min(self.max_iters, self.early_stop)
        return DcaParams(self.beta0, self.delta_beta, self.c_beta, self.alpha, self.tol, iters,
                         self.r_min, None, self.stop, self.decrease_slack, self.strict)


@dataclass
class DwcIterate:
    k: int
    z: np.ndarray
    prox_point: np.ndarray
    multipliers: np.ndarray
    xi0: np.ndarray
    xi1: np.ndarray
    t: float
    beta: float
    feasibility: float


@dataclass
class DwcTrace:
    records: list
    iterates: list
    reason: str
    wall_time: float
    n: int
    kkt: Optional[KKTReport] = None

    @property
    def final(self):
        return self.iterates[-1]

    @property
    def x(self):
        return self.final.z[: self.n]

    @property
    def y(self):
        return self.final.z[self.n:]

    @property
    def iters(self):
        return self.final.k

    @property
    def beta_final(self):
        return self.final.beta

    def to_jsonl(self, path_or_file):
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
        if hasattr(path_or_file, "write"):
            path_or_file.write(text)
        else:
            with open(path_or_file, "w") as fh:
                fh.write(text)


def product_set(p: BilevelProblem):
    """The set ``C`` of feasible ``(x, y)`` as one convex set."""
    if p.constraints.count:
        cset = getattr(p.lower, "cset", None)
        if cset is None:
            raise NotImplementedError("lower-level constraints not foldable into a convex set")
        return cset
    X, Y = p.X, p.Y
    for s in (X, Y):
        if type(s) not in (Box, WholeSpace, BoxHyperplane):
            raise NotImplementedError(f"unsupported set {s.kind}")
    if type(X) is BoxHyperplane:
        raise NotImplementedError("hyperplane in the upper-level set")
    lo = np.concatenate([X.lower, Y.lower])
    hi = np.concatenate([X.upper, Y.upper])
    if type(Y) is BoxHyperplane:
        return BoxHyperplane(lo, hi, np.concatenate([np.zeros(p.n), Y.normal]), Y.offset)
    if np.all(np.isinf(lo)) and np.all(np.isinf(hi)):
        return WholeSpace(p.n + p.m)
    return Box(lo, hi)


class _MoreauOracle:
    """Cached ``v_gamma`` evaluations with warm starts chained across calls."""

    def __init__(self, p, cfg):
        self.p = p
        self.cfg = cfg
        self.cache = {}
        self.warm = None

    def __call__(self, z):
        z = np.asarray(z, float)
        key = z.tobytes()
        ev = self.cache.get(key)
        if ev is None:
            n = self.p.n
            ev = eval_moreau(self.p, self.cfg, z[:n], z[n:], self.warm)
            self.warm = ev.prox_point
            if len(self.cache) > 64:
                self.cache.clear()
            self.cache[key] = ev
        return ev


def _upper_parts(p, rho_F, j=None):
    lower = p.lower
    if j is not None:
        val = lambda z: lower.F1(z, j)
        sub = lambda z: _frozen_hinge_sub(lower, z, j)
    else:
        val, sub = p.F1.value, p.F1.subgrad
    g0 = ConvexFn(lambda z: val(z) + 0.5 * rho_F * float(z @ z),
                  lambda z: np.asarray(sub(z), float) + rho_F * z, p.upper_lipschitz)
    return g0


def _frozen_hinge_sub(lower, z, j):
    h, J = lower.hinge_args(z, j)
    return J[h > 0].sum(axis=0)


def build_dwc_program(p: BilevelProblem, params: DwcParams, jstar=None) -> DcProgram:
    """DC program of the relaxed Moreau-envelope reformulation.

    ``jstar`` freezes the offset index of the SVM validation loss so that
    ``g0`` is convex; it is ignored by the other applications.
    """
    cfg = params.resolve(p)
    rho_F, rho_v, eps = p.rho_F, cfg.rho_v, params.epsilon
    oracle = _MoreauOracle(p, cfg)
    svm = hasattr(p.lower, "jstar")
    g0 = _upper_parts(p, rho_F, jstar if svm else None)
    h0 = ConvexFn(lambda z: p.F2.value(z) + 0.5 * rho_F * float(z @ z),
                  lambda z: np.asarray(p.F2.subgrad(z), float) + rho_F * z)
    g1 = ConvexFn(lambda z: p.f.value(z) + 0.5 * rho_v * float(z @ z),
                  lambda z: np.asarray(p.f.subgrad(z), float) + rho_v * z,
                  p.lower_lipschitz + rho_v if p.lower_lipschitz is not None else None)
    h1 = ConvexFn(lambda z: oracle(z).value + 0.5 * rho_v * float(z @ z) + eps,
                  lambda z: oracle(z).subgrad + rho_v * z)
    sigma = product_set(p)
    factory = None
    if p.lower is not None and hasattr(p.lower, "dwc_subproblem"):
        def factory(z, lin, beta, alpha):
            return p.lower.dwc_subproblem(z, lin.xi0, lin.xi1, -lin.conj1, beta, alpha,
                                          rho_F, rho_v, jstar=jstar)
    prog = DcProgram(g0, h0, g1, h1, sigma, factory)
    prog.oracle = oracle
    prog.moreau = cfg
    return prog


def dwc_subproblem(p: BilevelProblem, params: DwcParams, z, lin: Linearization, beta,
                   jstar=None) -> CompositeObjective:
    """Subproblem objective at ``z`` for penalty ``beta``.

    ``lin`` carries the subgradients of both concave parts at ``z``; its
    conjugate value fixes the affine minorant ``V`` of the envelope term.
    """
    cfg = params.resolve(p)
    if p.lower is not None and hasattr(p.lower, "dwc_subproblem"):
        return p.lower.dwc_subproblem(z, lin.xi0, lin.xi1, -lin.conj1, beta, params.alpha,
                                      p.rho_F, cfg.rho_v, jstar=jstar)
    prog = build_dwc_program(p, params)
    from .dca import generic_subproblem
    return generic_subproblem(prog, z, lin, beta, params.alpha)


def _merit(prog, beta, z, z0, lin, alpha):
    z = np.asarray(z, float)
    if not prog.sigma.contains(z):
        return np.inf
    val = prog.g0.value(z) - lin.xi0 @ z + lin.conj0
    val += beta * max(prog.g1.value(z) - lin.xi1 @ z + lin.conj1, 0.0)
    return float(val + 0.25 * alpha * np.sum((z - z0) ** 2))


def feasibility(p: BilevelProblem, f_val, v_val):
    return (f_val - v_val) / p.n_train


def run_ipdwca(p: BilevelProblem, params: DwcParams, x0, y0=None, compute_kkt=False,
               on_iteration=None) -> DwcTrace:
    """Run the inexact proximal DwC algorithm from ``(x0, y0)``.

    ``y0`` defaults to the lower-level solution at ``x0``.  The stopping
    rule is ``params.stop``; ``params.early_stop`` caps the iteration count.
    """
    start = time.perf_counter()
    cfg = params.resolve(p)
    dp = params.dca_params()
    alpha, rho_v, eps = params.alpha, cfg.rho_v, params.epsilon
    x0 = np.atleast_1d(np.asarray(x0, float))
    if y0 is None:
        if p.lower is None:
            raise ValueError("y0 is required for problems without a lower-level adapter")
        y0 = p.lower.solve_lower(x0)
    z = p.join(x0, y0)
    svm = hasattr(p.lower, "jstar")
    base = build_dwc_program(p, params)
    sigma = base.sigma
    if not sigma.contains(z):
        raise ValueError("starting point outside C")
    oracle = base.oracle
    n = p.n

    def lin_at(w, prog):
        ev = oracle(w)
        xi0 = prog.h0.subgrad(w)
        return Linearization(w, np.asarray(xi0, float), ev.subgrad + rho_v * w,
                             float(prog.h0.value(w)),
                             ev.value + 0.5 * rho_v * float(w @ w) + eps), ev

    def iterate(k, w, ev, lin, t, beta):
        fv = float(p.f.value(w))
        return DwcIterate(k, w, ev.prox_point, ev.multipliers, lin.xi0, lin.xi1, t, beta,
                          feasibility(p, fv, ev.value))

    lin, ev = lin_at(z, base)
    z_prev, lin_prev = z, lin
    beta = params.beta0
    iterates = [iterate(0, z, ev, lin, 0.0, beta)]
    records = []
    reason = "max-iters"
    j = None
    for k in range(dp.max_iters):
        j = p.lower.jstar(z[1], z[n:], j) if svm else None
        prog = build_dwc_program(p, params, jstar=j) if svm else base
        if svm:
            prog.oracle = oracle
            prog.h1 = base.h1
        E_before = _merit(prog, beta, z, z_prev, lin_prev, alpha)
        if prog.subproblem is not None:
            obj = prog.subproblem(z, lin, beta, alpha)
        else:
            obj = dwc_subproblem(p, params, z, lin, beta)
        if k == 0:
            target = dp.tol
        else:
            target = max(dp.r_min, np.sqrt(2) / 2 * alpha * np.linalg.norm(z - z_prev))
        cert = solve_composite(obj, z, target)
        if params.strict and not cert.converged:
            raise RuntimeError(f"subproblem residual {cert.residual:.2e} above {target:.2e}")
        zn = cert.z
        dz = float(np.linalg.norm(zn - z))
        V = lin.h1 + float(lin.xi1 @ (zn - z))
        t = max(float(prog.g1.value(zn)) - V, 0.0)
        inv_t = np.inf if t == 0 else 1.0 / t
        beta_new = beta + dp.delta_beta if (dz > 0 and max(beta, inv_t) < dp.c_beta / dz) else beta
        E_after = _merit(prog, beta, zn, z, lin, alpha)
        gap = E_after + 0.25 * alpha * dz ** 2 - E_before
        ok = bool(gap <= dp.decrease_slack * (1 + abs(E_before)))
        lin_n, ev_n = lin_at(zn, base)
        it = iterate(k + 1, zn, ev_n, lin_n, t, beta_new)
        rec = {"k": k + 1, "dz": dz, "t": t, "beta": beta_new, "E": E_after, "E_prev": E_before,
               "decrease_ok": ok, "residual": cert.residual, "target": target,
               "zeta": cert.zeta, "feasibility": it.feasibility,
               "upper": float(p.upper_value(zn))}
        if j is not None:
            rec["jstar"] = int(j)
        records.append(rec)
        iterates.append(it)
        if on_iteration is not None:
            on_iteration(it, rec)
        if not np.all(np.isfinite(zn)):
            reason = "non-finite"
            break
        if params.strict and not ok:
            from .dca import MeritIncreaseError
            raise MeritIncreaseError(f"merit increased by {gap:.3e} at k={k + 1}")
        z_prev, lin_prev = z, lin
        z, lin, beta = zn, lin_n, beta_new
        if dp.stop == "scaled":
            fz = abs(float(p.f.value(z)))
            done = max(t / max(fz, 1e-300), dz) <= dp.tol
        else:
            done = max(dz, t) < dp.tol
        if done:
            reason = "tol-met"
            break
    else:
        if params.early_stop is not None and params.early_stop <= params.max_iters:
            reason = "early-stop"
    kkt = None
    if compute_kkt:
        prog = base
        if svm:
            prog = build_dwc_program(p, params, jstar=p.lower.jstar(z[1], z[n:], j))
            prog.oracle, prog.h1 = oracle, base.h1
        kkt = kkt_residual(prog, z, lin=lin)
    return DwcTrace(records, iterates, reason, time.perf_counter() - start, n, kkt)
