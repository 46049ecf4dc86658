"""Strongly convex composite subproblems: solvers and residual certificates.

A :class:`CompositeObjective` is

    smooth(z) + nonsmooth(z) + weight * max(G(z) - V(z), 0) + sum_j max(h_j(z), 0)

over a convex set, with ``V`` affine.  Its subdifferential is represented
structurally (:class:`StructuredSubdiff`) so that stationarity residuals can
be certified exactly: per-coordinate intervals and group balls are handled
in closed form, the scalar multiplier of the max term by a one-dimensional
convex search, and anything else by bounded least squares.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .problem import (Box, BoxHyperplane, WholeSpace, _best_tau,
                      interval_residual, polyhedral_residual)

log = logging.getLogger(__name__)

GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


@dataclass
class SmoothTerm:
    value: Callable
    grad: Callable
    lipschitz: float


@dataclass
class SubdiffPieces:
    """``grad + prod [lo_i, hi_i] + sum balls`` at one point."""

    grad: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    balls: list = field(default_factory=list)


class SeparableTerm:
    """Constant-weight separable nonsmooth term.

    ``tag`` is one of ``none``, ``weighted-l1`` (``sum w_i |z_i|``),
    ``sparse-group`` (``l1 * ||z||_1 + sum_g w_g ||z_g||_2``) or
    ``scaled-norm`` (``w * ||z_idx||_2``, a single group).
    """

    def __init__(self, tag="none", l1=0.0, groups=(), group_weights=(), dim=None):
        if tag not in ("none", "weighted-l1", "sparse-group", "scaled-norm"):
            raise ValueError(f"unknown tag {tag!r}")
        self.tag = tag
        self.l1 = l1
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.group_weights = np.asarray(group_weights, dtype=float)
        if len(self.groups) != self.group_weights.size:
            raise ValueError("one weight per group")
        if tag == "scaled-norm" and len(self.groups) != 1:
            raise ValueError("scaled-norm takes exactly one group")
        if np.any(np.asarray(l1) < 0) or np.any(self.group_weights < 0):
            raise ValueError("weights must be nonnegative")
        self.dim = dim

    def _l1(self, n):
        return np.broadcast_to(np.asarray(self.l1, dtype=float), (n,))

    def value(self, z):
        if self.tag == "none":
            return 0.0
        out = float(self._l1(z.size) @ np.abs(z))
        for g, w in zip(self.groups, self.group_weights):
            out += w * np.linalg.norm(z[g])
        return out

    def prox(self, step, v, set_=None):
        """Exact prox of ``step * (term + indicator(set_))``."""
        v = np.asarray(v, dtype=float)
        if step <= 0:
            raise ValueError("step must be positive")
        if self.tag == "none":
            return v.copy() if set_ is None else set_.project(v)
        w1 = step * self._l1(v.size)
        out = np.sign(v) * np.maximum(np.abs(v) - w1, 0.0)
        if self.groups:
            if set_ is not None and not isinstance(set_, WholeSpace):
                raise NotImplementedError("group shrinkage is exact only without a set")
            for g, w in zip(self.groups, self.group_weights):
                nrm = np.linalg.norm(out[g])
                out[g] = 0.0 if nrm == 0 else out[g] * max(0.0, 1.0 - step * w / nrm)
            return out
        if set_ is None or isinstance(set_, WholeSpace):
            return out
        if type(set_) is Box:
            return set_.project(out)
        raise NotImplementedError(f"prox of {self.tag} over {set_.kind}")

    def pieces(self, z):
        n = z.size
        grad = np.zeros(n)
        lo = np.zeros(n)
        hi = np.zeros(n)
        balls = []
        if self.tag == "none":
            return SubdiffPieces(grad, lo, hi, balls)
        w1 = self._l1(n)
        kink = z == 0
        grad[~kink] = w1[~kink] * np.sign(z[~kink])
        lo[kink] = -w1[kink]
        hi[kink] = w1[kink]
        for g, w in zip(self.groups, self.group_weights):
            nrm = np.linalg.norm(z[g])
            if nrm > 0:
                grad[g] += w * z[g] / nrm
            elif w > 0:
                balls.append((g, w))
        return SubdiffPieces(grad, lo, hi, balls)


@dataclass
class MaxTerm:
    """``weight * max(G(z) - V(z), 0)`` with ``V(z) = <V_grad, z> + V_const``.

    ``G_pieces`` returns the structured subdifferential of ``G``.  For the
    generic solver, ``G_smooth`` (and optionally ``G_sep``) describe ``G``
    as smooth plus constant-weight separable.
    """

    weight: float
    G: Callable
    G_pieces: Callable
    V_grad: np.ndarray
    V_const: float
    G_smooth: Optional[SmoothTerm] = None
    G_sep: Optional[SeparableTerm] = None

    def V(self, z):
        return float(self.V_grad @ z + self.V_const)

    def gap(self, z):
        return float(self.G(z)) - self.V(z)


@dataclass
class HingeSum:
    """``sum_j max(h_j(z), 0)`` with smooth ``h_j``."""

    values: Callable
    jacobian: Callable


@dataclass
class StructuredSubdiff:
    smooth: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    balls: list
    zeta_range: tuple = (0.0, 0.0)
    max_dir: Optional[np.ndarray] = None
    max_lo: Optional[np.ndarray] = None
    max_hi: Optional[np.ndarray] = None
    max_balls: list = field(default_factory=list)
    hinge_dirs: Optional[np.ndarray] = None

    def selection(self, zeta):
        """Element data ``(v, L, U, balls)`` for a fixed max-term multiplier."""
        v = self.smooth.copy()
        L = self.lo.copy()
        U = self.hi.copy()
        balls = {}
        for idx, r in self.balls:
            key = idx.tobytes()
            balls[key] = [idx, balls.get(key, [idx, 0.0])[1] + r]
        if self.max_dir is not None and zeta != 0.0:
            v += zeta * self.max_dir
            L += zeta * self.max_lo
            U += zeta * self.max_hi
            for idx, r in self.max_balls:
                key = idx.tobytes()
                balls[key] = [idx, balls.get(key, [idx, 0.0])[1] + zeta * r]
        return v, L, U, [(i, r) for i, r in balls.values()]


class CompositeObjective:
    """Strongly convex composite objective over a convex set.

    Parameters
    ----------
    smooth : SmoothTerm
    nonsmooth : SeparableTerm
    max_term : MaxTerm or None
    mu : float
        Strong-convexity modulus (must be positive).
    feasible_set : ConvexSet
    hinges : HingeSum or None
    fixed_zeta_solver : callable, optional
        ``(c, z_warm, tol) -> z`` minimizing
        ``smooth + nonsmooth + c * (G - V)`` over the set; used by the
        multiplier search when the max term is present.
    direct_solver : callable, optional
        ``(z0, target) -> z`` replacing the built-in schemes entirely.
    tie_tol : float
        Relative tolerance under which ``G - V`` counts as zero.
    """

    def __init__(self, smooth, nonsmooth=None, max_term=None, mu=1.0, feasible_set=None,
                 hinges=None, fixed_zeta_solver=None, direct_solver=None, tie_tol=1e-10,
                 hinge_tie_tol=1e-10):
        if not mu > 0:
            raise ValueError("strong-convexity modulus must be positive")
        self.smooth = smooth
        self.nonsmooth = nonsmooth or SeparableTerm()
        self.max_term = max_term
        self.mu = float(mu)
        self.feasible_set = feasible_set
        self.hinges = hinges
        self.fixed_zeta_solver = fixed_zeta_solver
        self.direct_solver = direct_solver
        self.tie_tol = tie_tol
        self.hinge_tie_tol = hinge_tie_tol

    def value(self, z):
        z = np.asarray(z, dtype=float)
        out = float(self.smooth.value(z)) + self.nonsmooth.value(z)
        if self.max_term is not None:
            out += self.max_term.weight * max(self.max_term.gap(z), 0.0)
        if self.hinges is not None:
            out += float(np.maximum(self.hinges.values(z), 0.0).sum())
        return out

    def tied(self, z):
        mt = self.max_term
        g, v = float(mt.G(z)), mt.V(z)
        return g - v, self.tie_tol * (1.0 + abs(g) + abs(v))

    def structured_subdiff(self, z):
        z = np.asarray(z, dtype=float)
        base = self.nonsmooth.pieces(z)
        sd = StructuredSubdiff(np.asarray(self.smooth.grad(z), float) + base.grad,
                               base.lo, base.hi, list(base.balls))
        mt = self.max_term
        if mt is not None and mt.weight > 0:
            gap, tie = self.tied(z)
            pc = mt.G_pieces(z)
            sd.max_dir = mt.weight * (np.asarray(pc.grad, float) - mt.V_grad)
            sd.max_lo = mt.weight * pc.lo
            sd.max_hi = mt.weight * pc.hi
            sd.max_balls = [(i, mt.weight * r) for i, r in pc.balls]
            if gap > tie:
                sd.zeta_range = (1.0, 1.0)
            elif gap < -tie:
                sd.zeta_range = (0.0, 0.0)
            else:
                sd.zeta_range = (0.0, 1.0)
        if self.hinges is not None:
            h = np.asarray(self.hinges.values(z), float)
            J = np.asarray(self.hinges.jacobian(z), float)
            scale = self.hinge_tie_tol * (1.0 + np.abs(h))
            sd.smooth = sd.smooth + J[h > scale].sum(axis=0)
            tied = np.abs(h) <= scale
            if tied.any():
                sd.hinge_dirs = J[tied]
        return sd


@dataclass
class SubproblemCertificate:
    z: np.ndarray
    residual: float
    iterations: int
    value: float
    converged: bool
    zeta: float = 0.0


# --------------------------------------------------------------------------
# certification

def _golden_min(fun, a, b, tol=1e-14, max_iter=200):
    """Minimize a convex scalar function on [a, b], returning (x, f(x))."""
    best_x, best_f = a, fun(a)
    fb = fun(b)
    if fb < best_f:
        best_x, best_f = b, fb
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = fun(x1), fun(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = fun(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = fun(x2)
        for x, fx in ((x1, f1), (x2, f2)):
            if fx < best_f:
                best_x, best_f = x, fx
        if best_f == 0.0:
            break
    return best_x, best_f


def _selection_residual(sd, set_, z, zeta, cone):
    v, L, U, balls = sd.selection(zeta)
    Ls, Us, a = cone
    return interval_residual(-v, L + Ls, U + Us, a, balls)


def certify_residual(obj: CompositeObjective, z, return_zeta=False):
    """Certified upper bound on ``dist(0, d obj(z) + N_C(z))``.

    Exact minimum over the structured subgradient selections: closed form
    for intervals and balls, one-dimensional convex search over the
    max-term multiplier, bounded least squares when hinge ties or
    non-separable normal cones are present.
    """
    z = np.asarray(z, dtype=float)
    set_ = obj.feasible_set
    if not set_.contains(z):
        raise ValueError("point is not feasible")
    sd = obj.structured_subdiff(z)
    try:
        cone = set_.normal_intervals(z)
    except NotImplementedError:
        cone = None
    zlo, zhi = sd.zeta_range
    if cone is not None and sd.hinge_dirs is None:
        if zlo == zhi:
            r = _selection_residual(sd, set_, z, zlo, cone)
            zeta = zlo
        else:
            zeta, r = _golden_min(lambda t: _selection_residual(sd, set_, z, t, cone), zlo, zhi)
        return (r, zeta) if return_zeta else r
    return (_bvls_residual(sd, set_, z), None) if return_zeta else _bvls_residual(sd, set_, z)


def residual_at_zeta(obj: CompositeObjective, z, zeta):
    """Stationarity residual with the max-term multiplier fixed at ``zeta``."""
    z = np.asarray(z, dtype=float)
    set_ = obj.feasible_set
    sd = obj.structured_subdiff(z)
    if sd.max_dir is not None:
        sd.zeta_range = (zeta, zeta)
    try:
        cone = set_.normal_intervals(z)
    except NotImplementedError:
        cone = None
    if cone is not None and sd.hinge_dirs is None:
        return _selection_residual(sd, set_, z, zeta if sd.max_dir is not None else 0.0, cone)
    return _bvls_residual(sd, set_, z)


def _bvls_residual(sd, set_, z):
    if sd.balls or sd.max_balls:
        raise NotImplementedError("group balls with a non-separable cone")
    n = z.size
    cols, lb, ub = [], [], []
    w = -sd.smooth.copy()
    zlo, zhi = sd.zeta_range
    if sd.max_dir is not None:
        if zlo == zhi:
            w -= zlo * sd.max_dir
            lo_i = sd.lo + zlo * sd.max_lo
            hi_i = sd.hi + zlo * sd.max_hi
        else:
            if np.any(sd.max_lo != 0) or np.any(sd.max_hi != 0):
                raise NotImplementedError("tied max term with kinks needs the interval path")
            cols.append(sd.max_dir[:, None])
            lb.append([zlo])
            ub.append([zhi])
            lo_i, hi_i = sd.lo, sd.hi
    else:
        lo_i, hi_i = sd.lo, sd.hi
    kink = (lo_i != 0) | (hi_i != 0)
    if kink.any():
        E = np.eye(n)[:, kink]
        cols.append(E)
        lb.append(lo_i[kink])
        ub.append(hi_i[kink])
    if sd.hinge_dirs is not None:
        cols.append(sd.hinge_dirs.T)
        lb.append(np.zeros(sd.hinge_dirs.shape[0]))
        ub.append(np.ones(sd.hinge_dirs.shape[0]))
    G, glb, gub = set_.cone_generators(z)
    cols.append(G)
    lb.append(glb)
    ub.append(gub)
    return polyhedral_residual(w, np.hstack(cols), np.concatenate(lb), np.concatenate(ub))


# --------------------------------------------------------------------------
# solvers

def prox_separable(term: SeparableTerm, step, z, box=None):
    """Exact prox of ``step * (term + indicator(box))`` at ``z``."""
    return term.prox(step, z, box)


def _apg(value, grad, lip, sep, set_, z0, tol, max_iters, mu=0.0):
    """Accelerated proximal gradient with gradient restart.

    Returns ``(z, iterations, best_values)``; the best value sequence is
    nonincreasing by construction.
    """
    z = set_.project(np.asarray(z0, dtype=float)) if set_ is not None else np.array(z0, float)
    y = z.copy()
    mom = 1.0
    best = [value(z) + sep.value(z)]
    step = 1.0 / lip
    it = 0
    for it in range(1, max_iters + 1):
        zn = sep.prox(step, y - step * grad(y), set_)
        gm = lip * np.linalg.norm(zn - y)
        if np.dot(y - zn, zn - z) > 0:
            mom = 1.0
        mom1 = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom * mom))
        y = zn + ((mom - 1.0) / mom1) * (zn - z)
        z, mom = zn, mom1
        best.append(min(best[-1], value(z) + sep.value(z)))
        if gm <= tol:
            break
    return z, it, best


def _combine_sep(a: SeparableTerm, b: Optional[SeparableTerm], c):
    if b is None or b.tag == "none" or c == 0:
        return a
    if a.tag == "none":
        return SeparableTerm(b.tag, c * np.asarray(b.l1, float), b.groups, c * b.group_weights)
    if a.groups or b.groups:
        raise NotImplementedError("combining group terms")
    return SeparableTerm("weighted-l1", np.asarray(a.l1, float) + c * np.asarray(b.l1, float))


def _generic_fixed_zeta(obj: CompositeObjective):
    mt = obj.max_term
    if mt.G_smooth is None:
        raise NotImplementedError("max term without a smooth description needs a custom solver")

    def solve(c, z_warm, tol):
        sm, gs = obj.smooth, mt.G_smooth
        value = lambda z: sm.value(z) + c * (gs.value(z) - mt.V_grad @ z)
        grad = lambda z: sm.grad(z) + c * (gs.grad(z) - mt.V_grad)
        sep = _combine_sep(obj.nonsmooth, mt.G_sep, c)
        lip = sm.lipschitz + c * gs.lipschitz
        z, _, _ = _apg(value, grad, lip, sep, obj.feasible_set, z_warm, tol, 100000)
        return z

    return solve


class _StopSearch(Exception):
    def __init__(self, zeta):
        self.zeta = zeta


def _zeta_search(obj, z0, tol, counter):
    """Solve with the max term via its scalar multiplier.

    For ``c = weight * zeta`` the problem ``P(zeta) = smooth + sep + c (G - V)``
    has a unique minimizer ``z(zeta)`` and ``G - V`` along it is
    nonincreasing in ``zeta``.  The optimal multiplier is 0, 1 or a root.
    When the inner solves are too coarse to resolve the tie at the root, the
    search is repeated with tighter inner tolerances.
    """
    mt = obj.max_term
    solver = obj.fixed_zeta_solver or _generic_fixed_zeta(obj)
    cache = {}

    def z_at(zeta):
        if zeta in cache:
            return cache[zeta]
        warm = z0 if not cache else cache[min(cache, key=lambda k: abs(k - zeta))]
        counter[0] += 1
        z = solver(mt.weight * zeta, warm, tol)
        cache[zeta] = z
        return z

    def gap(zeta):
        z = z_at(zeta)
        g, v = float(mt.G(z)), mt.V(z)
        return g - v, obj.tie_tol * (1.0 + abs(g) + abs(v))

    def f(zeta):
        g, t = gap(zeta)
        if abs(g) <= t:
            raise _StopSearch(zeta)
        return g

    zeta = 0.0
    for _ in range(4):
        g0, t0 = gap(0.0)
        if g0 <= t0:
            return z_at(0.0), 0.0
        g1, t1 = gap(1.0)
        if g1 >= -t1:
            return z_at(1.0), 1.0
        try:
            zeta = brentq(f, 0.0, 1.0, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
        except _StopSearch as stop:
            return z_at(stop.zeta), stop.zeta
        g, t = gap(zeta)
        if abs(g) <= t:
            break
        tol *= 1e-3
        cache.clear()
    return z_at(zeta), zeta


def solve_composite(obj: CompositeObjective, z0, target_residual, max_iters=20000):
    """Minimize ``obj`` and certify the stationarity residual.

    Without a max term the accelerated proximal-gradient scheme is used.
    With a max term the scalar multiplier is located by root finding on
    ``G - V`` along the path of penalized minimizers, each computed by the
    objective's ``fixed_zeta_solver`` (or the accelerated scheme).  Inner
    accuracy is tightened until the certified residual meets the target.
    """
    if not target_residual > 0:
        raise ValueError("target residual must be positive")
    set_ = obj.feasible_set
    z0 = set_.project(np.asarray(z0, dtype=float))
    v0 = obj.value(z0)
    if not np.isfinite(v0):
        raise ValueError("objective is not finite at the starting point")
    counter = [0]
    tol = 0.1 * target_residual
    best = None
    for attempt in range(6):
        zeta = 0.0
        if obj.direct_solver is not None:
            z = obj.direct_solver(z0, tol)
            counter[0] += 1
        elif obj.max_term is None or obj.max_term.weight == 0:
            sm = obj.smooth
            z, it, _ = _apg(sm.value, sm.grad, sm.lipschitz, obj.nonsmooth, set_, z0, tol, max_iters)
            counter[0] += it
        else:
            z, zeta = _zeta_search(obj, z0, tol, counter)
        z = set_.project(z)
        r = certify_residual(obj, z)
        cert = SubproblemCertificate(z, r, counter[0], obj.value(z), r <= target_residual, zeta)
        if r <= target_residual:
            return cert
        if best is not None and r > 0.5 * best.residual:
            # tightening no longer helps: the solver is at its precision floor
            if r < best.residual:
                best = cert
            break
        if best is None or r < best.residual:
            best = cert
        tol *= 0.01
        z0 = z
    log.debug("subproblem residual %.3e above target %.3e", best.residual, target_residual)
    return best


def recover_multipliers(set_: BoxHyperplane, z, grad):
    """Hyperplane and bound multipliers from the gradient at ``z``.

    The hyperplane multiplier is fitted by least squares on the inactive
    coordinates; if every coordinate sits on a bound it minimizes the
    reconstruction residual instead.  Returns ``(lam, mu_lo, mu_hi, resid)``
    with ``grad + lam a - mu_lo + mu_hi`` the reconstructed residual vector.
    """
    a = set_.normal
    L, U, _ = set_.normal_intervals(z)
    at_lo = ~np.isfinite(L)
    at_hi = ~np.isfinite(U)
    free = ~(at_lo | at_hi)
    if np.any(a[free] != 0):
        lam = -float(a[free] @ grad[free]) / float(a[free] @ a[free])
    else:
        lam = _best_tau(-grad, L, U, a)
    r = grad + lam * a
    mu_lo = np.where(at_lo & ~at_hi, np.maximum(r, 0.0), 0.0)
    mu_hi = np.where(at_hi & ~at_lo, np.maximum(-r, 0.0), 0.0)
    both = at_lo & at_hi
    mu_lo = np.where(both, np.maximum(r, 0.0), mu_lo)
    mu_hi = np.where(both, np.maximum(-r, 0.0), mu_hi)
    resid = r - mu_lo + mu_hi
    return lam, mu_lo, mu_hi, resid


def solve_qp_box_hyperplane(Q, q, set_: BoxHyperplane, prox_center, prox_weight, z0,
                            target_residual, max_iter=100000, lipschitz=None):
    """Strongly convex QP over a box intersected with a hyperplane.

    Minimizes ``1/2 z'Qz + q'z + w/2 ||z - c||^2`` by accelerated projected
    gradient and recovers the KKT multipliers.  Returns
    ``(z, lam_eq, mu_lo, mu_hi)``.
    """
    if not prox_weight > 0:
        raise ValueError("prox weight must be positive")
    Q = np.ascontiguousarray(Q, dtype=float)
    q = np.asarray(q, dtype=float)
    c = np.asarray(prox_center, dtype=float)
    if lipschitz is None:
        lipschitz = float(np.linalg.eigvalsh(Q)[-1]) if Q.size else 0.0
    lip = max(lipschitz, 0.0) + prox_weight
    z = set_.project(np.asarray(z0, dtype=float))
    tol = 0.25 * target_residual
    for _ in range(8):
        z, _ = kernels.qp_apg(Q, q, float(prox_weight), c, set_.lower, set_.upper,
                              set_.normal, set_.offset, True, z, lip, tol, max_iter)
        g = Q @ z + q + prox_weight * (z - c)
        lam, mu_lo, mu_hi, resid = recover_multipliers(set_, z, g)
        if np.linalg.norm(resid) <= target_residual:
            break
        tol *= 0.1
    if np.linalg.norm(resid) > 10 * target_residual:
        raise RuntimeError(f"KKT reconstruction residual {np.linalg.norm(resid):.2e} too large")
    return z, lam, mu_lo, mu_hi
