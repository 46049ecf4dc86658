"""Data model for bilevel programs: constraint sets and function oracles."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import lsq_linear, minimize_scalar

from . import kernels

ACTIVE_TOL = 1e-12


class InfeasiblePointError(ValueError):
    pass


# --------------------------------------------------------------------------
# distance to interval products, optionally minimized over a hyperplane
# multiplier

def _interval_excess(u, L, U):
    return u - np.clip(u, L, U)


def interval_residual(w, L, U, a=None, balls=()):
    """Distance from ``w`` to ``prod_i [L_i, U_i] + sum balls + span(a)``.

    ``balls`` is a sequence of ``(index_array, radius)`` pairs; each adds a
    Euclidean ball of that radius on the given coordinates.  The ball
    coordinate blocks must be disjoint and cannot be combined with ``a``.
    """
    w = np.asarray(w, dtype=float)
    if a is None or not np.any(a):
        e = _interval_excess(w, L, U)
        if not balls:
            return float(np.linalg.norm(e))
        e2 = e * e
        free = np.ones(w.size, bool)
        total = 0.0
        for idx, r in balls:
            free[idx] = False
            total += max(0.0, np.sqrt(e2[idx].sum()) - r) ** 2
        return float(np.sqrt(total + e2[free].sum()))
    if balls:
        raise NotImplementedError("balls combined with a hyperplane normal")
    tau = _best_tau(w, L, U, a)
    return float(np.linalg.norm(_interval_excess(w - tau * a, L, U)))


def _best_tau(w, L, U, a):
    """Minimize ``||dist(w - tau a, [L, U])||^2`` over scalar ``tau``.

    The objective is convex and piecewise quadratic, so its derivative is
    nondecreasing and piecewise linear in ``tau``; locate the sign change
    among the breakpoints and solve the linear piece exactly.
    """
    nz = a != 0
    an = a[nz]
    wn = w[nz]
    Ln = L[nz]
    Un = U[nz]
    bp = np.concatenate([(wn - Ln)[np.isfinite(Ln)] / an[np.isfinite(Ln)],
                         (wn - Un)[np.isfinite(Un)] / an[np.isfinite(Un)]])
    def slope(tau):
        u = wn - tau * an
        return -2.0 * np.dot(an, _interval_excess(u, Ln, Un))

    def solve_on(tau_probe, lo, hi):
        u = wn - tau_probe * an
        below = u < Ln
        above = u > Un
        out = below | above
        den = np.dot(an[out], an[out])
        if den == 0.0:
            return tau_probe
        B = np.where(below, Ln, Un)
        tau = np.dot(an[out], wn[out] - B[out]) / den
        return float(np.clip(tau, lo, hi))

    if bp.size == 0:
        # all coordinates either free (L=U=0 style) or unbounded: at most one piece
        return solve_on(0.0, -np.inf, np.inf)
    bp = np.unique(bp)
    d = np.array([slope(t) for t in bp]) if bp.size < 64 else _slopes(wn, an, Ln, Un, bp)
    k = int(np.searchsorted(d, 0.0, side="left"))
    if k < bp.size and d[k] == 0.0:
        return float(bp[k])
    if k == 0:
        return solve_on(bp[0] - 1.0, -np.inf, bp[0])
    if k == bp.size:
        return solve_on(bp[-1] + 1.0, bp[-1], np.inf)
    return solve_on(0.5 * (bp[k - 1] + bp[k]), bp[k - 1], bp[k])


def _slopes(wn, an, Ln, Un, bp):
    U_ = wn[None, :] - bp[:, None] * an[None, :]
    E = U_ - np.clip(U_, Ln[None, :], Un[None, :])
    return -2.0 * E @ an


# --------------------------------------------------------------------------
# convex sets

class ConvexSet:
    """Closed convex set with exact projection and normal-cone residuals."""

    kind = "abstract"
    dim = 0

    def project(self, z):
        raise NotImplementedError

    def contains(self, z, tol=1e-9):
        raise NotImplementedError

    def normal_intervals(self, z):
        """Normal cone at ``z`` as ``(L, U, a)``: ``prod [L_i, U_i] + span(a)``.

        ``a`` is None when the set has no hyperplane.  Sets whose cone does
        not have this shape raise NotImplementedError and provide
        :meth:`cone_generators` instead.
        """
        raise NotImplementedError

    def cone_generators(self, z):
        """Normal cone at ``z`` as ``{G c : lb <= c <= ub}``."""
        L, U, a = self.normal_intervals(z)
        n = self.dim
        G = np.eye(n)
        lb, ub = L.copy(), U.copy()
        if a is not None:
            G = np.hstack([G, a[:, None]])
            lb = np.append(lb, -np.inf)
            ub = np.append(ub, np.inf)
        return G, lb, ub

    def normal_cone_residual(self, z, v):
        z = np.asarray(z, dtype=float)
        if not self.contains(z):
            raise InfeasiblePointError("point outside the set")
        try:
            L, U, a = self.normal_intervals(z)
        except NotImplementedError:
            G, lb, ub = self.cone_generators(z)
            return polyhedral_residual(-np.asarray(v, float), G, lb, ub)
        return interval_residual(-np.asarray(v, float), L, U, a)


class WholeSpace(ConvexSet):
    kind = "whole-space"

    def __init__(self, dim):
        self.dim = int(dim)

    def project(self, z):
        return np.array(z, dtype=float)

    def contains(self, z, tol=1e-9):
        return np.shape(z) == (self.dim,)

    def normal_intervals(self, z):
        zero = np.zeros(self.dim)
        return zero, zero.copy(), None

    @property
    def lower(self):
        return np.full(self.dim, -np.inf)

    @property
    def upper(self):
        return np.full(self.dim, np.inf)


class Box(ConvexSet):
    kind = "box"

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float).copy()
        self.upper = np.asarray(upper, dtype=float).copy()
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bound shapes differ")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        self.dim = self.lower.size

    def project(self, z):
        return np.clip(np.asarray(z, dtype=float), self.lower, self.upper)

    def _slack(self, z):
        scale = 1.0 + np.abs(z)
        return scale

    def contains(self, z, tol=1e-9):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            return False
        s = self._slack(z)
        return bool(np.all(z >= self.lower - tol * s) and np.all(z <= self.upper + tol * s))

    def _box_intervals(self, z):
        at_lo = np.abs(z - self.lower) <= ACTIVE_TOL * (1.0 + np.abs(self.lower))
        at_hi = np.abs(z - self.upper) <= ACTIVE_TOL * (1.0 + np.abs(self.upper))
        L = np.where(at_lo, -np.inf, 0.0)
        U = np.where(at_hi, np.inf, 0.0)
        return L, U

    def normal_intervals(self, z):
        L, U = self._box_intervals(np.asarray(z, dtype=float))
        return L, U, None


class BoxHyperplane(Box):
    """``{lower <= z <= upper, normal' z = offset}``."""

    kind = "box-with-hyperplane"

    def __init__(self, lower, upper, normal, offset=0.0):
        super().__init__(lower, upper)
        self.normal = np.asarray(normal, dtype=float).copy()
        self.offset = float(offset)
        if self.normal.shape != (self.dim,):
            raise ValueError("normal has the wrong dimension")
        mid = np.where(np.isfinite(self.lower) & np.isfinite(self.upper),
                       0.5 * (self.lower + self.upper), np.clip(0.0, self.lower, self.upper))
        _, _, ok = kernels.project_box_hyperplane(mid, self.lower, self.upper,
                                                  self.normal, self.offset)
        if not ok:
            raise ValueError("box and hyperplane do not intersect")

    def project(self, z):
        w, _, _ = kernels.project_box_hyperplane(np.asarray(z, dtype=float), self.lower,
                                                 self.upper, self.normal, self.offset)
        return w

    def contains(self, z, tol=1e-9):
        if not super().contains(z, tol):
            return False
        z = np.asarray(z, dtype=float)
        scale = 1.0 + abs(self.offset) + np.abs(self.normal) @ np.abs(z)
        return abs(self.normal @ z - self.offset) <= tol * scale

    def normal_intervals(self, z):
        L, U = self._box_intervals(np.asarray(z, dtype=float))
        return L, U, self.normal


class CappedBoxHyperplane(Box):
    """Box with a hyperplane and coupled caps ``z_i <= z_cap`` for ``i`` in ``capped``.

    This is the upper-level feasible set of the kernel SVM problem, where the
    dual variables are bounded by the penalty parameter, itself a variable.
    """

    kind = "capped-box-with-hyperplane"

    def __init__(self, lower, upper, normal, offset, cap_index, capped):
        super().__init__(lower, upper)
        self.normal = np.asarray(normal, dtype=float).copy()
        self.offset = float(offset)
        self.cap_index = int(cap_index)
        self.capped = np.asarray(capped, dtype=int)
        if self.normal[self.cap_index] != 0.0:
            raise ValueError("the cap coordinate may not enter the hyperplane")
        self._inner(self.upper[self.cap_index], np.clip(0.0, self.lower, self.upper))

    def _inner(self, cap, z):
        hi = self.upper.copy()
        hi[self.capped] = np.minimum(hi[self.capped], cap)
        lo = self.lower.copy()
        lo[self.cap_index] = hi[self.cap_index] = cap
        if np.any(lo > hi):
            return None, False
        w, _, ok = kernels.project_box_hyperplane(np.asarray(z, float), lo, hi,
                                                  self.normal, self.offset)
        return w, ok

    def project(self, z):
        z = np.asarray(z, dtype=float)
        c = self.cap_index

        def obj(cap):
            w, ok = self._inner(cap, z)
            if not ok:
                return np.inf
            return float(np.sum((w - z) ** 2))

        lo_c, hi_c = self.lower[c], self.upper[c]
        res = minimize_scalar(obj, bounds=(lo_c, hi_c), method="bounded",
                              options={"xatol": 1e-13 * (1.0 + hi_c - lo_c)})
        best = res.x
        for cand in (lo_c, hi_c, float(np.clip(z[c], lo_c, hi_c))):
            if obj(cand) < obj(best):
                best = cand
        w, ok = self._inner(best, z)
        if not ok:
            raise ValueError("capped set is empty")
        return w

    def contains(self, z, tol=1e-9):
        if not super().contains(z, tol):
            return False
        z = np.asarray(z, dtype=float)
        cap = z[self.cap_index]
        if np.any(z[self.capped] > cap + tol * (1.0 + abs(cap))):
            return False
        scale = 1.0 + abs(self.offset) + np.abs(self.normal) @ np.abs(z)
        return abs(self.normal @ z - self.offset) <= tol * scale

    def normal_intervals(self, z):
        raise NotImplementedError

    def cone_generators(self, z):
        z = np.asarray(z, dtype=float)
        L, U = self._box_intervals(z)
        n = self.dim
        cols = [np.eye(n)]
        lb, ub = [L], [U]
        cap = z[self.cap_index]
        act = self.capped[np.abs(z[self.capped] - cap) <= ACTIVE_TOL * (1.0 + abs(cap))]
        if act.size:
            Gc = np.zeros((n, act.size))
            Gc[act, np.arange(act.size)] = 1.0
            Gc[self.cap_index, :] = -1.0
            cols.append(Gc)
            lb.append(np.zeros(act.size))
            ub.append(np.full(act.size, np.inf))
        cols.append(self.normal[:, None])
        lb.append([-np.inf])
        ub.append([np.inf])
        return np.hstack(cols), np.concatenate(lb), np.concatenate(ub)


def polyhedral_residual(w, G, lb, ub):
    """``min ||w - G c||`` over ``lb <= c <= ub`` (bounded least squares)."""
    w = np.asarray(w, dtype=float)
    if G.shape[1] == 0:
        return float(np.linalg.norm(w))
    # drop fixed-zero columns and keep the problem small
    keep = ~((lb == 0.0) & (ub == 0.0))
    G, lb, ub = G[:, keep], lb[keep], ub[keep]
    if G.shape[1] == 0:
        return float(np.linalg.norm(w))
    res = lsq_linear(G, w, bounds=(lb, ub), method="bvls", tol=1e-14, lsmr_tol=None)
    c = np.clip(res.x, lb, ub)
    return float(np.linalg.norm(w - G @ c))


def project(set_: ConvexSet, z):
    """Euclidean projection of ``z`` onto ``set_``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (set_.dim,):
        raise ValueError("dimension mismatch")
    return set_.project(z)


def normal_cone_residual(set_: ConvexSet, z, v):
    """``dist(-v, N_set(z))``, i.e. ``dist(0, v + N_set(z))``."""
    return set_.normal_cone_residual(z, v)


# --------------------------------------------------------------------------
# function oracles and problems

@dataclass(frozen=True)
class WeaklyConvexFn:
    """Oracle pair for a rho-weakly convex function of ``z``."""

    value: Callable
    subgrad: Callable
    modulus: float = 0.0


@dataclass(frozen=True)
class ConstraintFamily:
    """Lower-level constraints ``g_i(x, y) <= 0`` (jointly convex)."""

    count: int = 0
    value: Optional[Callable] = None
    grad_x: Optional[Callable] = None
    grad_y: Optional[Callable] = None

    def joint_value(self, x, y):
        if self.count == 0:
            return np.zeros(0)
        return np.asarray(self.value(x, y), dtype=float)


@dataclass
class BilevelProblem:
    """Oracle bundle for ``min F(x, y)`` s.t. ``y`` solves the lower problem at ``x``.

    ``F = F1 - F2`` with both parts ``rho_F``-weakly convex, the lower
    objective ``f`` is ``rho_f``-weakly convex on ``C``.  Oracles take the
    stacked vector ``z = (x, y)``; the partial oracles take ``(x, y)``.
    ``lower`` is an optional adapter with structured solvers (see
    :mod:`dwcbilevel.applications`).  Without one, ``f`` must be smooth in
    ``y`` and ``F1`` smooth, with gradient Lipschitz constants
    ``lower_lipschitz`` and ``upper_lipschitz``.
    """

    n: int
    m: int
    F1: WeaklyConvexFn
    F2: WeaklyConvexFn
    rho_F: float
    f: WeaklyConvexFn
    f_x: Callable
    f_y: Callable
    rho_f: float
    X: ConvexSet
    Y: ConvexSet
    constraints: ConstraintFamily = field(default_factory=ConstraintFamily)
    structure: str = "prox-friendly-composite"
    F: Optional[Callable] = None
    lower: object = None
    convex_lower: bool = False
    n_train: int = 1
    lower_lipschitz: Optional[float] = None
    upper_lipschitz: Optional[float] = None
    name: str = "bilevel"

    def __post_init__(self):
        if self.X.dim != self.n or self.Y.dim != self.m:
            raise ValueError("set dimensions do not match (n, m)")
        if self.rho_f < 0 or self.rho_F < 0:
            raise ValueError("moduli must be nonnegative")
        if self.rho_f == 0 and not self.convex_lower:
            self.convex_lower = True
        if self.structure not in ("prox-friendly-composite", "qp-box-hyperplane", "smooth"):
            raise ValueError(f"unknown structure hint {self.structure!r}")

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[: self.n], z[self.n:]

    def join(self, x, y):
        return np.concatenate([np.atleast_1d(x), np.atleast_1d(y)]).astype(float)

    def upper_value(self, z):
        return self.F1.value(z) - self.F2.value(z)


@dataclass
class ValidationReport:
    checks: dict

    @property
    def ok(self):
        return all(c["fail"] == 0 for c in self.checks.values())

    def failures(self):
        return {k: c for k, c in self.checks.items() if c["fail"]}


def _secant_gap(fn, z1, z2, lam, rho):
    lhs = fn(lam * z1 + (1 - lam) * z2)
    rhs = lam * fn(z1) + (1 - lam) * fn(z2) + rho * lam * (1 - lam) / 2 * np.sum((z1 - z2) ** 2)
    return lhs - rhs, 1e-9 * (1 + abs(lhs) + abs(rhs))


def _sample_set(set_, rng, size, spread=1.0):
    lo = getattr(set_, "lower", np.full(set_.dim, -np.inf))
    hi = getattr(set_, "upper", np.full(set_.dim, np.inf))
    lo = np.where(np.isfinite(lo), lo, -spread)
    hi = np.where(np.isfinite(hi), hi, spread)
    pts = lo + (hi - lo) * rng.random((size, set_.dim))
    if isinstance(set_, (BoxHyperplane, CappedBoxHyperplane)):
        pts = np.array([set_.project(p) for p in pts])
    return pts


def validate_problem(p: BilevelProblem, sample_count=200, rng_seed=0, sampler=None):
    """Falsification checks of the structural assumptions by random sampling.

    Checks the secant inequality of F1, F2 (modulus ``rho_F``) and f
    (modulus ``rho_f``), the weakly convex subgradient inequality, joint
    convexity of the constraints, ``F = F1 - F2`` when ``p.F`` is given,
    and agreement of the partial oracles with the joint one.  A modulus can
    only be refuted this way, never certified.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be positive")
    rng = np.random.default_rng(rng_seed)
    if sampler is None:
        def sampler(k):
            xs = _sample_set(p.X, rng, k)
            ys = _sample_set(p.Y, rng, k)
            return np.hstack([xs, ys])
    Z1, Z2 = sampler(sample_count), sampler(sample_count)
    lams = rng.random(sample_count)
    checks = {}

    def record(name, gaps):
        fails = [(i, g) for i, (g, tol) in enumerate(gaps) if g > tol]
        entry = {"pass": len(gaps) - len(fails), "fail": len(fails), "witness": None}
        if fails:
            i, g = max(fails, key=lambda t: t[1])
            entry["witness"] = (Z1[i].copy(), Z2[i].copy(), float(lams[i]), float(g))
        checks[name] = entry

    def subgrad_gaps(fn, rho):
        out = []
        for z1, z2 in zip(Z1, Z2):
            g = np.asarray(fn.subgrad(z1))
            rhs = fn.value(z1) + g @ (z2 - z1) - rho / 2 * np.sum((z2 - z1) ** 2)
            lhs = fn.value(z2)
            out.append((rhs - lhs, 1e-9 * (1 + abs(lhs) + abs(rhs))))
        return out

    for name, fn, rho in (("F1", p.F1, p.rho_F), ("F2", p.F2, p.rho_F), ("f", p.f, p.rho_f)):
        record(f"{name}.secant",
               [_secant_gap(fn.value, a, b, l, rho) for a, b, l in zip(Z1, Z2, lams)])
        record(f"{name}.subgradient", subgrad_gaps(fn, rho))

    if p.constraints.count:
        gaps = []
        for a, b, l in zip(Z1, Z2, lams):
            for i in range(p.constraints.count):
                def gi(z, i=i):
                    x, y = p.split(z)
                    return float(p.constraints.joint_value(x, y)[i])
                gaps.append(_secant_gap(gi, a, b, l, 0.0))
        checks_name = "g.convex"
        fails = sum(1 for g, t in gaps if g > t)
        checks[checks_name] = {"pass": len(gaps) - fails, "fail": fails, "witness": None}

    if p.F is not None:
        gaps = []
        for z in Z1:
            d = abs(p.F(z) - p.upper_value(z))
            gaps.append((d, 1e-10 * (1 + abs(p.F(z)))))
        record("F.split", gaps)

    gaps = []
    for z in Z1:
        x, y = p.split(z)
        joint = np.asarray(p.f.subgrad(z))
        part = np.concatenate([np.atleast_1d(p.f_x(x, y)), np.atleast_1d(p.f_y(x, y))])
        d = float(np.max(np.abs(joint - part))) if joint.size else 0.0
        gaps.append((d, 1e-8 * (1 + np.max(np.abs(joint)))))
    record("f.partials", gaps)
    return ValidationReport(checks)
