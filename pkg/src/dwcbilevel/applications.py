"""Hyperparameter-selection bilevel problems: elastic net, sparse group lasso, kernel SVM.

Each builder returns a :class:`~dwcbilevel.problem.BilevelProblem` whose
``lower`` adapter carries the structured solvers:

* ``prox(x, y, gamma, warm, target)`` solves the proximal lower problem
  and returns ``(prox_point, multipliers, residual)``;
* ``dwc_subproblem(...)`` builds the strongly convex subproblem objective
  with a fast fixed-multiplier solver;
* ``val_error`` / ``test_error`` compute the reported metrics.
"""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .inner import (CompositeObjective, HingeSum, MaxTerm, SmoothTerm, SubdiffPieces)
from .problem import (BilevelProblem, Box, BoxHyperplane, CappedBoxHyperplane,
                      ConstraintFamily, WeaklyConvexFn, WholeSpace, interval_residual)


# --------------------------------------------------------------------------
# tasks

@dataclass
class Splits:
    A_tr: np.ndarray
    b_tr: np.ndarray
    A_val: np.ndarray
    b_val: np.ndarray
    A_te: np.ndarray
    b_te: np.ndarray

    def validate(self):
        if len(self.b_tr) < 1 or len(self.b_val) < 1:
            raise ValueError("training and validation sets must be nonempty")
        for A, b in ((self.A_tr, self.b_tr), (self.A_val, self.b_val), (self.A_te, self.b_te)):
            if A.shape[0] != b.shape[0]:
                raise ValueError("design matrix and response lengths differ")


@dataclass
class ElasticNetTask:
    splits: Splits
    beta_bar: np.ndarray = None
    lam_box: tuple = (0.0, 100.0)
    beta_true: np.ndarray = None
    noise_sd: float = None

    def __post_init__(self):
        p = self.splits.A_tr.shape[1]
        if self.beta_bar is None:
            self.beta_bar = np.full(p, 2.0)
        self.beta_bar = np.broadcast_to(np.asarray(self.beta_bar, float), (p,)).copy()
        self.splits.validate()
        if np.any(self.beta_bar <= 0):
            raise ValueError("beta_bar must be positive")


@dataclass
class SglTask:
    splits: Splits
    groups: list
    lam_box: tuple = (5.0, 500.0)
    beta_true: np.ndarray = None
    noise_sd: float = None

    def __post_init__(self):
        self.splits.validate()
        p = self.splits.A_tr.shape[1]
        seen = np.zeros(p, int)
        for s, e in self.groups:
            seen[s:e] += 1
        if np.any(seen != 1):
            raise ValueError("groups must be disjoint contiguous blocks covering all features")


@dataclass
class SvmTask:
    splits: Splits
    sigma_box: tuple = (0.01, 10.0)
    C_box: tuple = (0.01, 10.0)
    rho: float = 50.0

    def __post_init__(self):
        self.splits.validate()
        for b in (self.splits.b_tr, self.splits.b_val, self.splits.b_te):
            if not np.all(np.isin(b, (-1.0, 1.0))):
                raise ValueError("labels must be -1 or +1")
        if len(np.unique(self.splits.b_tr)) < 2:
            raise ValueError("both classes must appear in the training set")


# --------------------------------------------------------------------------
# penalized least squares (elastic net and sparse group lasso)

class PenalizedLS:
    """Lower objective ``1/2 ||A b - y||^2 + sum_j x_j pen_j(b)`` with upper
    objective ``1/2 ||A_val b - y_val||^2``.

    ``kinds[j]`` selects ``pen_j``: l1 norm (0), half squared norm (1) or
    the Euclidean norm of group ``grp[j]`` (2).
    """

    def __init__(self, splits: Splits, kinds, grp, groups, xbox: Box, ybox):
        self.splits = splits
        A, b = splits.A_tr, splits.b_tr
        Av, bv = splits.A_val, splits.b_val
        self.A_t, self.b_t, self.A_v, self.b_v = A, b, Av, bv
        self.H_t = np.ascontiguousarray(A.T @ A)
        self.h_t = A.T @ b
        self.H_v = np.ascontiguousarray(Av.T @ Av)
        self.h_v = Av.T @ bv
        self.kinds = np.asarray(kinds, dtype=np.int64)
        self.grp = np.asarray(grp, dtype=np.int64)
        self.groups = [(int(s), int(e)) for s, e in groups]
        self.gstart = np.array([s for s, _ in self.groups], dtype=np.int64)
        self.gend = np.array([e for _, e in self.groups], dtype=np.int64)
        self.group_idx = [np.arange(s, e) for s, e in self.groups]
        self.xbox = xbox
        self.ybox = ybox
        self.nx = len(self.kinds)
        self.p = A.shape[1]
        self.n_train = A.shape[0]
        self.lip_v = float(np.linalg.eigvalsh(self.H_v)[-1])
        self.lip_t = float(np.linalg.eigvalsh(self.H_t)[-1])
        self._blo = np.ascontiguousarray(ybox.lower, dtype=float)
        self._bhi = np.ascontiguousarray(ybox.upper, dtype=float)
        if self.gstart.size and (np.isfinite(self._blo).any() or np.isfinite(self._bhi).any()):
            raise NotImplementedError("group penalties with a coefficient box")

    # -- function values
    def pen(self, beta):
        return np.array([kernels.pen_value(k, g, beta, self.gstart, self.gend)
                         for k, g in zip(self.kinds, self.grp)])

    def f(self, x, beta):
        r = self.A_t @ beta - self.b_t
        return 0.5 * float(r @ r) + float(x @ self.pen(beta))

    def F1(self, beta):
        r = self.A_v @ beta - self.b_v
        return 0.5 * float(r @ r)

    def weights(self, x):
        w1 = float(x[self.kinds == 0].sum())
        l2w = float(x[self.kinds == 1].sum())
        gw = np.zeros(len(self.groups))
        for j in np.flatnonzero(self.kinds == 2):
            gw[self.grp[j]] += x[j]
        return w1, l2w, gw

    def pen_pieces(self, x, beta, scale=1.0):
        """Structured subdifferential of ``sum_j x_j pen_j`` in ``beta``."""
        w1, l2w, gw = self.weights(x)
        grad = l2w * beta + w1 * np.sign(beta)
        kink = beta == 0
        lo = np.where(kink, -w1, 0.0)
        hi = np.where(kink, w1, 0.0)
        balls = []
        for idx, w in zip(self.group_idx, gw):
            nrm = np.linalg.norm(beta[idx])
            if nrm > 0:
                grad[idx] += w * beta[idx] / nrm
            elif w > 0:
                balls.append((idx, scale * w))
        return scale * grad, scale * lo, scale * hi, balls

    def f_y(self, x, beta):
        g, _, _, _ = self.pen_pieces(x, beta)
        return self.H_t @ beta - self.h_t + g

    # -- lower-level solves
    def _residual(self, x, beta, H, h):
        g, lo, hi, balls = self.pen_pieces(x, beta)
        v = H @ beta + h + g
        L, U, _ = self.ybox.normal_intervals(beta)
        return interval_residual(-v, L + lo, U + hi, None, balls)

    def prox(self, x, y, gamma, warm, target):
        inv = 0.0 if np.isinf(gamma) else 1.0 / gamma
        H = self.H_t + inv * np.eye(self.p)
        h = -self.h_t - inv * y
        beta = self.ybox.project(y if warm is None else warm).astype(float)
        x = np.asarray(x, float)
        tol = 0.1 * target / np.sqrt(np.max(np.diag(H)) + 1.0)
        r = np.inf
        for _ in range(6):
            kernels.pls_cd(beta, x.copy(), H, h, np.ones(self.nx), np.zeros(self.nx),
                           self.xbox.lower, self.xbox.upper, self._blo, self._bhi,
                           self.kinds, self.grp, self.gstart, self.gend, 1.0, False,
                           tol, 200000)
            r = self._residual(x, beta, H, h)
            if r <= target:
                break
            tol *= 0.01
        return beta, np.zeros(0), r

    def solve_lower(self, x, warm=None, target=1e-8):
        beta, _, _ = self.prox(np.asarray(x, float), np.zeros(self.p), np.inf, warm, target)
        return beta

    def sample(self, rng, k):
        xs = self.xbox.lower + (self.xbox.upper - self.xbox.lower) * rng.random((k, self.nx))
        lo = np.where(np.isfinite(self._blo), self._blo, -1.0)
        hi = np.where(np.isfinite(self._bhi), self._bhi, 1.0)
        ys = lo + (hi - lo) * rng.random((k, self.p))
        return np.hstack([xs, ys])

    # -- subproblem
    def dwc_subproblem(self, zk, xi0, V_grad, V_const, beta_pen, alpha, rho_F, rho_v, **_):
        nx, p = self.nx, self.p
        zk = np.asarray(zk, float)
        xk, bk = zk[:nx], zk[nx:]
        lin = np.asarray(xi0, float)
        H_v, h_v, H_t, h_t = self.H_v, self.h_v, self.H_t, self.h_t

        def q_val(z):
            b = z[nx:]
            r = self.A_v @ b - self.b_v
            return (0.5 * float(r @ r) + 0.5 * rho_F * float(z @ z) - float(lin @ z)
                    + 0.5 * alpha * float(np.sum((z - zk) ** 2)))

        def q_grad(z):
            g = (rho_F + alpha) * z - lin - alpha * zk
            g[nx:] += H_v @ z[nx:] - h_v
            return g

        def G(z):
            x, b = z[:nx], z[nx:]
            return self.f(x, b) + 0.5 * rho_v * float(z @ z)

        def G_pieces(z):
            x, b = z[:nx], z[nx:]
            g, lo, hi, balls = self.pen_pieces(x, b)
            grad = np.empty(nx + p)
            grad[:nx] = self.pen(b) + rho_v * x
            grad[nx:] = H_t @ b - h_t + rho_v * b + g
            zeros = np.zeros(nx)
            return SubdiffPieces(grad, np.concatenate([zeros, lo]), np.concatenate([zeros, hi]),
                                 [(idx + nx, r) for idx, r in balls])

        sset = Box(np.concatenate([self.xbox.lower, self._blo]),
                   np.concatenate([self.xbox.upper, self._bhi]))
        eye = np.eye(p)
        xlo, xhi = self.xbox.lower, self.xbox.upper
        kinds, grp, gs, ge = self.kinds, self.grp, self.gstart, self.gend
        blo, bhi = self._blo, self._bhi

        def fixed(c, warm, tol):
            d = alpha + rho_F + c * rho_v
            H = np.ascontiguousarray(H_v + c * H_t + d * eye)
            h = -h_v - c * h_t - alpha * bk - lin[nx:] - c * V_grad[nx:]
            dx = np.full(nx, d)
            ex = -alpha * xk - lin[:nx] - c * V_grad[:nx]
            z = sset.project(warm).copy()
            x, b = z[:nx].copy(), z[nx:].copy()
            ktol = tol / np.sqrt(np.max(np.diag(H)) + 1.0)
            kernels.pls_cd(b, x, H, h, dx, ex, xlo, xhi, blo, bhi, kinds, grp, gs, ge,
                           c, True, ktol, 200000)
            return np.concatenate([x, b])

        mt = MaxTerm(beta_pen, G, G_pieces, np.asarray(V_grad, float), float(V_const))
        return CompositeObjective(SmoothTerm(q_val, q_grad, self.lip_v + rho_F + alpha),
                                  None, mt, alpha + rho_F, sset, fixed_zeta_solver=fixed)

    # -- metrics
    def val_error(self, x, beta):
        r = self.A_v @ beta - self.b_v
        return float(np.mean(r * r))

    def test_error(self, x, beta):
        s = self.splits
        r = s.A_te @ beta - s.b_te
        return float(np.mean(r * r))

    def upper_objective(self, x, beta):
        return self.F1(beta)

    def init_grid(self, resolution):
        lo, hi = self.xbox.lower, self.xbox.upper
        axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
        return axes


def _pls_problem(lower: PenalizedLS, rho_f, name):
    nx = lower.nx

    def split(z):
        return z[:nx], z[nx:]

    def f_val(z):
        x, b = split(z)
        return lower.f(x, b)

    def f_sub(z):
        x, b = split(z)
        return np.concatenate([lower.pen(b), lower.f_y(x, b)])

    def F1_val(z):
        return lower.F1(z[nx:])

    def F1_sub(z):
        g = np.zeros(z.size)
        g[nx:] = lower.H_v @ z[nx:] - lower.h_v
        return g

    zero = WeaklyConvexFn(lambda z: 0.0, lambda z: np.zeros(z.size), 0.0)
    return BilevelProblem(
        n=nx, m=lower.p,
        F1=WeaklyConvexFn(F1_val, F1_sub, 0.0), F2=zero, rho_F=0.0,
        f=WeaklyConvexFn(f_val, f_sub, rho_f),
        f_x=lambda x, b: lower.pen(b), f_y=lambda x, b: lower.f_y(x, b),
        rho_f=rho_f, X=lower.xbox, Y=lower.ybox, structure="prox-friendly-composite",
        F=lambda z: lower.F1(z[nx:]), lower=lower, n_train=lower.n_train, name=name,
        lower_lipschitz=lower.lip_t, upper_lipschitz=lower.lip_v)


def elastic_net_moduli(task: ElasticNetTask):
    """``(benchmark, analytic)`` weak-convexity moduli of the lower objective."""
    p = task.splits.A_tr.shape[1]
    return 2.0 * np.sqrt(p), float(np.sqrt(p) + np.linalg.norm(task.beta_bar))


def build_elastic_net(task: ElasticNetTask, rho_f=None) -> BilevelProblem:
    """Elastic net: ``x = (lam1, lam2)``, ``y = beta`` in ``[-beta_bar, beta_bar]``."""
    if rho_f is None:
        rho_f = elastic_net_moduli(task)[0]
    lo, hi = task.lam_box
    lower = PenalizedLS(task.splits, [0, 1], [0, 0], [], Box([lo, lo], [hi, hi]),
                        Box(-task.beta_bar, task.beta_bar))
    prob = _pls_problem(lower, rho_f, "elastic-net")
    prob.analytic_rho_f = elastic_net_moduli(task)[1]
    return prob


def build_sgl(task: SglTask, rho_f=None) -> BilevelProblem:
    """Sparse group lasso: ``x = (lam_1..lam_M, lam_{M+1})``, ``y = beta``."""
    p = task.splits.A_tr.shape[1]
    M = len(task.groups)
    if rho_f is None:
        rho_f = 1.0 + np.sqrt(p)
    lo, hi = task.lam_box
    lower = PenalizedLS(task.splits, [2] * M + [0], list(range(M)) + [0], task.groups,
                        Box(np.full(M + 1, lo), np.full(M + 1, hi)), WholeSpace(p))
    return _pls_problem(lower, rho_f, "sparse-group-lasso")


# --------------------------------------------------------------------------
# kernel SVM

def rbf(D, sigma):
    return np.exp(-sigma * D)


class KernelSvm:
    """Dual RBF-kernel SVM lower level, validation hinge loss upper level.

    Variables ``z = (sigma, C, eta)``.  The cap ``eta <= C`` is the
    x-dependent constraint family; ``b'eta = 0`` and ``eta >= 0`` live in
    the set ``Y``.
    """

    def __init__(self, task: SvmTask):
        s = task.splits
        self.task = task
        self.splits = s
        self.b = s.b_tr.astype(float)
        self.n = self.b.size
        self.D = kernels.sqdist(s.A_tr, s.A_tr)
        self.Dv = kernels.sqdist(s.A_val, s.A_tr)
        self.Dte = kernels.sqdist(s.A_te, s.A_tr)
        self.bb = np.outer(self.b, self.b)
        slo, shi = task.sigma_box
        clo, chi = task.C_box
        self.xbox = Box([slo, clo], [shi, chi])
        self.ybox = BoxHyperplane(np.zeros(self.n), np.full(self.n, chi), self.b, 0.0)
        n = self.n
        self.cset = CappedBoxHyperplane(np.concatenate([[slo, clo], np.zeros(n)]),
                                        np.concatenate([[shi, chi], np.full(n, chi)]),
                                        np.concatenate([[0.0, 0.0], self.b]), 0.0,
                                        1, np.arange(2, n + 2))
        self.n_train = n
        self._cache_sigma = None

    # -- kernel pieces
    def Q(self, sigma):
        if self._cache_sigma != sigma:
            self._K = rbf(self.D, sigma)
            self._Q = np.ascontiguousarray(self.bb * self._K)
            self._cache_sigma = sigma
        return self._Q

    def f(self, x, eta):
        Q = self.Q(x[0])
        return 0.5 * float(eta @ Q @ eta) - float(eta.sum())

    def f_x(self, x, eta):
        Q = self.Q(x[0])
        return np.array([-0.5 * float(eta @ (Q * self.D) @ eta), 0.0])

    def f_y(self, x, eta):
        return self.Q(x[0]) @ eta - 1.0

    # -- lower-level solves
    def prox(self, x, y, gamma, warm, target):
        sigma, C = float(x[0]), float(x[1])
        Q = self.Q(sigma)
        yset = BoxHyperplane(np.zeros(self.n), np.full(self.n, C), self.b, 0.0)
        if np.isinf(gamma):
            eta = self._smo(Q, C, warm, target)
            g = Q @ eta - 1.0
            from .inner import recover_multipliers
            _, _, mu_hi, resid = recover_multipliers(yset, eta, g)
            return eta, mu_hi, float(np.linalg.norm(resid))
        from .inner import recover_multipliers, solve_qp_box_hyperplane
        start = yset.project(y if warm is None else np.minimum(warm, C))
        eta, lam, mu_lo, mu_hi = solve_qp_box_hyperplane(
            Q, -np.ones(self.n), yset, y, 1.0 / gamma, start, target,
            lipschitz=float(np.abs(Q).sum(axis=1).max()))
        g = Q @ eta - 1.0 + (eta - y) / gamma
        _, _, mu_hi, resid = recover_multipliers(yset, eta, g)
        return eta, mu_hi, float(np.linalg.norm(resid))

    def _smo(self, Q, C, warm, target):
        alpha = np.zeros(self.n)
        eps = max(min(target, 1e-3), 1e-12)
        for _ in range(4):
            alpha = np.zeros(self.n)
            kernels.smo(Q, -np.ones(self.n), self.b, C, alpha, eps, 10 ** 7)
            alpha = np.clip(alpha, 0.0, C)
            g = Q @ alpha - 1.0
            from .inner import recover_multipliers
            yset = BoxHyperplane(np.zeros(self.n), np.full(self.n, C), self.b, 0.0)
            _, _, _, resid = recover_multipliers(yset, alpha, g)
            if np.linalg.norm(resid) <= target:
                break
            eps *= 0.01
        return alpha

    def solve_lower(self, x, warm=None, target=1e-8):
        eta, _, _ = self.prox(np.asarray(x, float), np.zeros(self.n), np.inf, warm, target)
        return eta

    def sample(self, rng, k):
        out = np.empty((k, self.n + 2))
        lo, hi = self.xbox.lower, self.xbox.upper
        for i in range(k):
            x = lo + (hi - lo) * rng.random(2)
            eta = rng.random(self.n) * x[1]
            yset = BoxHyperplane(np.zeros(self.n), np.full(self.n, x[1]), self.b, 0.0)
            out[i] = np.concatenate([x, yset.project(eta)])
        return out

    # -- upper level
    @staticmethod
    def jstar(C, eta, prev=None, margin=1e-6):
        """Offset index: ``prev`` while it stays strictly inside ``(0, C)``,
        otherwise the index with ``eta_j`` closest to ``C/2``."""
        if prev is not None and margin * C < eta[prev] < (1 - margin) * C:
            return int(prev)
        return int(np.argmin(np.abs(eta - 0.5 * C)))

    def decision_offset(self, sigma, eta, j):
        Kj = rbf(self.D[j], sigma)
        return float(np.sum(eta * self.b * Kj) - self.b[j])

    def decision(self, sigma, eta, Dnew, j):
        """``w' phi(a) - c`` for rows of squared distances ``Dnew`` to training points."""
        return rbf(Dnew, sigma) @ (eta * self.b) - self.decision_offset(sigma, eta, j)

    def hinge_args(self, z, j):
        """``h_j(z) = 1 - b_j dec_j`` over validation points and their Jacobian."""
        sigma, eta = z[0], z[2:]
        bv = self.splits.b_val
        Kv = rbf(self.Dv, sigma)
        Kj = rbf(self.D[j], sigma)
        M = Kv - Kj[None, :]
        eb = eta * self.b
        dec = M @ eb + self.b[j]
        h = 1.0 - bv * dec
        J = np.zeros((bv.size, z.size))
        dM = -self.Dv * Kv + (self.D[j] * Kj)[None, :]
        J[:, 0] = -bv * (dM @ eb)
        J[:, 2:] = -(bv[:, None] * M) * self.b[None, :]
        return h, J

    def F1(self, z, j=None):
        if j is None:
            j = self.jstar(z[1], z[2:])
        h, _ = self.hinge_args(z, j)
        return float(np.maximum(h, 0.0).sum())

    def val_error(self, x, eta):
        return self.F1(np.concatenate([x, eta])) / self.splits.b_val.size

    def test_error(self, x, eta):
        j = self.jstar(x[1], eta)
        dec = self.decision(x[0], eta, self.Dte, j)
        return float(np.mean(0.5 * np.abs(np.sign(dec) - self.splits.b_te)))

    def upper_objective(self, x, eta):
        return self.F1(np.concatenate([x, eta]))

    # -- subproblem
    def dwc_subproblem(self, zk, xi0, V_grad, V_const, beta_pen, alpha, rho_F, rho_v,
                       jstar=None, **_):
        zk = np.asarray(zk, float)
        j = self.jstar(zk[1], zk[2:]) if jstar is None else jstar
        lin = np.asarray(xi0, float)
        V_grad = np.asarray(V_grad, float)

        def q_val(z):
            return (0.5 * rho_F * float(z @ z) - float(lin @ z)
                    + 0.5 * alpha * float(np.sum((z - zk) ** 2)))

        def q_grad(z):
            return (rho_F + alpha) * z - lin - alpha * zk

        def G(z):
            return self.f(z[:2], z[2:]) + 0.5 * rho_v * float(z @ z)

        def G_grad(z):
            g = np.concatenate([self.f_x(z[:2], z[2:]), self.f_y(z[:2], z[2:])])
            return g + rho_v * z

        def G_pieces(z):
            zeros = np.zeros(z.size)
            return SubdiffPieces(G_grad(z), zeros, zeros.copy())

        hinges = HingeSum(lambda z: self.hinge_args(z, j)[0], lambda z: self.hinge_args(z, j)[1])
        mt = MaxTerm(beta_pen, G, G_pieces, V_grad, float(V_const))
        obj = CompositeObjective(SmoothTerm(q_val, q_grad, rho_F + alpha), None, mt,
                                 alpha, self.cset, hinges=hinges, tie_tol=1e-9,
                                 hinge_tie_tol=1e-8)
        obj.direct_solver = lambda z0, tol: self._slsqp(obj, j, z0, tol, G, G_grad)
        obj.jstar = j
        return obj

    def _slsqp(self, obj, j, z0, tol, G, G_grad, band=0.25, rounds=8):
        """Active-set smooth reformulation solved by SLSQP.

        Hinges near their kink get slack variables, clearly positive ones
        enter linearly, clearly negative ones are dropped; only caps near
        activity become constraints.  Misclassified indices at the solution
        are moved into the slack/constraint sets and the solve repeated.
        """
        h0, _ = self.hinge_args(z0, j)
        S = np.abs(h0) <= band
        P = h0 > band
        caps = z0[2:] >= z0[1] - band
        z = z0
        for _ in range(rounds):
            z = self._slsqp_once(obj, j, z, tol, G_grad, S, P, caps)
            h, _ = self.hinge_args(z, j)
            scale = 1e-9 * (1.0 + np.abs(h))
            wrong = (P & (h < -scale)) | (~P & ~S & (h > scale))
            capv = ~caps & (z[2:] > z[1] + 1e-12 * (1.0 + z[1]))
            if not wrong.any() and not capv.any():
                break
            S |= wrong
            P &= ~wrong
            caps |= capv
        z = self.cset.project(self._snap(z))
        if obj.value(z) > obj.value(z0):
            return z0
        return z

    def _snap(self, z, tol=1e-9):
        """Move coordinates within ``tol`` of a bound or of the cap onto it."""
        lo, hi = self.cset.lower, self.cset.upper
        z = np.clip(z, lo, hi)
        scale = tol * (1.0 + np.abs(z))
        z = np.where(z - lo <= scale, lo, z)
        z = np.where(hi - z <= scale, hi, z)
        eta = z[2:]
        eta[np.abs(eta - z[1]) <= tol * (1.0 + z[1])] = z[1]
        return z

    def _slsqp_once(self, obj, j, z0, tol, G_grad, S, P, caps):
        nz = z0.size
        nS = int(S.sum())
        mt = obj.max_term
        beta_pen = mt.weight
        ci = np.flatnonzero(caps)
        h0, _ = self.hinge_args(z0, j)
        u0 = np.concatenate([z0, np.maximum(h0[S], 0.0), [max(mt.gap(z0), 0.0)]])
        memo = {}

        def hj(u):
            key = u[:nz].tobytes()
            if key not in memo:
                memo.clear()
                memo[key] = self.hinge_args(u[:nz], j)
            return memo[key]

        def fun(u):
            z = u[:nz]
            h, _ = hj(u)
            return (obj.smooth.value(z) + float(h[P].sum()) + u[nz:nz + nS].sum()
                    + beta_pen * u[-1])

        def jac(u):
            _, J = hj(u)
            g = np.empty_like(u)
            g[:nz] = obj.smooth.grad(u[:nz]) + J[P].sum(axis=0)
            g[nz:nz + nS] = 1.0
            g[-1] = beta_pen
            return g

        def cons(u):
            z = u[:nz]
            h, _ = hj(u)
            return np.concatenate([u[nz:nz + nS] - h[S], [u[-1] - mt.gap(z)],
                                   z[1] - z[2:][ci]])

        def cons_jac(u):
            z = u[:nz]
            _, J = hj(u)
            out = np.zeros((nS + 1 + ci.size, u.size))
            out[:nS, :nz] = -J[S]
            out[:nS, nz:nz + nS] = np.eye(nS)
            out[nS, :nz] = -(G_grad(z) - mt.V_grad)
            out[nS, -1] = 1.0
            out[nS + 1:, 1] = 1.0
            out[nS + 1 + np.arange(ci.size), 2 + ci] = -1.0
            return out

        eq_jac = np.concatenate([[0.0, 0.0], self.b, np.zeros(nS + 1)])
        lo = np.concatenate([self.cset.lower, np.zeros(nS + 1)])
        hi = np.concatenate([self.cset.upper, np.full(nS + 1, np.inf)])
        res = minimize(fun, u0, jac=jac, method="SLSQP", bounds=list(zip(lo, hi)),
                       constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac},
                                    {"type": "eq", "fun": lambda u: np.array([eq_jac @ u]),
                                     "jac": lambda u: eq_jac[None, :]}],
                       options={"ftol": min(1e-12, tol * 1e-3), "maxiter": 1000})
        return np.clip(res.x[:nz], self.cset.lower, self.cset.upper)


def build_svm(task: SvmTask) -> BilevelProblem:
    """Kernel SVM: ``x = (sigma, C)``, ``y = eta``; constraints ``eta_i <= C``."""
    lower = KernelSvm(task)
    n = lower.n

    def f_val(z):
        return lower.f(z[:2], z[2:])

    def f_sub(z):
        return np.concatenate([lower.f_x(z[:2], z[2:]), lower.f_y(z[:2], z[2:])])

    cons = ConstraintFamily(
        count=n,
        value=lambda x, eta: eta - x[1],
        grad_x=lambda x, eta: np.tile([0.0, -1.0], (n, 1)),
        grad_y=lambda x, eta: np.eye(n))
    F1 = WeaklyConvexFn(lambda z: lower.F1(z), _hinge_subgrad(lower), task.rho)
    zero = WeaklyConvexFn(lambda z: 0.0, lambda z: np.zeros(z.size), 0.0)
    return BilevelProblem(
        n=2, m=n, F1=F1, F2=zero, rho_F=task.rho,
        f=WeaklyConvexFn(f_val, f_sub, task.rho), f_x=lower.f_x, f_y=lower.f_y,
        rho_f=task.rho, X=lower.xbox, Y=lower.ybox, constraints=cons,
        structure="qp-box-hyperplane", lower=lower, n_train=n, name="kernel-svm")


def _hinge_subgrad(lower):
    def sub(z):
        j = lower.jstar(z[1], z[2:])
        h, J = lower.hinge_args(z, j)
        return J[h > 0].sum(axis=0)
    return sub


# --------------------------------------------------------------------------
# toy problem with a closed-form lower level

def build_toy(x_box=(0.0, 3.0), y_box=(-5.0, 5.0)) -> BilevelProblem:
    """One-dimensional bilevel problem with ``S(x) = x``.

    Lower level ``f = y^2/2 - x y`` over ``y`` in ``Y``, upper level
    ``F = (x - 1)^2/2 + (y - 2)^2/2``.  The bilevel solution is
    ``x = y = 1.5``.  ``f`` is jointly ``(sqrt(5) - 1)/2``-weakly convex; the
    modulus is rounded up to 1.  No lower adapter is attached, so all
    solves go through the generic smooth paths.
    """
    def f_val(z):
        return 0.5 * z[1] ** 2 - z[0] * z[1]

    def f_sub(z):
        return np.array([-z[1], z[1] - z[0]])

    def F_val(z):
        return 0.5 * (z[0] - 1.0) ** 2 + 0.5 * (z[1] - 2.0) ** 2

    def F_sub(z):
        return np.array([z[0] - 1.0, z[1] - 2.0])

    zero = WeaklyConvexFn(lambda z: 0.0, lambda z: np.zeros(z.size), 0.0)
    return BilevelProblem(
        n=1, m=1, F1=WeaklyConvexFn(F_val, F_sub, 0.0), F2=zero, rho_F=0.0,
        f=WeaklyConvexFn(f_val, f_sub, 1.0),
        f_x=lambda x, y: -np.atleast_1d(y).astype(float),
        f_y=lambda x, y: np.atleast_1d(y - x).astype(float),
        rho_f=1.0, X=Box([x_box[0]], [x_box[1]]), Y=Box([y_box[0]], [y_box[1]]),
        structure="smooth", F=F_val, name="toy",
        lower_lipschitz=0.5 * (1.0 + np.sqrt(5.0)), upper_lipschitz=1.0)


def toy_relaxed_solution(epsilon, gamma):
    """Closed-form minimizer of the toy upper objective under ``f - v_gamma <= epsilon``.

    With ``y = x + d`` the gap is ``d^2 gamma / (2 (1 + gamma))``, so
    ``|d| <= sqrt(2 epsilon (1 + gamma) / gamma)``; the upper objective then
    prefers ``d`` as large as allowed (up to 1).
    """
    d = min(1.0, np.sqrt(2.0 * epsilon * (1.0 + gamma) / gamma))
    return 1.5 - 0.5 * d, 1.5 + 0.5 * d
