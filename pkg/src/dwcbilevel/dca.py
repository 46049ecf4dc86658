"""Inexact proximal DC algorithm for constrained DC programs.

Solves ``min g0 - h0  s.t.  g1 - h1 <= 0`` over a convex set by
linearizing ``h0`` and ``h1``, penalizing the linearized constraint with an
adaptive exact penalty, and solving each strongly convex subproblem
inexactly with a certified stationarity residual.  Each iteration records
the merit (Lyapunov) value before and after the step so its sufficient
decrease can be checked.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .inner import (CompositeObjective, MaxTerm, SmoothTerm, SubdiffPieces, _golden_min,
                    residual_at_zeta, solve_composite)
from .problem import ConvexSet

log = logging.getLogger(__name__)


@dataclass
class ConvexFn:
    """Convex function oracle; ``lipschitz`` is the gradient Lipschitz
    constant when the function is smooth (used by the generic subproblem)."""

    value: Callable
    subgrad: Callable
    lipschitz: Optional[float] = None
    pieces: Optional[Callable] = None


@dataclass
class DcProgram:
    """``min g0 - h0 s.t. g1 - h1 <= 0, z in sigma``.

    ``subproblem`` optionally builds the structured subproblem objective:
    ``subproblem(z, lin, beta, alpha) -> CompositeObjective``.
    """

    g0: ConvexFn
    h0: ConvexFn
    g1: ConvexFn
    h1: ConvexFn
    sigma: ConvexSet
    subproblem: Optional[Callable] = None
    g0_strong_convexity: float = 0.0


@dataclass
class DcaParams:
    beta0: float = 1.0
    delta_beta: float = 1.0
    c_beta: float = 1.0
    alpha: float = 0.01
    tol: float = 1e-3
    max_iters: int = 200
    r_min: float = 1e-9
    init_slack: Optional[float] = None
    stop: str = "absolute"
    decrease_slack: float = 1e-8
    strict: bool = False

    def __post_init__(self):
        for name in ("beta0", "delta_beta", "c_beta", "alpha", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.r_min < 0:
            raise ValueError("r_min must be nonnegative")
        if self.stop not in ("absolute", "scaled"):
            raise ValueError("stop must be 'absolute' or 'scaled'")


@dataclass
class Linearization:
    """Subgradients of ``h0, h1`` at a point with cached conjugate values."""

    z: np.ndarray
    xi0: np.ndarray
    xi1: np.ndarray
    h0: float
    h1: float

    @property
    def conj0(self):
        return float(self.xi0 @ self.z) - self.h0

    @property
    def conj1(self):
        return float(self.xi1 @ self.z) - self.h1


def linearize(prog: DcProgram, z) -> Linearization:
    z = np.asarray(z, dtype=float)
    return Linearization(z, np.asarray(prog.h0.subgrad(z), float),
                         np.asarray(prog.h1.subgrad(z), float),
                         float(prog.h0.value(z)), float(prog.h1.value(z)))


@dataclass
class DcIterationState:
    k: int
    z: np.ndarray
    z_prev: np.ndarray
    lin: Linearization
    lin_prev: Linearization
    beta: float
    t: float = 0.0
    merit: float = np.nan
    info: dict = field(default_factory=dict)


@dataclass
class KKTReport:
    stationarity: float
    constraint: float
    multiplier: float
    complementarity: float
    abnormal: float


@dataclass
class SolveTrace:
    records: list
    states: list
    reason: str
    kkt: Optional[KKTReport] = None
    wall_time: float = 0.0

    @property
    def final(self):
        return self.states[-1]

    def to_jsonl(self, path_or_file):
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        text = "\n".join(lines) + ("\n" if lines else "")
        if hasattr(path_or_file, "write"):
            path_or_file.write(text)
        else:
            with open(path_or_file, "w") as fh:
                fh.write(text)


class MeritIncreaseError(RuntimeError):
    pass


def merit_value(prog: DcProgram, beta, z, z0, lin: Linearization, alpha):
    """``E_beta(z, z0, xi) = g0 - <xi0,z> + h0*(xi0) + beta max(g1 - <xi1,z> + h1*(xi1), 0)
    + alpha/4 ||z - z0||^2`` (``+inf`` outside the set)."""
    z = np.asarray(z, dtype=float)
    if not prog.sigma.contains(z):
        return np.inf
    val = prog.g0.value(z) - lin.xi0 @ z + lin.conj0
    val += beta * max(prog.g1.value(z) - lin.xi1 @ z + lin.conj1, 0.0)
    return float(val + 0.25 * alpha * np.sum((z - z0) ** 2))


def generic_subproblem(prog: DcProgram, z, lin: Linearization, beta, alpha):
    """Subproblem objective for smooth ``g0`` and ``g1``."""
    g0, g1 = prog.g0, prog.g1
    if g0.lipschitz is None or g1.lipschitz is None:
        raise NotImplementedError("generic subproblem needs smooth g0 and g1")
    zk = np.asarray(z, float)
    xi0 = lin.xi0

    def val(w):
        return g0.value(w) - xi0 @ w + 0.5 * alpha * np.sum((w - zk) ** 2)

    def grad(w):
        return np.asarray(g0.subgrad(w), float) - xi0 + alpha * (w - zk)

    smooth = SmoothTerm(val, grad, g0.lipschitz + alpha)
    G_smooth = SmoothTerm(g1.value, lambda w: np.asarray(g1.subgrad(w), float), g1.lipschitz)
    n = zk.size
    if g1.pieces is not None:
        pieces = g1.pieces
    else:
        def pieces(w):
            return SubdiffPieces(np.asarray(g1.subgrad(w), float), np.zeros(n), np.zeros(n))
    mt = MaxTerm(beta, g1.value, pieces, lin.xi1, lin.conj1 * -1.0, G_smooth=G_smooth)
    return CompositeObjective(smooth, None, mt, alpha + prog.g0_strong_convexity, prog.sigma)


def build_subproblem(prog, z, lin, beta, alpha):
    if prog.subproblem is not None:
        return prog.subproblem(z, lin, beta, alpha)
    return generic_subproblem(prog, z, lin, beta, alpha)


def _target(params: DcaParams, k, dz_prev):
    if k == 0:
        return params.init_slack if params.init_slack is not None else params.tol
    return max(params.r_min, np.sqrt(2) / 2 * params.alpha * dz_prev)


def ipdca_step(prog: DcProgram, params: DcaParams, state: DcIterationState,
               scale_fn=None) -> DcIterationState:
    """One iteration: subproblem, ``t``, penalty update, merit telemetry."""
    z, lin, beta = state.z, state.lin, state.beta
    alpha = params.alpha
    merit_before = merit_value(prog, beta, z, state.z_prev, state.lin_prev, alpha)
    obj = build_subproblem(prog, z, lin, beta, alpha)
    target = _target(params, state.k, np.linalg.norm(z - state.z_prev))
    cert = solve_composite(obj, z, target)
    if params.strict and not cert.converged:
        raise RuntimeError(f"subproblem residual {cert.residual:.2e} above {target:.2e}")
    zn = cert.z
    dz = float(np.linalg.norm(zn - z))
    t = max(prog.g1.value(zn) - lin.h1 - lin.xi1 @ (zn - z), 0.0)
    inv_t = np.inf if t == 0 else 1.0 / t
    beta_new = beta + params.delta_beta if (dz > 0 and max(beta, inv_t) < params.c_beta / dz) else beta
    merit_after = merit_value(prog, beta, zn, z, lin, alpha)
    lin_new = linearize(prog, zn)
    decrease = merit_after + 0.25 * alpha * dz ** 2 - merit_before
    slack = params.decrease_slack * (1 + abs(merit_before))
    info = {
        "residual": cert.residual, "target": target, "converged": cert.converged,
        "merit_before": merit_before, "merit_after": merit_after,
        "decrease_gap": decrease, "decrease_ok": bool(decrease <= slack), "dz": dz,
        "zeta": cert.zeta, "f1": float(prog.g1.value(zn) - lin_new.h1),
        "inner_iters": cert.iterations,
    }
    return DcIterationState(state.k + 1, zn, z, lin_new, lin, beta_new, t, merit_before, info)


def _abnormal_residual(prog, z, lin):
    v = np.asarray(prog.g1.subgrad(z), float) - lin.xi1
    return prog.sigma.normal_cone_residual(z, v)


def default_lambda_grid():
    return np.concatenate([[0.0], np.logspace(-4, 4, 64)])


def kkt_residual(prog: DcProgram, z, lambda_grid=None, lin=None) -> KKTReport:
    """KKT residual ``dist(0, dg0 - dh0 + lam (dg1 - dh1) + N(z))`` minimized over ``lam``.

    Uses the structured subdifferential from the program's subproblem
    builder when available (exact at kinks), otherwise the oracle
    subgradients.  Complementarity ``|lam f1(z)|`` is added when the
    constraint is strictly satisfied.
    """
    z = np.asarray(z, float)
    lin = lin or linearize(prog, z)
    f1 = float(prog.g1.value(z) - lin.h1)
    tiny = 1e-12

    def stat(lam):
        if prog.subproblem is not None:
            obj = prog.subproblem(z, lin, max(lam, tiny), tiny)
            r = residual_at_zeta(obj, z, 1.0 if lam > 0 else 0.0)
        else:
            v = (np.asarray(prog.g0.subgrad(z), float) - lin.xi0
                 + lam * (np.asarray(prog.g1.subgrad(z), float) - lin.xi1))
            r = prog.sigma.normal_cone_residual(z, v)
        if f1 < 0:
            r += abs(lam * f1)
        return r

    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, float)
    vals = np.array([stat(l) for l in grid])
    i = int(np.argmin(vals))
    best_l, best_r = grid[i], vals[i]
    if lambda_grid is None:
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, grid.size - 1)]
        # stat is convex in lam, so a golden-section search finishes the job
        lam, r = _golden_min(stat, lo, hi, tol=1e-14 * (1 + hi))
        if r < best_r:
            best_l, best_r = float(lam), float(r)
    ab = _abnormal_residual(prog, z, lin)
    return KKTReport(float(best_r), f1, float(best_l), abs(best_l * f1) if f1 < 0 else 0.0, float(ab))


def _stop(params, dz, t, scale):
    if params.stop == "scaled":
        return max(t / max(abs(scale), 1e-300), dz) <= params.tol
    return max(dz, t) < params.tol


def run_ipdca(prog: DcProgram, params: DcaParams, z0, scale_fn=None, compute_kkt=True,
              on_iteration=None) -> SolveTrace:
    """Run the inexact proximal DCA from ``z0``.

    ``scale_fn(z)`` supplies the denominator of the scaled stopping test.
    Merit decrease is checked every iteration; with ``params.strict`` a
    violation beyond the slack raises :class:`MeritIncreaseError`.
    """
    start = time.perf_counter()
    z0 = np.asarray(z0, float)
    if not prog.sigma.contains(z0):
        raise ValueError("starting point outside the feasible set")
    lin = linearize(prog, z0)
    state = DcIterationState(0, z0, z0, lin, lin, params.beta0)
    states = [state]
    records = []
    reason = "max-iters"
    for _ in range(params.max_iters):
        state = ipdca_step(prog, params, state)
        info = state.info
        if not np.all(np.isfinite(state.z)):
            reason = "non-finite"
            break
        rec = {"k": state.k, "dz": info["dz"], "t": state.t, "beta": state.beta,
               "E": info["merit_after"], "E_prev": info["merit_before"],
               "residual": info["residual"], "target": info["target"],
               "decrease_ok": info["decrease_ok"]}
        records.append(rec)
        states.append(state)
        if on_iteration is not None:
            on_iteration(state)
        if not info["decrease_ok"] and params.strict:
            raise MeritIncreaseError(f"merit increased by {info['decrease_gap']:.3e} at k={state.k}")
        scale = scale_fn(state.z) if scale_fn is not None else 1.0
        if _stop(params, info["dz"], state.t, scale):
            reason = "tol-met"
            break
    kkt = kkt_residual(prog, state.z, lin=state.lin) if compute_kkt else None
    return SolveTrace(records, states, reason, kkt, time.perf_counter() - start)
