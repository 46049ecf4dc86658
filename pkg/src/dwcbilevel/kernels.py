"""Hot loops: coordinate descent, QP solvers, projections, kernel matrices.

Every function here is compiled by numba when the numba backend is active
(see :mod:`dwcbilevel._jit`).  The numpy backend runs the same code as
plain Python, except for the few routines that have a vectorized numpy
twin (``sqdist``).
"""
import numpy as np

from ._jit import USE_NUMBA, jit

# penalty kinds for the penalized least-squares structure
PEN_L1 = 0
PEN_L2SQ = 1
PEN_GROUP = 2


@jit
def soft(u, t):
    if u > t:
        return u - t
    if u < -t:
        return u + t
    return 0.0


@jit
def clamp(u, lo, hi):
    if u < lo:
        return lo
    if u > hi:
        return hi
    return u


@jit
def pen_value(kind, grp, beta, gstart, gend):
    """Value of one hyperparameter's penalty function at ``beta``."""
    s = 0.0
    if kind == 0:
        for i in range(beta.shape[0]):
            s += abs(beta[i])
        return s
    if kind == 1:
        for i in range(beta.shape[0]):
            s += beta[i] * beta[i]
        return 0.5 * s
    for i in range(gstart[grp], gend[grp]):
        s += beta[i] * beta[i]
    return np.sqrt(s)


@jit
def _block_solve(beta, r, H, s, e, w1, wg, l2w, blo, bhi, tol, max_inner):
    """Exact-ish minimization over one group block; updates beta and r."""
    k = e - s
    gb = np.empty(k)
    for a in range(k):
        acc = r[s + a]
        for b in range(k):
            acc -= H[s + a, s + b] * beta[s + b]
        gb[a] = acc
    boxed = False
    for a in range(k):
        if blo[s + a] > -np.inf or bhi[s + a] < np.inf:
            boxed = True
    t = np.empty(k)
    zero = False
    if not boxed:
        nrm = 0.0
        for a in range(k):
            v = soft(-gb[a], w1)
            nrm += v * v
        if np.sqrt(nrm) <= wg:
            zero = True
    if zero:
        for a in range(k):
            t[a] = 0.0
    else:
        lip = 0.0
        for a in range(k):
            row = 0.0
            for b in range(k):
                row += abs(H[s + a, s + b])
            if row > lip:
                lip = row
        lip += l2w
        for a in range(k):
            t[a] = beta[s + a]
        yv = t.copy()
        tn = np.empty(k)
        mom = 1.0
        for it in range(max_inner):
            for a in range(k):
                g = gb[a] + l2w * yv[a]
                for b in range(k):
                    g += H[s + a, s + b] * yv[b]
                tn[a] = soft(yv[a] - g / lip, w1 / lip)
            nrm = 0.0
            for a in range(k):
                nrm += tn[a] * tn[a]
            nrm = np.sqrt(nrm)
            scale = 0.0
            if nrm > 0.0:
                scale = max(0.0, 1.0 - (wg / lip) / nrm)
            change = 0.0
            restart = 0.0
            for a in range(k):
                tn[a] = clamp(tn[a] * scale, blo[s + a], bhi[s + a])
                restart += (yv[a] - tn[a]) * (tn[a] - t[a])
                change = max(change, abs(tn[a] - t[a]))
            if restart > 0.0:
                mom = 1.0
            mom1 = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom * mom))
            for a in range(k):
                yv[a] = tn[a] + ((mom - 1.0) / mom1) * (tn[a] - t[a])
                t[a] = tn[a]
            mom = mom1
            if change <= tol:
                break
    delta = 0.0
    for a in range(k):
        d = t[a] - beta[s + a]
        if d != 0.0:
            for i in range(r.shape[0]):
                r[i] += H[i, s + a] * d
            beta[s + a] = t[a]
        delta = max(delta, abs(d) * np.sqrt(H[s + a, s + a] + l2w))
    return delta


@jit
def pls_cd(beta, x, H, h, dx, ex, xlo, xhi, blo, bhi, kind, grp, gstart, gend,
           c, update_x, tol, max_sweeps):
    """Coordinate descent for the penalized least-squares structure.

    Minimizes over ``beta`` (and over ``x`` when ``update_x``)::

        1/2 b'Hb + h'b + sum_j (dx_j/2 x_j^2 + ex_j x_j) + c sum_j x_j pen_j(b)

    subject to ``xlo <= x <= xhi`` and ``blo <= beta <= bhi``.  ``pen_j`` is
    ``||b||_1`` (kind 0), ``||b||^2/2`` (kind 1) or ``||b_G||_2`` (kind 2 over
    group ``grp[j]``).  Arrays ``beta`` and ``x`` are updated in place.
    Returns ``(sweeps, last_change)``.
    """
    p = beta.shape[0]
    nx = x.shape[0]
    ng = gstart.shape[0]
    r = H @ beta + h
    delta = np.inf
    gw = np.zeros(max(ng, 1))
    sweep = 0
    for sweep in range(max_sweeps):
        delta = 0.0
        if update_x:
            for j in range(nx):
                sj = pen_value(kind[j], grp[j], beta, gstart, gend)
                new = clamp(-(ex[j] + c * sj) / dx[j], xlo[j], xhi[j])
                delta = max(delta, abs(new - x[j]) * np.sqrt(dx[j]))
                x[j] = new
        w1 = 0.0
        l2w = 0.0
        for m in range(gw.shape[0]):
            gw[m] = 0.0
        for j in range(nx):
            if kind[j] == 0:
                w1 += c * x[j]
            elif kind[j] == 1:
                l2w += c * x[j]
            else:
                gw[grp[j]] += c * x[j]
        if ng == 0:
            for i in range(p):
                d = H[i, i] + l2w
                u = H[i, i] * beta[i] - r[i]
                t = clamp(soft(u, w1) / d, blo[i], bhi[i])
                diff = t - beta[i]
                if diff != 0.0:
                    for a in range(p):
                        r[a] += H[a, i] * diff
                    beta[i] = t
                delta = max(delta, abs(diff) * np.sqrt(d))
        else:
            for m in range(ng):
                dm = _block_solve(beta, r, H, gstart[m], gend[m], w1, gw[m], l2w,
                                  blo, bhi, 0.1 * tol, 10000)
                delta = max(delta, dm)
        if sweep % 50 == 49:
            r = H @ beta + h
        if delta <= tol:
            break
    return sweep + 1, delta


@jit
def _hp_slope(z, lo, hi, a, tau):
    s = 0.0
    for i in range(z.shape[0]):
        s += a[i] * clamp(z[i] - tau * a[i], lo[i], hi[i])
    return s


@jit
def project_box_hyperplane(z, lo, hi, a, b):
    """Euclidean projection onto ``{lo <= w <= hi, a'w = b}``.

    The multiplier ``tau`` of the hyperplane enters through
    ``w(tau) = clip(z - tau a)``; ``a'w(tau)`` is piecewise linear and
    nonincreasing, so bisection over its sorted breakpoints followed by
    linear interpolation on the bracketing segment is exact.
    Returns ``(w, tau, ok)``.
    """
    n = z.shape[0]
    bp = np.empty(2 * n)
    nb = 0
    for i in range(n):
        if a[i] != 0.0:
            if lo[i] > -np.inf:
                bp[nb] = (z[i] - lo[i]) / a[i]
                nb += 1
            if hi[i] < np.inf:
                bp[nb] = (z[i] - hi[i]) / a[i]
                nb += 1
    w = np.empty(n)
    if nb == 0:
        # no bounds on the hyperplane coordinates: plain affine projection
        aa = 0.0
        az = 0.0
        for i in range(n):
            aa += a[i] * a[i]
            az += a[i] * z[i]
        tau = (az - b) / aa if aa > 0.0 else 0.0
        for i in range(n):
            w[i] = clamp(z[i] - tau * a[i], lo[i], hi[i])
        return w, tau, aa > 0.0 or abs(b) <= 1e-12
    bps = np.sort(bp[:nb])
    s_first = _hp_slope(z, lo, hi, a, bps[0]) - b
    s_last = _hp_slope(z, lo, hi, a, bps[nb - 1]) - b
    scale = 1.0 + abs(b)
    for i in range(n):
        scale += abs(a[i]) * (abs(z[i]) + 1.0)
    ok = True
    if s_first < 0.0:
        tau = bps[0]
        ok = s_first >= -1e-12 * scale
    elif s_last > 0.0:
        tau = bps[nb - 1]
        ok = s_last <= 1e-12 * scale
    else:
        lo_k = 0
        hi_k = nb - 1
        s_lo = s_first
        s_hi = s_last
        while hi_k - lo_k > 1:
            mid = (lo_k + hi_k) // 2
            s_mid = _hp_slope(z, lo, hi, a, bps[mid]) - b
            if s_mid >= 0.0:
                lo_k = mid
                s_lo = s_mid
            else:
                hi_k = mid
                s_hi = s_mid
        if s_lo == s_hi:
            tau = bps[lo_k]
        else:
            tau = bps[lo_k] + s_lo * (bps[hi_k] - bps[lo_k]) / (s_lo - s_hi)
    for i in range(n):
        w[i] = clamp(z[i] - tau * a[i], lo[i], hi[i])
    return w, tau, ok


@jit
def project_box(z, lo, hi):
    w = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        w[i] = clamp(z[i], lo[i], hi[i])
    return w


@jit
def qp_apg(Q, q, w, center, lo, hi, a, b, has_hp, z, lip, tol, max_iter):
    """Accelerated projected gradient with adaptive restart.

    Minimizes ``1/2 z'Qz + q'z + w/2 ||z - center||^2`` over the box,
    intersected with ``a'z = b`` when ``has_hp``.  ``lip`` bounds the
    gradient Lipschitz constant.  Stops when ``lip * ||z+ - y|| <= tol``
    (gradient-mapping norm).  Returns ``(z, iterations)``.
    """
    n = z.shape[0]
    y = z.copy()
    zk = z.copy()
    mom = 1.0
    it = 0
    for it in range(max_iter):
        g = Q @ y + q
        v = np.empty(n)
        for i in range(n):
            v[i] = y[i] - (g[i] + w * (y[i] - center[i])) / lip
        if has_hp:
            zn, _, _ = project_box_hyperplane(v, lo, hi, a, b)
        else:
            zn = project_box(v, lo, hi)
        gm = 0.0
        restart = 0.0
        for i in range(n):
            gm += (zn[i] - y[i]) ** 2
            restart += (y[i] - zn[i]) * (zn[i] - zk[i])
        if restart > 0.0:
            mom = 1.0
        mom1 = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom * mom))
        for i in range(n):
            y[i] = zn[i] + ((mom - 1.0) / mom1) * (zn[i] - zk[i])
        zk = zn
        mom = mom1
        if lip * np.sqrt(gm) <= tol:
            break
    return zk, it + 1


@jit
def smo(Q, q, lab, C, alpha, eps, max_iter):
    """SMO with second-order working-set selection.

    Minimizes ``1/2 a'Qa + q'a`` over ``0 <= a <= C``, ``lab'a = 0`` with
    ``lab`` in {-1, +1}.  ``Q`` already carries the label signs.  ``alpha``
    must be feasible and is updated in place.  Returns the iteration count
    and the final maximal KKT violation.
    """
    n = alpha.shape[0]
    G = Q @ alpha + q
    tau = 1e-12
    it = 0
    gap = np.inf
    for it in range(max_iter):
        gmax = -np.inf
        i = -1
        for t in range(n):
            if lab[t] > 0:
                if alpha[t] < C and -G[t] >= gmax:
                    gmax = -G[t]
                    i = t
            else:
                if alpha[t] > 0 and G[t] >= gmax:
                    gmax = G[t]
                    i = t
        gmax2 = -np.inf
        j = -1
        best = np.inf
        for t in range(n):
            if lab[t] > 0:
                if alpha[t] > 0:
                    gd = gmax + G[t]
                    if G[t] >= gmax2:
                        gmax2 = G[t]
                    if gd > 0 and i >= 0:
                        quad = Q[i, i] + Q[t, t] - 2.0 * lab[i] * Q[i, t]
                        if quad <= 0:
                            quad = tau
                        od = -(gd * gd) / quad
                        if od <= best:
                            best = od
                            j = t
            else:
                if alpha[t] < C:
                    gd = gmax - G[t]
                    if -G[t] >= gmax2:
                        gmax2 = -G[t]
                    if gd > 0 and i >= 0:
                        quad = Q[i, i] + Q[t, t] + 2.0 * lab[i] * Q[i, t]
                        if quad <= 0:
                            quad = tau
                        od = -(gd * gd) / quad
                        if od <= best:
                            best = od
                            j = t
        gap = gmax + gmax2
        if gap < eps or j == -1:
            break
        ai = alpha[i]
        aj = alpha[j]
        if lab[i] != lab[j]:
            quad = Q[i, i] + Q[j, j] + 2.0 * Q[i, j]
            if quad <= 0:
                quad = tau
            d = (-G[i] - G[j]) / quad
            diff = ai - aj
            alpha[i] = ai + d
            alpha[j] = aj + d
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            if quad <= 0:
                quad = tau
            d = (G[i] - G[j]) / quad
            tot = ai + aj
            alpha[i] = ai - d
            alpha[j] = aj + d
            if tot > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = tot - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = tot
            if tot > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = tot - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = tot
        di = alpha[i] - ai
        dj = alpha[j] - aj
        for t in range(n):
            G[t] += Q[t, i] * di + Q[t, j] * dj
    return it + 1, gap


@jit
def _sqdist_loop(A, B):
    na = A.shape[0]
    nb = B.shape[0]
    D = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            s = 0.0
            for k in range(A.shape[1]):
                diff = A[i, k] - B[j, k]
                s += diff * diff
            D[i, j] = s
    return D


def _sqdist_numpy(A, B):
    D = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(D, 0.0)


def sqdist(A, B):
    """Matrix of squared Euclidean distances between rows of A and B."""
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if USE_NUMBA:
        return _sqdist_loop(A, B)
    return _sqdist_numpy(A, B)
