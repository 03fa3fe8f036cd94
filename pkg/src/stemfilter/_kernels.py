"""Compiled numerical kernels.

Every kernel runs sequentially with a fixed accumulation order, so all
results are bitwise reproducible for identical inputs regardless of
process, thread, or worker configuration.  Column-major blocks let the
same code serve both in-memory fits (one block spanning all columns)
and out-of-core fits (many blocks streamed from disk): the coordinate
update sequence, and therefore every floating-point operation, is
identical in the two modes.

Block convention: ``xt`` holds design-matrix columns as contiguous rows,
``xt[jj, i] = X[i, j0 + jj]``, where ``j0`` is the block's first global
column index.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def col_correlations(xt, y, out, j0):
    # out[j0 + jj] = (1/n) <X_j, y>
    n = y.shape[0]
    for jj in range(xt.shape[0]):
        row = xt[jj]
        s = 0.0
        for i in range(n):
            s += row[i] * y[i]
        out[j0 + jj] = s / n


@numba.njit(cache=True)
def col_sq_norms(xt, out, j0):
    # out[j0 + jj] = (1/n) <X_j, X_j>
    for jj in range(xt.shape[0]):
        row = xt[jj]
        n = row.shape[0]
        s = 0.0
        for i in range(n):
            s += row[i] * row[i]
        out[j0 + jj] = s / n


@numba.njit(cache=True)
def subtract_contribution(xt, w, rho, j0):
    # rho -= X w, restricted to this block's columns
    for jj in range(xt.shape[0]):
        wj = w[j0 + jj]
        if wj != 0.0:
            row = xt[jj]
            for i in range(rho.shape[0]):
                rho[i] -= wj * row[i]


@numba.njit(cache=True)
def accumulate_prediction(xt, w, out, j0):
    # out += X w, restricted to this block's columns
    for jj in range(xt.shape[0]):
        wj = w[j0 + jj]
        if wj != 0.0:
            row = xt[jj]
            for i in range(out.shape[0]):
                out[i] += wj * row[i]


@numba.njit(cache=True)
def sweep(xt, w, rho, cn, j0, lam_r, lam_l2, active_only):
    """One cyclical pass over this block's coordinates.

    Each coordinate update is the exact one-dimensional minimizer for
    unnormalized columns,

        u_j = <X_j, rho>/n + c_j w_j
        w_j <- S(u_j, lam*r) / (c_j + lam*(1-r)),

    with the full residual rho = y - X w maintained incrementally.  For
    unit-norm columns (c_j = 1) this reduces to the textbook
    soft-threshold-and-shrink update.  Returns the largest absolute
    coordinate change of the pass.
    """
    n = rho.shape[0]
    max_change = 0.0
    for jj in range(xt.shape[0]):
        j = j0 + jj
        wj = w[j]
        cj = cn[j]
        if cj == 0.0:
            # zero-norm column: pinned at 0; no residual correction needed
            if wj != 0.0:
                w[j] = 0.0
                if abs(wj) > max_change:
                    max_change = abs(wj)
            continue
        if active_only and wj == 0.0:
            continue
        row = xt[jj]
        s = 0.0
        for i in range(n):
            s += row[i] * rho[i]
        u = s / n + cj * wj
        if u > lam_r:
            wn = (u - lam_r) / (cj + lam_l2)
        elif u < -lam_r:
            wn = (u + lam_r) / (cj + lam_l2)
        else:
            wn = 0.0
        d = wn - wj
        if d != 0.0:
            for i in range(n):
                rho[i] -= d * row[i]
            w[j] = wn
            if abs(d) > max_change:
                max_change = abs(d)
    return max_change


@numba.njit(cache=True)
def kkt_worst(xt, w, rho, j0, lam_r, lam_l2):
    """Largest first-order optimality violation over this block.

    With g_j = -<X_j, rho>/n + lam*(1-r)*w_j, the violation is
    |g_j + lam*r*sign(w_j)| at nonzero coordinates and
    max(0, |g_j| - lam*r) at zero coordinates.
    """
    n = rho.shape[0]
    worst = 0.0
    for jj in range(xt.shape[0]):
        j = j0 + jj
        row = xt[jj]
        s = 0.0
        for i in range(n):
            s += row[i] * rho[i]
        g = -s / n + lam_l2 * w[j]
        if w[j] > 0.0:
            v = abs(g + lam_r)
        elif w[j] < 0.0:
            v = abs(g - lam_r)
        else:
            v = abs(g) - lam_r
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


@numba.njit(cache=True)
def contract_frames(frames, weights, out):
    # out[m] = sum_k frames[m, k] * weights[k], accumulated in float64
    for m in range(frames.shape[0]):
        row = frames[m]
        s = 0.0
        for k in range(row.shape[0]):
            s += row[k] * weights[k]
        out[m] = s


@numba.njit(cache=True)
def sum_sq(a):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * a[i]
    return s


@numba.njit(cache=True)
def build_frames(base, site_gain, site_patterns, tex_gain, tex_patterns,
                 noise, out):
    """Fill one block of synthetic CBED frames.

    out[i, k] = max(0, base[k] + sum_c site_gain[i, c] * site_patterns[c, k]
                       + sum_t tex_gain[i, t] * tex_patterns[t, k]
                       + noise[i, k])
    accumulated in float64 and stored as float32.
    """
    m, p = out.shape
    n_cls = site_gain.shape[1]
    n_tex = tex_gain.shape[1]
    for i in range(m):
        for k in range(p):
            acc = base[k]
            for c in range(n_cls):
                acc += site_gain[i, c] * site_patterns[c, k]
            for t in range(n_tex):
                acc += tex_gain[i, t] * tex_patterns[t, k]
            acc += noise[i, k]
            if acc < 0.0:
                acc = 0.0
            out[i, k] = np.float32(acc)
