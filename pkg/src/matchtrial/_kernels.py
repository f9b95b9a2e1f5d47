"""Compiled inner loops: IRLS for logistic regression and greedy caliper matching."""

import numpy as np
from numba import njit

# IRLS status codes
CONVERGED = 0
MAX_ITER = 1
SEPARATED = 2
SINGULAR = 3

ETA_LIMIT = 30.0


@njit(cache=True)
def _log1pexp(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True)
def _loglik(X, y, beta, eta, p):
    n, k = X.shape
    ll = 0.0
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += X[i, j] * beta[j]
        eta[i] = s
        if s >= 0:
            e = np.exp(-s)
            p[i] = 1.0 / (1.0 + e)
        else:
            e = np.exp(s)
            p[i] = e / (1.0 + e)
        ll += y[i] * s - _log1pexp(s)
    return ll


@njit(cache=True)
def _cholesky_solve(H, g, L, out):
    """Solve H x = g for symmetric positive definite H; False if not SPD."""
    k = H.shape[0]
    scale = 0.0
    for i in range(k):
        if H[i, i] > scale:
            scale = H[i, i]
    tiny = 1e-13 * scale if scale > 0 else 1e-300
    for i in range(k):
        for j in range(i + 1):
            s = H[i, j]
            for m in range(j):
                s -= L[i, m] * L[j, m]
            if i == j:
                if s <= tiny:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    z = np.empty(k)
    for i in range(k):
        s = g[i]
        for m in range(i):
            s -= L[i, m] * z[m]
        z[i] = s / L[i, i]
    for i in range(k - 1, -1, -1):
        s = z[i]
        for m in range(i + 1, k):
            s -= L[m, i] * out[m]
        out[i] = s / L[i, i]
    return True


@njit(cache=True)
def _information(X, p, H):
    n, k = X.shape
    for a in range(k):
        for b in range(a + 1):
            H[a, b] = 0.0
    for i in range(n):
        w = p[i] * (1.0 - p[i])
        for a in range(k):
            xa = X[i, a] * w
            for b in range(a + 1):
                H[a, b] += xa * X[i, b]
    for a in range(k):
        for b in range(a + 1, k):
            H[a, b] = H[b, a]


@njit(cache=True)
def irls_logistic(X, y, tol, max_iter, eta_limit):
    """Newton-Raphson / IRLS with step halving.

    Stops with SEPARATED once any |eta| exceeds ``eta_limit``; that is only a
    suspicion, the caller confirms it.  Returns (beta, se, status, iterations, loglik_trace, max_abs_score).
    """
    n, k = X.shape
    beta = np.zeros(k)
    ybar = y.mean()
    # intercept start only when the first column is constant 1
    const_first = True
    for i in range(n):
        if X[i, 0] != 1.0:
            const_first = False
            break
    if const_first:
        beta[0] = np.log(ybar / (1.0 - ybar))

    eta = np.empty(n)
    p = np.empty(n)
    grad = np.empty(k)
    H = np.empty((k, k))
    L = np.zeros((k, k))
    step = np.empty(k)
    trial = np.empty(k)
    trace = np.empty(max_iter + 1)

    ll = _loglik(X, y, beta, eta, p)
    trace[0] = ll
    status = MAX_ITER
    it = 0
    gmax = 0.0
    while True:
        for j in range(k):
            s = 0.0
            for i in range(n):
                s += X[i, j] * (y[i] - p[i])
            grad[j] = s
        gmax = 0.0
        for j in range(k):
            if abs(grad[j]) > gmax:
                gmax = abs(grad[j])
        if gmax <= tol:
            status = CONVERGED
            break
        if it >= max_iter:
            status = MAX_ITER
            break
        _information(X, p, H)
        if not _cholesky_solve(H, grad, L, step):
            status = SINGULAR
            break
        t = 1.0
        accepted = False
        for _ in range(40):
            for j in range(k):
                trial[j] = beta[j] + t * step[j]
            ll_new = _loglik(X, y, trial, eta, p)
            if ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # restore fitted values at the last accepted beta
            _loglik(X, y, beta, eta, p)
            status = MAX_ITER
            break
        for j in range(k):
            beta[j] = trial[j]
        ll = ll_new
        it += 1
        trace[it] = ll
        emax = 0.0
        for i in range(n):
            if abs(eta[i]) > emax:
                emax = abs(eta[i])
        if emax > eta_limit:
            status = SEPARATED
            break

    se = np.full(k, np.nan)
    if status == CONVERGED:
        _information(X, p, H)
        # invert column by column
        e = np.zeros(k)
        col = np.empty(k)
        for j in range(k):
            e[:] = 0.0
            e[j] = 1.0
            if not _cholesky_solve(H, e, L, col):
                status = SINGULAR
                break
            se[j] = np.sqrt(col[j])
    return beta, se, status, it, trace[: it + 1].copy(), gmax


@njit(cache=True)
def greedy_match(t_scores, t_order, c_scores, c_ids, c_asc, c_desc, available, M, caliper):
    """Greedy 1:M nearest-neighbour matching without replacement.

    ``t_order`` is the treated processing order; ``c_asc`` sorts controls by
    (score asc, id asc) and ``c_desc`` by (score desc, id asc).  ``available``
    marks usable controls and is updated in place.  Returns an (n_t, M) array
    of control positions, rows of -1 for unmatched treated patients.
    """
    n_t = t_scores.shape[0]
    n_c = c_scores.shape[0]
    out = np.full((n_t, M), -1, dtype=np.int64)
    picked = np.empty(M, dtype=np.int64)
    for r in range(n_t):
        ti = t_order[r]
        s = t_scores[ti]
        # right side: controls with score >= s, ascending
        lo, hi = 0, n_c
        while lo < hi:
            mid = (lo + hi) // 2
            if c_scores[c_asc[mid]] < s:
                lo = mid + 1
            else:
                hi = mid
        ri = lo
        # left side: controls with score < s, in c_desc after the first n_c - lo entries
        li = n_c - lo
        count = 0
        while count < M:
            while ri < n_c and not available[c_asc[ri]]:
                ri += 1
            while li < n_c and not available[c_desc[li]]:
                li += 1
            have_r = False
            have_l = False
            dr = 0.0
            dl = 0.0
            if ri < n_c:
                dr = c_scores[c_asc[ri]] - s
                have_r = dr <= caliper
            if li < n_c:
                dl = s - c_scores[c_desc[li]]
                have_l = dl <= caliper
            if not have_r and not have_l:
                break
            take_right = False
            if have_r and not have_l:
                take_right = True
            elif have_r and have_l:
                if dr < dl:
                    take_right = True
                elif dr == dl:
                    take_right = c_ids[c_asc[ri]] < c_ids[c_desc[li]]
            if take_right:
                picked[count] = c_asc[ri]
                ri += 1
            else:
                picked[count] = c_desc[li]
                li += 1
            count += 1
        if count == M:
            for m in range(M):
                out[ti, m] = picked[m]
                available[picked[m]] = False
    return out
