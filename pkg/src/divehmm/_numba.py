"""Compiled inner loops for the forward filter and trajectory simulation."""

import math

import numpy as np
from numba import njit

TINY = 1e-300
# rescale the running likelihood product before it can underflow
_RESCALE = 1e-150
_LOG2 = math.log(2.0)


@njit(cache=True)
def softmax_into(logits, out):
    K = logits.size
    mx = logits[0]
    for l in range(1, K):
        if logits[l] > mx:
            mx = logits[l]
    tot = 0.0
    for l in range(K):
        out[l] = math.exp(logits[l] - mx)
        tot += out[l]
    floored = False
    for l in range(K):
        out[l] /= tot
        if out[l] < TINY:
            out[l] = TINY
            floored = True
    if floored:
        tot = 0.0
        for l in range(K):
            tot += out[l]
        for l in range(K):
            out[l] /= tot


@njit(cache=True)
def forward(G, E, alpha0):
    """Scaled forward pass; returns log-likelihood and the final filter."""
    n, K = E.shape
    alpha = alpha0.copy()
    nxt = np.empty(K)
    ll = 0.0
    acc = 1.0
    for t in range(n):
        c = 0.0
        for l in range(K):
            s = 0.0
            for m in range(K):
                s += alpha[m] * G[t, m, l]
            a = s * E[t, l]
            nxt[l] = a
            c += a
        if not c > 0.0:
            return -np.inf, alpha
        for l in range(K):
            alpha[l] = nxt[l] / c
        acc *= c
        if acc < _RESCALE:
            ll += math.log(acc)
            acc = 1.0
    return ll + math.log(acc), alpha


@njit(cache=True)
def forward_filters(G, E, alpha0, out):
    """Forward pass storing the normalized filter after every step in ``out``."""
    n, K = E.shape
    alpha = alpha0.copy()
    nxt = np.empty(K)
    ll = 0.0
    for t in range(n):
        c = 0.0
        for l in range(K):
            s = 0.0
            for m in range(K):
                s += alpha[m] * G[t, m, l]
            a = s * E[t, l]
            nxt[l] = a
            c += a
        if not c > 0.0:
            return -np.inf
        for l in range(K):
            alpha[l] = nxt[l] / c
            out[t, l] = alpha[l]
        ll += math.log(c)
    return ll


@njit(cache=True)
def forward_rows5(g0, g1, g2, g3, g4, E, alpha0):
    """Forward pass for five movement types with transition rows stored per from-state.

    ``gk[t]`` is the row out of type ``k`` at term ``t`` and ``E[l, t]`` the
    depth-transition probability under type ``l``. The unnormalized forward
    vector only shrinks, so instead of normalizing every step it is rescaled
    by an exact power of two whenever its total drops below 1e-150.
    """
    n = E.shape[1]
    a0, a1, a2, a3, a4 = alpha0[0], alpha0[1], alpha0[2], alpha0[3], alpha0[4]
    shifts = 0
    for t in range(n):
        p0 = (a0 * g0[t, 0] + a1 * g1[t, 0] + a2 * g2[t, 0] + a3 * g3[t, 0] + a4 * g4[t, 0]) * E[0, t]
        p1 = (a0 * g0[t, 1] + a1 * g1[t, 1] + a2 * g2[t, 1] + a3 * g3[t, 1] + a4 * g4[t, 1]) * E[1, t]
        p2 = (a0 * g0[t, 2] + a1 * g1[t, 2] + a2 * g2[t, 2] + a3 * g3[t, 2] + a4 * g4[t, 2]) * E[2, t]
        p3 = (a0 * g0[t, 3] + a1 * g1[t, 3] + a2 * g2[t, 3] + a3 * g3[t, 3] + a4 * g4[t, 3]) * E[3, t]
        p4 = (a0 * g0[t, 4] + a1 * g1[t, 4] + a2 * g2[t, 4] + a3 * g3[t, 4] + a4 * g4[t, 4]) * E[4, t]
        c = p0 + p1 + p2 + p3 + p4
        if c < _RESCALE:
            if not c > 0.0:
                return -np.inf
            # scale the total back into [0.5, 1) by an exact power of two
            e = math.frexp(c)[1]
            f = math.ldexp(1.0, -e)
            p0 *= f
            p1 *= f
            p2 *= f
            p3 *= f
            p4 *= f
            shifts += e
        a0, a1, a2, a3, a4 = p0, p1, p2, p3, p4
    return math.log(a0 + a1 + a2 + a3 + a4) + shifts * _LOG2


@njit(cache=True)
def softmax_exp_rows(expz, out):
    """Rows of ``out`` from exponentiated non-reference logits (reference contributes 1), floored at TINY."""
    n, km1 = expz.shape
    for t in range(n):
        tot = 1.0
        for l in range(km1):
            tot += expz[t, l]
        inv = 1.0 / tot
        floored = False
        for l in range(km1 + 1):
            v = (expz[t, l] if l < km1 else 1.0) * inv
            if v < TINY:
                v = TINY
                floored = True
            out[t, l] = v
        if floored:
            tot = 0.0
            for l in range(km1 + 1):
                tot += out[t, l]
            for l in range(km1 + 1):
                out[t, l] /= tot


@njit(cache=True)
def uniformized_series(diag, upper, lower, weights, out):
    """``out = sum_n weights[n] * U**n`` for tridiagonal ``U``.

    ``upper[i] = U[i, i+1]`` and ``lower[i] = U[i+1, i]``.
    """
    m = diag.size
    V = np.eye(m)
    W = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            out[i, j] = weights[0] * V[i, j]
    for n in range(1, weights.size):
        # W = V @ U using the three nonzero diagonals of U
        for i in range(m):
            for j in range(m):
                s = V[i, j] * diag[j]
                if j > 0:
                    s += V[i, j - 1] * upper[j - 1]
                if j < m - 1:
                    s += V[i, j + 1] * lower[j]
                W[i, j] = s
        w = weights[n]
        for i in range(m):
            for j in range(m):
                V[i, j] = W[i, j]
                out[i, j] += w * W[i, j]


@njit(cache=True)
def transition_tensor(X, B, out):
    n, p = X.shape
    K = B.shape[0]
    logits = np.empty(K)
    row = np.empty(K)
    for t in range(n):
        for k in range(K):
            for l in range(K):
                z = 0.0
                for r in range(p):
                    z += X[t, r] * B[k, r, l]
                logits[l] = z
            softmax_into(logits, row)
            for l in range(K):
                out[t, k, l] = row[l]


@njit(cache=True)
def _draw(cdf, u):
    # first index with cdf > u
    n = cdf.size
    for i in range(n - 1):
        if u < cdf[i]:
            return i
    return n - 1


@njit(cache=True)
def simulate_path(kernel_cdf, B, mids, history, state0, celestial, uniforms,
                  deep_threshold, bins_out, states_out, stop_shallow=-1.0):
    """Run the model forward ``len(bins_out)`` steps from a 12-bin history.

    ``history`` holds 0-based bins, ``celestial`` one label code per step,
    ``uniforms`` shape ``(steps, 2)``. Step ``t`` draws the next bin from the
    current state's kernel, then the next state from the covariates at the new
    bin. With ``stop_shallow >= 0`` the run ends once a deep, then shallow
    (below ``stop_shallow``), then deep pattern is complete. Returns the
    number of steps written.
    """
    W = history.size
    K = B.shape[0]
    p = B.shape[1]
    n = bins_out.size
    window = np.empty(W + 1, dtype=np.int64)
    for i in range(W):
        window[i + 1] = history[i]
    x = np.empty(p)
    logits = np.empty(K)
    row = np.empty(K)
    cdf = np.empty(K)
    s = state0
    b = history[W - 1]
    phase = 0
    for t in range(n):
        b = _draw(kernel_cdf[s, b], uniforms[t, 0])
        for i in range(W):
            window[i] = window[i + 1]
        window[W] = b
        c1 = 0.0
        c2 = 0.0
        for i in range(1, W + 1):
            if mids[window[i]] >= deep_threshold:
                c1 += 1.0
            c2 += abs(mids[window[i]] - mids[window[i - 1]])
        z2 = (c2 - 1650.0) / 500.0
        cel = celestial[t]
        x[0] = 1.0
        x[1] = 1.0 if cel == 0 else 0.0
        x[2] = 1.0 if cel == 2 else 0.0
        x[3] = c1
        x[4] = c1 * c1
        x[5] = c1 * c1 * c1
        x[6] = z2
        x[7] = z2 * z2
        x[8] = z2 * z2 * z2
        for l in range(K):
            z = 0.0
            for r in range(p):
                z += x[r] * B[s, r, l]
            logits[l] = z
        softmax_into(logits, row)
        acc = 0.0
        for l in range(K):
            acc += row[l]
            cdf[l] = acc
        s = _draw(cdf, uniforms[t, 1])
        bins_out[t] = b
        states_out[t] = s
        if stop_shallow >= 0.0:
            m = mids[b]
            if phase == 0:
                if m > deep_threshold:
                    phase = 1
            elif phase == 1:
                if m < stop_shallow:
                    phase = 2
            elif m > deep_threshold:
                return t + 1
    return n


@njit(cache=True)
def _lower_inverse(L):
    d = L.shape[0]
    T = np.zeros((d, d))
    for j in range(d):
        T[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, d):
            s = 0.0
            for m in range(j, i):
                s += L[i, m] * T[m, j]
            T[i, j] = -s / L[i, i]
    return T


@njit(cache=True)
def normal_posterior_draws(sum_beta, n, cov_inv, prior_prec, z, out):
    """Conjugate mean draws: precision ``n cov_inv + prior_prec I``, one per leading index.

    ``z`` holds standard normals of the same shape as ``out``.
    """
    K, d = out.shape
    for k in range(K):
        P = n * cov_inv[k].copy()
        for i in range(d):
            P[i, i] += prior_prec
        L = np.linalg.cholesky(P)
        Li = _lower_inverse(L)
        b = cov_inv[k] @ sum_beta[k]
        # P^{-1} b = L^{-T} L^{-1} b, and L^{-T} z has covariance P^{-1}
        m = Li.T @ (Li @ b)
        out[k] = m + Li.T @ z[k]


@njit(cache=True)
def inv_wishart_draws(scale, chisq, normals, cov_out, prec_out):
    """Bartlett draws of ``W ~ Wishart(scale^{-1}, dof)``; writes ``W^{-1}`` and ``W``.

    ``chisq[k, i]`` must be chi-square with ``dof - i`` degrees of freedom and
    ``normals[k]`` hold ``d (d - 1) / 2`` standard normals for the strict
    lower triangle, filled row by row.
    """
    K, d = chisq.shape
    for k in range(K):
        Ls = np.linalg.cholesky(scale[k])
        Si = _lower_inverse(Ls)
        # scale^{-1} = Si^T Si; its lower Cholesky factor via the reversed-index trick
        C = np.linalg.cholesky(Si.T @ Si)
        A = np.zeros((d, d))
        c = 0
        for i in range(d):
            A[i, i] = math.sqrt(chisq[k, i])
            for j in range(i):
                A[i, j] = normals[k, c]
                c += 1
        LA = C @ A
        prec_out[k] = LA @ LA.T
        T = _lower_inverse(LA)
        S = T.T @ T
        for i in range(d):
            for j in range(d):
                cov_out[k, i, j] = 0.5 * (S[i, j] + S[j, i])


@njit(cache=True)
def scan_hits(bins, mids, deep_threshold, shallow_threshold):
    """(h1, h2) in steps for a 0-based bin path; 0 marks a pattern not completed."""
    h1 = 0
    h2 = 0
    phase = 0
    for t in range(bins.size):
        m = mids[bins[t]]
        if phase == 0:
            if m > deep_threshold:
                h1 = t + 1
                phase = 1
        elif phase == 1:
            if m < shallow_threshold:
                phase = 2
        elif m > deep_threshold:
            h2 = t + 1
            break
    return h1, h2


@njit(cache=True)
def simulate_hits(kernel_cdf, Bs, mids, history, states0, celestial, uniforms,
                  deep_threshold, shallow_threshold, h1_out, h2_out):
    """Hitting times of ``len(states0)`` independent paths; path ``r`` uses ``Bs[r]``."""
    n, steps = uniforms.shape[0], uniforms.shape[1]
    bins = np.empty(steps, dtype=np.int64)
    states = np.empty(steps, dtype=np.int64)
    for r in range(n):
        done = simulate_path(kernel_cdf, Bs[r], mids, history, states0[r], celestial, uniforms[r],
                             deep_threshold, bins, states, shallow_threshold)
        h1, h2 = scan_hits(bins[:done], mids, deep_threshold, shallow_threshold)
        h1_out[r] = h1
        h2_out[r] = h2
