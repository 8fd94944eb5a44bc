"""Independent reference implementations used as test oracles.

Each oracle solves its problem by a different route from the package:
eigendecomposition instead of uniformization, competing-exponential path
simulation instead of holding-time simulation, brute-force enumeration over
hidden paths instead of the forward recursion, and a linear solve for
absorption times instead of simulation.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy.special import softmax


def birth_death_generator(widths, speed, pi):
    """Reflecting birth-death generator written out entry by entry."""
    m = len(widths)
    A = np.zeros((m, m))
    for i in range(m):
        r = speed / widths[i]
        if i == 0:
            A[0, 1] = r
        elif i == m - 1:
            A[i, i - 1] = r
        else:
            A[i, i + 1] = r * pi
            A[i, i - 1] = r * (1 - pi)
        A[i, i] = -A[i].sum()
    return A


def expm_eig(A, t):
    """``exp(tA)`` through the eigendecomposition ``A = V diag(w) V^-1``."""
    w, V = np.linalg.eig(A)
    P = (V * np.exp(t * w)) @ np.linalg.inv(V)
    return P.real


def ctmc_endpoints_competing(A, start, t, n, rng):
    """End states of ``n`` paths: at each step every off-diagonal rate fires an
    exponential clock and the earliest one wins."""
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    rates = np.where(np.eye(m, dtype=bool), 0.0, A)
    state = np.full(n, start)
    clock = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    while alive.any():
        idx = np.flatnonzero(alive)
        r = rates[state[idx]]
        with np.errstate(divide="ignore"):
            times = rng.exponential(1.0, r.shape) / r
        times[r == 0] = np.inf
        winner = times.argmin(axis=1)
        wait = times[np.arange(idx.size), winner]
        clock[idx] += wait
        moved = clock[idx] <= t
        state[idx[moved]] = winner[moved]
        alive[idx[~moved]] = False
    return state


def naive_covariates(bins, celestial, midpoints, deep=800.0):
    """Covariate rows written out with explicit loops; rows before 12 are None."""
    out = []
    for j in range(len(bins)):
        if j < 12:
            out.append(None)
            continue
        mids = [midpoints[b - 1] for b in bins[j - 12:j + 1]]
        c1 = sum(1 for d in mids[1:] if d >= deep)
        c2 = sum(abs(mids[i + 1] - mids[i]) for i in range(12))
        z2 = (c2 - 1650.0) / 500.0
        day = 1.0 if celestial[j] == 0 else 0.0
        moon = 1.0 if celestial[j] == 2 else 0.0
        out.append(np.array([1.0, day, moon, c1, c1 ** 2, c1 ** 3, z2, z2 ** 2, z2 ** 3]))
    return out


def transition_matrix(x, B):
    """Row ``k`` is the softmax of ``x @ B[k]``."""
    return np.array([softmax(x @ B[k]) for k in range(B.shape[0])])


def enumerate_loglik(bins, celestial, kernels, B, midpoints, deep=800.0):
    """Log-likelihood by summing over every hidden-type path.

    The type before the first full-history observation is uniform; the type
    at ``j`` is drawn from row ``s_{j-1}`` of the matrix at ``x_j`` and
    emits the move ``bins[j] -> bins[j+1]``.
    """
    K = B.shape[0]
    X = naive_covariates(bins, celestial, midpoints, deep)
    js = list(range(12, len(bins) - 1))
    G = [transition_matrix(X[j], B) for j in js]
    E = [kernels[:, bins[j] - 1, bins[j + 1] - 1] for j in js]
    paths = _all_paths(K, len(js))
    total = 0.0
    for s0 in range(K):
        prob = np.full(len(paths), 1.0 / K)
        prev = np.full(len(paths), s0)
        for t in range(len(js)):
            cur = paths[:, t]
            prob *= G[t][prev, cur] * E[t][cur]
            prev = cur
        total += prob.sum()
    return float(np.log(total))


@functools.lru_cache(maxsize=None)
def _all_paths(K, length):
    """Every sequence in ``range(K) ** length``, one per row, in lexicographic order."""
    return np.indices((K,) * length).reshape(length, -1).T.copy()


def absorption_pmf(P, deep_mask, start, h_max):
    """``P(H = h)`` for ``h = 1..h_max``, ``H`` the first step into ``deep_mask`` from ``start``.

    Uses the transient block ``Q`` and exit vector ``r``:
    ``P(H = h) = e_start Q^(h-1) r``.
    """
    transient = ~deep_mask
    Q = P[np.ix_(transient, transient)]
    r = P[np.ix_(transient, deep_mask)].sum(axis=1)
    pos = np.flatnonzero(transient).tolist().index(start)
    v = np.zeros(Q.shape[0])
    v[pos] = 1.0
    out = np.empty(h_max)
    for h in range(h_max):
        out[h] = v @ r
        v = v @ Q
    return out


def absorption_moments(P, deep_mask, start):
    """Mean and variance of the absorption time from the fundamental matrix."""
    transient = ~deep_mask
    Q = P[np.ix_(transient, transient)]
    n = Q.shape[0]
    N = np.linalg.solve(np.eye(n) - Q, np.eye(n))
    m = N @ np.ones(n)
    second = (2 * N - np.eye(n)) @ m
    pos = np.flatnonzero(transient).tolist().index(start)
    return float(m[pos]), float(second[pos] - m[pos] ** 2)


def normal_posterior(beta, cov, prior_var):
    """Mean and covariance of ``mu | beta, Sigma`` for ``beta_i ~ N(mu, Sigma)``, ``mu ~ N(0, prior_var I)``."""
    n, d = beta.shape
    Sinv = np.linalg.inv(cov)
    prec = n * Sinv + np.eye(d) / prior_var
    post_cov = np.linalg.inv(prec)
    return post_cov @ Sinv @ beta.sum(axis=0), post_cov


def inv_wishart_moments(scale, dof):
    """Mean and elementwise variance of an inverse-Wishart(``scale``, ``dof``) matrix."""
    d = scale.shape[0]
    mean = scale / (dof - d - 1)
    diag = np.diag(scale)
    num = (dof - d + 1) * scale ** 2 + (dof - d - 1) * np.outer(diag, diag)
    var = num / ((dof - d) * (dof - d - 1) ** 2 * (dof - d - 3))
    return mean, var
