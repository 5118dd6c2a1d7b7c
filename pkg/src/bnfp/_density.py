"""Compiled joint log-density and gradient used inside the sampler.

The readable per-term versions live in :mod:`bnfp.model` and :mod:`bnfp.gp`;
tests check this kernel against their sum.

Unconstrained layout (free slots only, in order)::

    beta, log sigma (continuous), log tau, log ell, logit delta,
    J latent values (mu, or standard-normal z when non-centered),
    J-1 stick-breaking coordinates (when q is free)
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
BETA_SCALE = 2.5
HYPER_SCALE = 2.5
JITTERS = (0.0, 1e-10, 1e-8, 1e-6)

# slot indices into the hyperparameter flag arrays
BETA, SIGMA, TAU, ELL, DELTA = 0, 1, 2, 3, 4


@njit(cache=True, error_model="numpy")
def _softplus(a):
    if a > 0:
        return a + math.log1p(math.exp(-a))
    return math.log1p(math.exp(a))


@njit(cache=True, error_model="numpy")
def _sigmoid(a):
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy")
def _cholesky_inplace(A, L):
    """Lower factor of A into L; False when a pivot is not positive."""
    m = A.shape[0]
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, m):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(cache=True, error_model="numpy")
def _cholesky_jitter(A, L):
    m = A.shape[0]
    scale = 0.0
    for i in range(m):
        scale += A[i, i]
    scale /= m
    B = A.copy()
    for rel in JITTERS:
        jit = rel * scale
        for i in range(m):
            B[i, i] = A[i, i] + jit
        if _cholesky_inplace(B, L):
            return jit, True
    return 0.0, False


@njit(cache=True, error_model="numpy")
def _lower_inverse(L):
    # row by row so the inner loop runs over contiguous memory
    m = L.shape[0]
    Li = np.zeros((m, m))
    for i in range(m):
        for k in range(i):
            c = L[i, k]
            if c != 0.0:
                for j in range(k + 1):
                    Li[i, j] -= c * Li[k, j]
        d = 1.0 / L[i, i]
        for j in range(i):
            Li[i, j] *= d
        Li[i, i] = d
    return Li


@njit(cache=True, error_model="numpy")
def _halfcauchy_u(u, scale):
    """log half-Cauchy density of exp(u) plus log-Jacobian u, and d/du."""
    s = math.exp(u)
    r = s / scale
    lp = math.log(2.0 / (math.pi * scale)) - math.log1p(r * r) + u
    d = 1.0 - 2.0 * r * r / (1.0 + r * r)
    return lp, d


@njit(cache=True, error_model="numpy")
def logp_grad(v, x, w, n, ybar, s2, ycount, binary, sigma_scale,
              hfree, hfixed, noncentered, qfree, qfixed):
    J = x.shape[0]
    grad = np.zeros(v.shape[0])
    if not np.all(np.isfinite(v)):
        return -np.inf, grad
    lp = 0.0
    pos = 0
    ix = np.full(5, -1)

    if hfree[BETA]:
        beta = v[pos]
        ix[BETA] = pos
        lp += -0.5 * beta * beta / (BETA_SCALE * BETA_SCALE) - math.log(BETA_SCALE) - 0.5 * LOG_2PI
        grad[pos] += -beta / (BETA_SCALE * BETA_SCALE)
        pos += 1
    else:
        beta = hfixed[BETA]

    sigma = 1.0
    if not binary:
        if hfree[SIGMA]:
            ix[SIGMA] = pos
            sigma = math.exp(v[pos])
            a, d = _halfcauchy_u(v[pos], sigma_scale)
            lp += a
            grad[pos] += d
            pos += 1
        else:
            sigma = hfixed[SIGMA]

    if hfree[TAU]:
        ix[TAU] = pos
        tau = math.exp(v[pos])
        a, d = _halfcauchy_u(v[pos], HYPER_SCALE)
        lp += a
        grad[pos] += d
        pos += 1
    else:
        tau = hfixed[TAU]

    if hfree[ELL]:
        ix[ELL] = pos
        ell = math.exp(v[pos])
        a, d = _halfcauchy_u(v[pos], HYPER_SCALE)
        lp += a
        grad[pos] += d
        pos += 1
    else:
        ell = hfixed[ELL]

    if hfree[DELTA]:
        ix[DELTA] = pos
        u = v[pos]
        delta = _sigmoid(u)
        # uniform prior; log-Jacobian log delta + log(1 - delta)
        lp += -_softplus(-u) - _softplus(u)
        grad[pos] += 1.0 - 2.0 * delta
        pos += 1
    else:
        delta = hfixed[DELTA]

    if not (sigma > 0.0 and tau > 0.0 and ell > 0.0 and math.isfinite(sigma)
            and math.isfinite(tau) and math.isfinite(ell)):
        return -np.inf, grad

    # covariance
    tau2 = tau * tau
    K = np.empty((J, J))
    D2 = np.empty((J, J))
    Sig = np.empty((J, J))
    inv_ell2 = 1.0 / (ell * ell)
    for i in range(J):
        for j in range(i):
            d = x[i] - x[j]
            d2 = d * d
            k = math.exp(-d2 * inv_ell2)
            D2[i, j] = D2[j, i] = d2
            K[i, j] = K[j, i] = k
            Sig[i, j] = Sig[j, i] = tau2 * (1.0 - delta) * k
        D2[i, i] = 0.0
        K[i, i] = 1.0
        Sig[i, i] = tau2
    L = np.zeros((J, J))
    jit, ok = _cholesky_jitter(Sig, L)
    if not ok:
        return -np.inf, grad
    for i in range(J):
        Sig[i, i] += jit
    Li = _lower_inverse(L)
    logdet_half = 0.0
    for i in range(J):
        logdet_half += math.log(L[i, i])

    lat0 = pos
    lat = v[lat0:lat0 + J]
    pos += J
    mean = x * beta
    mu = np.empty(J)
    if noncentered:
        for i in range(J):
            s = mean[i]
            for k in range(i + 1):
                s += L[i, k] * lat[k]
            mu[i] = s
        lp += -0.5 * np.dot(lat, lat) - 0.5 * J * LOG_2PI
    else:
        for i in range(J):
            mu[i] = lat[i]

    # outcome likelihood and its gradient wrt mu
    gmu = np.empty(J)
    if binary:
        for j in range(J):
            lp += ycount[j] * mu[j] - n[j] * _softplus(mu[j])
            gmu[j] = ycount[j] - n[j] * _sigmoid(mu[j])
    else:
        inv_s2 = 1.0 / (sigma * sigma)
        ss = 0.0
        ntot = 0.0
        for j in range(J):
            r = ybar[j] - mu[j]
            ss += n[j] * r * r
            gmu[j] = n[j] * r * inv_s2
            ntot += n[j]
        S2 = 0.0
        for j in range(J):
            S2 += s2[j]
        lp += -0.5 * (ss + S2) * inv_s2 - ntot * math.log(sigma) - 0.5 * ntot * LOG_2PI
        if ix[SIGMA] >= 0:
            grad[ix[SIGMA]] += (ss + S2) * inv_s2 - ntot

    # S is the gradient of the density wrt the covariance (up to symmetry)
    S = np.empty((J, J))
    if noncentered:
        # a = L^T gmu; dlat = -z + a
        a = np.zeros(J)
        for k in range(J):
            s = 0.0
            for i in range(k, J):
                s += L[i, k] * gmu[i]
            a[k] = s
            grad[lat0 + k] += s - lat[k]
        gbeta = np.dot(x, gmu)
        # P = Phi(L^T Lbar) with Lbar = tril(gmu z^T), i.e. tril(a z^T), halved diagonal
        P = np.zeros((J, J))
        for i in range(J):
            for j in range(i + 1):
                P[i, j] = a[i] * lat[j]
            P[i, i] *= 0.5
        # S = Li^T P Li
        T = P @ Li
        S = Li.T @ T
        S = 0.5 * (S + S.T)
    else:
        r = mu - mean
        alpha = Li.T @ (Li @ r)
        lp += -0.5 * np.dot(r, alpha) - logdet_half - 0.5 * J * LOG_2PI
        for j in range(J):
            grad[lat0 + j] += gmu[j] - alpha[j]
        gbeta = np.dot(x, alpha)
        Sinv = Li.T @ Li
        for i in range(J):
            for j in range(J):
                S[i, j] = 0.5 * (alpha[i] * alpha[j] - Sinv[i, j])

    if ix[BETA] >= 0:
        grad[ix[BETA]] += gbeta
    if ix[TAU] >= 0:
        acc = 0.0
        for i in range(J):
            for j in range(J):
                acc += S[i, j] * Sig[i, j]
        grad[ix[TAU]] += 2.0 * acc
    if ix[ELL] >= 0:
        acc = 0.0
        for i in range(J):
            for j in range(J):
                if i != j:
                    acc += S[i, j] * K[i, j] * D2[i, j]
        grad[ix[ELL]] += acc * tau2 * (1.0 - delta) * 2.0 / (ell * ell)
    if ix[DELTA] >= 0:
        acc = 0.0
        for i in range(J):
            for j in range(J):
                if i != j:
                    acc -= S[i, j] * K[i, j]
        grad[ix[DELTA]] += acc * tau2 * delta * (1.0 - delta)

    # cell proportions: Dirichlet(1) prior, stick-breaking, multinomial counts
    logq = np.empty(J)
    zs = np.empty(max(J - 1, 0))
    if qfree:
        lp += math.lgamma(J)
        logr = 0.0
        for k in range(J - 1):
            a = v[pos + k] - math.log(J - 1 - k)
            lz = -_softplus(-a)
            l1mz = -_softplus(a)
            zs[k] = _sigmoid(a)
            logq[k] = logr + lz
            lp += lz + l1mz + logr
            logr += l1mz
        logq[J - 1] = logr
    else:
        for j in range(J):
            logq[j] = math.log(qfixed[j]) if qfixed[j] > 0 else -np.inf

    ntot = 0.0
    for j in range(J):
        ntot += n[j]
    smax = -np.inf
    for j in range(J):
        t = logq[j] - math.log(w[j])
        if t > smax:
            smax = t
    if smax == -np.inf:
        return -np.inf, grad
    S_ = 0.0
    for j in range(J):
        S_ += math.exp(logq[j] - math.log(w[j]) - smax)
    logS = smax + math.log(S_)
    for j in range(J):
        if n[j] > 0:
            if logq[j] == -np.inf:
                return -np.inf, grad
            lp += n[j] * (logq[j] - math.log(w[j]) - logS)
    if qfree:
        g = np.empty(J)
        for j in range(J):
            g[j] = n[j] - ntot * math.exp(logq[j] - math.log(w[j]) - logS)
        adj_r = g[J - 1]
        for k in range(J - 2, -1, -1):
            a_lz = g[k] + 1.0
            a_l1mz = adj_r + 1.0
            grad[pos + k] += a_lz * (1.0 - zs[k]) - a_l1mz * zs[k]
            adj_r += g[k] + 1.0
    if not (math.isfinite(lp) and np.all(np.isfinite(grad))):
        return -np.inf, grad
    return lp, grad


@njit(cache=True, error_model="numpy")
def constrain_batch(V, x, binary, hfree, hfixed, noncentered, qfree, qfixed):
    """Constrained draws: (hyper[S, 5], mu[S, J], q[S, J]) from unconstrained rows."""
    S = V.shape[0]
    J = x.shape[0]
    hyper = np.empty((S, 5))
    mu = np.empty((S, J))
    q = np.empty((S, J))
    L = np.zeros((J, J))
    Sig = np.empty((J, J))
    for s in range(S):
        v = V[s]
        pos = 0
        for k in range(5):
            if k == SIGMA and binary:
                hyper[s, k] = np.nan
                continue
            if hfree[k]:
                u = v[pos]
                pos += 1
                if k == BETA:
                    hyper[s, k] = u
                elif k == DELTA:
                    hyper[s, k] = _sigmoid(u)
                else:
                    hyper[s, k] = math.exp(u)
            else:
                hyper[s, k] = hfixed[k]
        beta, tau, ell, delta = hyper[s, BETA], hyper[s, TAU], hyper[s, ELL], hyper[s, DELTA]
        if noncentered:
            tau2 = tau * tau
            for i in range(J):
                for j in range(J):
                    d = x[i] - x[j]
                    Sig[i, j] = tau2 * (1.0 - delta) * math.exp(-d * d / (ell * ell))
                Sig[i, i] = tau2
            jit, ok = _cholesky_jitter(Sig, L)
            for i in range(J):
                acc = x[i] * beta
                if ok:
                    for k in range(i + 1):
                        acc += L[i, k] * v[pos + k]
                else:
                    acc = np.nan
                mu[s, i] = acc
        else:
            for i in range(J):
                mu[s, i] = v[pos + i]
        pos += J
        if qfree:
            logr = 0.0
            for k in range(J - 1):
                a = v[pos + k] - math.log(J - 1 - k)
                q[s, k] = math.exp(logr - _softplus(-a))
                logr -= _softplus(a)
            q[s, J - 1] = math.exp(logr)
        else:
            for j in range(J):
                q[s, j] = qfixed[j]
    return hyper, mu, q
