"""Numba kernels for the linear recurrence ``h_t = a_t * h_{t-1} + u_t``.

All kernels parallelize only over independent sequences and keep a fixed
per-sequence accumulation order, so results do not depend on thread count.
"""
import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def blocked_linear_scan(a, u, chunk):
    """Blocked associative scan over axis 1 of (Bt, N, M) arrays.

    Pass 1 scans every chunk from a zero carry while tracking the chunk's
    product of ``a``; pass 2 folds the chunk summaries ``(prod, h_end)`` left to
    right; pass 3 adds each chunk's carry-in times the running product.
    """
    Bt, N, M = a.shape
    nc = (N + chunk - 1) // chunk
    h = np.empty_like(u)
    prod = np.empty((Bt, nc, M), dtype=a.dtype)
    for job in prange(Bt * nc):
        b = job // nc
        c = job % nc
        s = c * chunk
        e = min(s + chunk, N)
        hp = np.zeros(M, dtype=a.dtype)
        ap = np.ones(M, dtype=a.dtype)
        for t in range(s, e):
            for m in range(M):
                hp[m] = a[b, t, m] * hp[m] + u[b, t, m]
                ap[m] *= a[b, t, m]
                h[b, t, m] = hp[m]
        for m in range(M):
            prod[b, c, m] = ap[m]

    carry = np.zeros((Bt, nc, M), dtype=a.dtype)
    for b in prange(Bt):
        for c in range(1, nc):
            last = min(c * chunk, N) - 1
            for m in range(M):
                carry[b, c, m] = prod[b, c - 1, m] * carry[b, c - 1, m] + h[b, last, m]

    for job in prange(Bt * nc):
        b = job // nc
        c = job % nc
        if c == 0:
            continue
        s = c * chunk
        e = min(s + chunk, N)
        ap = np.ones(M, dtype=a.dtype)
        for t in range(s, e):
            for m in range(M):
                ap[m] *= a[b, t, m]
                h[b, t, m] += ap[m] * carry[b, c, m]
    return h


_FM = {"reassoc", "contract", "nsz", "arcp"}


@njit(parallel=True, cache=True, fastmath=_FM)
def fused_scan_forward(x, delta, a, em1, A, Bm, Cm, zoh):
    """Discretized scan with the decay ``a = exp(delta*A)`` precomputed.

    x, delta: (Bt, N, P); a: (Bt, N, P, K); A: (P, K); Bm, Cm: (Bt, N, K).
    The input coefficient is ``delta`` (Euler) or ``expm1(delta*A)/A`` (zoh,
    with ``em1`` holding the expm1 term; ignored otherwise).
    Returns y (Bt, N, P) and the hidden states (Bt, N, P, K).
    """
    Bt, N, P = x.shape
    K = a.shape[3]
    y = np.empty_like(x)
    hs = np.empty_like(a)
    for b in prange(Bt):
        h = np.zeros((P, K), dtype=x.dtype)
        for t in range(N):
            for p in range(P):
                u = x[b, t, p]
                d = delta[b, t, p]
                acc = 0.0
                for k in range(K):
                    c = em1[b, t, p, k] / A[p, k] if zoh else d
                    hk = a[b, t, p, k] * h[p, k] + c * Bm[b, t, k] * u
                    h[p, k] = hk
                    hs[b, t, p, k] = hk
                    acc += Cm[b, t, k] * hk
                y[b, t, p] = acc
    return y, hs


@njit(parallel=True, cache=True, fastmath=_FM)
def fused_scan_backward(gy, x, delta, a, em1, A, Bm, Cm, hs, zoh):
    """Adjoint recurrence for :func:`fused_scan_forward`.

    ``lam`` carries dL/dh_t: it picks up ``C_t * gy_t`` at step t and reaches
    step t-1 through ``a_t``. The chain rule through the discretization is
    applied in place, so this returns grads for (x, delta, A, B, C).
    """
    Bt, N, P = x.shape
    K = a.shape[3]
    gx = np.empty_like(x)
    gd = np.empty_like(x)
    gA = np.zeros((Bt, P, K), dtype=x.dtype)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    for b in prange(Bt):
        lam = np.zeros((P, K), dtype=x.dtype)
        for t in range(N - 1, -1, -1):
            for p in range(P):
                g = gy[b, t, p]
                u = x[b, t, p]
                d = delta[b, t, p]
                gu = 0.0
                gdp = 0.0
                for k in range(K):
                    lk = lam[p, k] + g * Cm[b, t, k]
                    hk = hs[b, t, p, k]
                    gC[b, t, k] += g * hk
                    hprev = hs[b, t - 1, p, k] if t > 0 else 0.0
                    ak = a[b, t, p, k]
                    Ak = A[p, k]
                    # d h_t / d a_t = h_{t-1};  a = exp(delta*A)
                    gak = lk * hprev * ak
                    gck = lk * Bm[b, t, k] * u
                    if zoh:
                        c = em1[b, t, p, k] / Ak
                        # c = expm1(delta*A)/A: dc/ddelta = a, dc/dA = (delta*a - c)/A
                        gdp += gak * Ak + gck * ak
                        gA[b, p, k] += gak * d + gck * (d * ak - c) / Ak
                    else:
                        c = d
                        gdp += gak * Ak + gck
                        gA[b, p, k] += gak * d
                    gB[b, t, k] += lk * c * u
                    gu += lk * c * Bm[b, t, k]
                    lam[p, k] = lk * ak
                gx[b, t, p] = gu
                gd[b, t, p] = gdp
    return gx, gd, gA.sum(axis=0), gB, gC
