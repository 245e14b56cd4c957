# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused prompted softmax attention and layer norm.

Semantics match ``_kernels_py`` exactly; only the evaluation order of sums
differs, so results agree to rounding (about 1e-15 relative).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef inline void _gather_keys(const double* prm, const double* kv, Py_ssize_t Lp, Py_ssize_t L,
                              Py_ssize_t d, Py_ssize_t off, Py_ssize_t dh, Py_ssize_t Lk,
                              double* kT) noexcept nogil:
    # kT[e * Lk + j] = key row j, head slice [off, off + dh)
    cdef Py_ssize_t j, e
    for j in range(Lp):
        for e in range(dh):
            kT[e * Lk + j] = prm[j * d + off + e]
    for j in range(L):
        for e in range(dh):
            kT[e * Lk + Lp + j] = kv[j * 2 * d + off + e]


def prompted_attention_fwd(const double[:, :, ::1] q, const double[:, :, ::1] kv,
                           const double[:, :, ::1] prompt, Py_ssize_t N,
                           Py_ssize_t H, double scale):
    """Multi-head attention of q over [prompt; k] with values [prompt; v].

    q: (Nq, Lq, d), kv: (Nq, L, 2d) holding keys then values, prompt: (Np, Lp, d).
    Logical sequence n reads q/kv row n % Nq and prompt row n // (N / Np).
    Returns ctx (N, Lq, d) and probs (N, H, Lq, Lp + L).
    """
    cdef Py_ssize_t Nq = q.shape[0], Lq = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t L = kv.shape[1], Np = prompt.shape[0], Lp = prompt.shape[1]
    cdef Py_ssize_t Lk = Lp + L, dh = d // H, per = N // Np if Np else 1
    ctx_a = np.zeros((N, Lq, d), dtype=np.float64)
    probs_a = np.empty((N, H, Lq, Lk), dtype=np.float64)
    kT_a = np.empty(dh * Lk, dtype=np.float64)
    cdef double[:, :, ::1] ctx = ctx_a
    cdef double[:, :, :, ::1] P = probs_a
    cdef double[::1] kTm = kT_a
    cdef double* kT = &kTm[0]
    cdef double* s
    cdef double* c
    cdef const double* vrow
    cdef const double* qrow
    cdef const double* prm = NULL
    cdef Py_ssize_t n, h, i, j, e, off, src
    cdef double mx, tot, w, qe
    with nogil:
        for n in range(N):
            src = n % Nq
            if Lp:
                prm = &prompt[n // per, 0, 0]
            for h in range(H):
                off = h * dh
                _gather_keys(prm, &kv[src, 0, 0], Lp, L, d, off, dh, Lk, kT)
                for i in range(Lq):
                    s = &P[n, h, i, 0]
                    qrow = &q[src, i, off]
                    for j in range(Lk):
                        s[j] = 0.0
                    for e in range(dh):
                        qe = qrow[e]
                        for j in range(Lk):
                            s[j] = s[j] + qe * kT[e * Lk + j]
                    for j in range(Lk):
                        s[j] = s[j] * scale
                    mx = s[0]
                    for j in range(Lk):
                        if s[j] > mx:
                            mx = s[j]
                    tot = 0.0
                    for j in range(Lk):
                        s[j] = exp(s[j] - mx)
                        tot = tot + s[j]
                    tot = 1.0 / tot
                    c = &ctx[n, i, off]
                    for j in range(Lk):
                        w = s[j] * tot
                        s[j] = w
                        if j < Lp:
                            vrow = prm + j * d + off
                        else:
                            vrow = &kv[src, j - Lp, d + off]
                        for e in range(dh):
                            c[e] = c[e] + w * vrow[e]
    return ctx_a, probs_a


def prompted_attention_bwd(const double[:, :, ::1] q, const double[:, :, ::1] kv,
                           const double[:, :, ::1] prompt, const double[:, :, :, ::1] P,
                           const double[:, :, ::1] dctx, Py_ssize_t H, double scale,
                           bint need_dqkv):
    """Gradients of :func:`prompted_attention_fwd`.

    Returns (dq (N, Lq, d), dkv (N, L, 2d), dprompt (Np, Lp, d)); dq and dkv
    are None when ``need_dqkv`` is false. Prompt gradients from keys and values
    are summed over every sequence sharing that prompt row.
    """
    cdef Py_ssize_t N = dctx.shape[0], Nq = q.shape[0], Lq = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t L = kv.shape[1], Np = prompt.shape[0], Lp = prompt.shape[1]
    cdef Py_ssize_t Lk = Lp + L, dh = d // H, per = N // Np if Np else 1
    dprompt_a = np.zeros((Np, Lp, d), dtype=np.float64)
    cdef double[:, :, ::1] dprm = dprompt_a
    dq_a = dkv_a = None
    cdef double[:, :, ::1] dq
    cdef double[:, :, ::1] dkv
    if need_dqkv:
        dq_a = np.zeros((N, Lq, d), dtype=np.float64)
        dkv_a = np.zeros((N, L, 2 * d), dtype=np.float64)
        dq = dq_a
        dkv = dkv_a
    vT_a = np.empty(dh * Lk, dtype=np.float64)
    kT_a = np.empty(dh * Lk, dtype=np.float64)
    ds_a = np.empty(Lk, dtype=np.float64)
    cdef double[::1] vTm = vT_a
    cdef double[::1] kTm = kT_a
    cdef double[::1] dsm = ds_a
    cdef double* vT = &vTm[0]
    cdef double* kT = &kTm[0]
    cdef double* ds = &dsm[0]
    cdef const double* prm = NULL
    cdef double* dp = NULL
    cdef const double* p
    cdef const double* g
    cdef const double* qrow
    cdef double* row
    cdef Py_ssize_t n, h, i, j, e, off, src
    cdef double dot, w, a, ge
    with nogil:
        for n in range(N):
            src = n % Nq
            if Lp:
                prm = &prompt[n // per, 0, 0]
                dp = &dprm[n // per, 0, 0]
            for h in range(H):
                off = h * dh
                _gather_keys(prm, &kv[src, 0, 0], Lp, L, d, off, dh, Lk, kT)
                # values, transposed the same way
                for j in range(Lp):
                    for e in range(dh):
                        vT[e * Lk + j] = prm[j * d + off + e]
                for j in range(L):
                    for e in range(dh):
                        vT[e * Lk + Lp + j] = kv[src, j, d + off + e]
                for i in range(Lq):
                    p = &P[n, h, i, 0]
                    g = &dctx[n, i, off]
                    qrow = &q[src, i, off]
                    for j in range(Lk):
                        ds[j] = 0.0
                    for e in range(dh):
                        ge = g[e]
                        for j in range(Lk):
                            ds[j] = ds[j] + ge * vT[e * Lk + j]
                    dot = 0.0
                    for j in range(Lk):
                        dot = dot + ds[j] * p[j]
                    for j in range(Lk):
                        w = p[j]
                        a = w * (ds[j] - dot) * scale
                        if j < Lp:
                            row = dp + j * d + off
                            for e in range(dh):
                                row[e] = row[e] + w * g[e] + a * qrow[e]
                        elif need_dqkv:
                            row = &dkv[n, j - Lp, off]
                            for e in range(dh):
                                row[e] = row[e] + a * qrow[e]
                            row = &dkv[n, j - Lp, d + off]
                            for e in range(dh):
                                row[e] = row[e] + w * g[e]
                        if need_dqkv:
                            row = &dq[n, i, off]
                            for e in range(dh):
                                row[e] = row[e] + a * kT[e * Lk + j]
    return dq_a, dkv_a, dprompt_a


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    y_a = np.empty((R, D), dtype=np.float64)
    xhat_a = np.empty((R, D), dtype=np.float64)
    rstd_a = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] y = y_a
    cdef double[:, ::1] xh = xhat_a
    cdef double[::1] rs = rstd_a
    cdef Py_ssize_t r, j
    cdef double mu, var, c, inv
    with nogil:
        for r in range(R):
            mu = 0.0
            for j in range(D):
                mu = mu + x[r, j]
            mu = mu / D
            var = 0.0
            for j in range(D):
                c = x[r, j] - mu
                var = var + c * c
            var = var / D
            inv = 1.0 / sqrt(var + eps)
            rs[r] = inv
            for j in range(D):
                c = (x[r, j] - mu) * inv
                xh[r, j] = c
                y[r, j] = c * gamma[j] + beta[j]
    return y_a, xhat_a, rstd_a


def layer_norm_bwd(const double[:, ::1] dy, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t R = dy.shape[0], D = dy.shape[1]
    dx_a = np.empty((R, D), dtype=np.float64)
    dg_a = np.zeros(D, dtype=np.float64)
    db_a = np.zeros(D, dtype=np.float64)
    cdef double[:, ::1] dx = dx_a
    cdef double[::1] dg = dg_a
    cdef double[::1] db = db_a
    cdef Py_ssize_t r, j
    cdef double m1, m2, g
    with nogil:
        for r in range(R):
            m1 = 0.0
            m2 = 0.0
            for j in range(D):
                g = dy[r, j] * gamma[j]
                m1 = m1 + g
                m2 = m2 + g * xhat[r, j]
                dg[j] = dg[j] + dy[r, j] * xhat[r, j]
                db[j] = db[j] + dy[r, j]
            m1 = m1 / D
            m2 = m2 / D
            for j in range(D):
                dx[r, j] = (dy[r, j] * gamma[j] - m1 - xhat[r, j] * m2) * rstd[r]
    return dx_a, dg_a, db_a
