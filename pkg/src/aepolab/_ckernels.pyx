# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the numeric hot spots in :mod:`aepolab._kernels_py`.

Same signatures and return conventions as the numpy fallback.  Loops run
without the GIL so rollout chunks can overlap in worker threads.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_A = 0.044715
cdef double TOP_P_SLACK = 1e-12


def gelu_forward(x):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef cnp.ndarray[double, ndim=1] th = np.empty_like(xf)
    cdef double[::1] xv = xf, ov = out, tv = th
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double a, t
    with nogil:
        for i in range(n):
            a = xv[i]
            t = tanh(GELU_C * (a + GELU_A * a * a * a))
            tv[i] = t
            ov[i] = 0.5 * a * (1.0 + t)
    shape = np.shape(x)
    return out.reshape(shape), (xf.reshape(shape), th.reshape(shape))


def gelu_backward(g, cache):
    x, th = cache
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    cdef double[::1] xv = np.ascontiguousarray(x).reshape(-1)
    cdef double[::1] tv = np.ascontiguousarray(th).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] out = np.empty(gv.shape[0])
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = gv.shape[0]
    cdef double a, t
    with nogil:
        for i in range(n):
            a = xv[i]
            t = tv[i]
            ov[i] = gv[i] * (0.5 * (1.0 + t)
                             + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * a * a))
    return out.reshape(np.shape(g))


def layer_norm_forward(x, double eps):
    shape = np.shape(x)
    cdef Py_ssize_t nd = len(shape)
    cdef Py_ssize_t d = shape[nd - 1]
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, d)
    cdef Py_ssize_t rows = xv.shape[0], r, j
    cdef cnp.ndarray[double, ndim=2] out = np.empty((rows, d))
    cdef cnp.ndarray[double, ndim=2] inv = np.empty((rows, 1))
    cdef double[:, ::1] ov = out, iv = inv
    cdef double mu, var, c, s
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu += xv[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = xv[r, j] - mu
                var += c * c
            var /= d
            s = 1.0 / sqrt(var + eps)
            iv[r, 0] = s
            for j in range(d):
                ov[r, j] = (xv[r, j] - mu) * s
    return out.reshape(shape), inv.reshape(tuple(shape[:nd - 1]) + (1,))


def layer_norm_backward(g, y, inv_std):
    shape = np.shape(g)
    cdef Py_ssize_t nd = len(shape)
    cdef Py_ssize_t d = shape[nd - 1]
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1, d)
    cdef double[:, ::1] yv = np.ascontiguousarray(y).reshape(-1, d)
    cdef double[::1] sv = np.ascontiguousarray(inv_std).reshape(-1)
    cdef Py_ssize_t rows = gv.shape[0], r, j
    cdef cnp.ndarray[double, ndim=2] out = np.empty((rows, d))
    cdef double[:, ::1] ov = out
    cdef double gm, gym
    with nogil:
        for r in range(rows):
            gm = 0.0
            gym = 0.0
            for j in range(d):
                gm += gv[r, j]
                gym += gv[r, j] * yv[r, j]
            gm /= d
            gym /= d
            for j in range(d):
                ov[r, j] = sv[r] * (gv[r, j] - gm - yv[r, j] * gym)
    return out.reshape(shape)


def log_softmax(x):
    shape = np.shape(x)
    cdef Py_ssize_t nd = len(shape)
    cdef Py_ssize_t d = shape[nd - 1]
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, d)
    cdef Py_ssize_t rows = xv.shape[0], r, j
    cdef cnp.ndarray[double, ndim=2] out = np.empty((rows, d))
    cdef double[:, ::1] ov = out
    cdef double m, s, lse
    with nogil:
        for r in range(rows):
            m = -INFINITY
            for j in range(d):
                if xv[r, j] > m:
                    m = xv[r, j]
            s = 0.0
            for j in range(d):
                s += exp(xv[r, j] - m)
            lse = log(s)
            for j in range(d):
                ov[r, j] = (xv[r, j] - m) - lse
    return out.reshape(shape)


def attention_forward(q, k, v):
    shape = np.shape(q)
    cdef Py_ssize_t nd = len(shape)
    cdef Py_ssize_t t = shape[nd - 2], dh = shape[nd - 1]
    cdef double[:, :, ::1] qv = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, t, dh)
    cdef double[:, :, ::1] kv = np.ascontiguousarray(k, dtype=np.float64).reshape(-1, t, dh)
    cdef double[:, :, ::1] vv = np.ascontiguousarray(v, dtype=np.float64).reshape(-1, t, dh)
    cdef Py_ssize_t nb = qv.shape[0], b, i, j, e
    cdef cnp.ndarray[double, ndim=3] out = np.zeros((nb, t, dh))
    cdef cnp.ndarray[double, ndim=3] probs = np.zeros((nb, t, t))
    cdef double[:, :, ::1] ov = out, pv = probs
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double s, m, z, p
    with nogil:
        for b in range(nb):
            for i in range(t):
                m = -INFINITY
                for j in range(i + 1):
                    s = 0.0
                    for e in range(dh):
                        s += qv[b, i, e] * kv[b, j, e]
                    s *= scale
                    pv[b, i, j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(i + 1):
                    p = exp(pv[b, i, j] - m)
                    pv[b, i, j] = p
                    z += p
                for j in range(i + 1):
                    p = pv[b, i, j] / z
                    pv[b, i, j] = p
                    for e in range(dh):
                        ov[b, i, e] += p * vv[b, j, e]
    return out.reshape(shape), probs.reshape(tuple(shape[:nd - 1]) + (t,))


def attention_backward(g, q, k, v, probs):
    shape = np.shape(q)
    cdef Py_ssize_t nd = len(shape)
    cdef Py_ssize_t t = shape[nd - 2], dh = shape[nd - 1]
    cdef double[:, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1, t, dh)
    cdef double[:, :, ::1] qv = np.ascontiguousarray(q).reshape(-1, t, dh)
    cdef double[:, :, ::1] kv = np.ascontiguousarray(k).reshape(-1, t, dh)
    cdef double[:, :, ::1] vv = np.ascontiguousarray(v).reshape(-1, t, dh)
    cdef double[:, :, ::1] pv = np.ascontiguousarray(probs).reshape(-1, t, t)
    cdef Py_ssize_t nb = qv.shape[0], b, i, j, e
    cdef cnp.ndarray[double, ndim=3] dq = np.zeros((nb, t, dh))
    cdef cnp.ndarray[double, ndim=3] dk = np.zeros((nb, t, dh))
    cdef cnp.ndarray[double, ndim=3] dv = np.zeros((nb, t, dh))
    cdef cnp.ndarray[double, ndim=1] dp = np.zeros(t)
    cdef double[:, :, ::1] dqv = dq, dkv = dk, dvv = dv
    cdef double[::1] dpv = dp
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double s, acc, ds, p
    with nogil:
        for b in range(nb):
            for i in range(t):
                acc = 0.0
                for j in range(i + 1):
                    p = pv[b, i, j]
                    s = 0.0
                    for e in range(dh):
                        s += gv[b, i, e] * vv[b, j, e]
                        dvv[b, j, e] += p * gv[b, i, e]
                    dpv[j] = s
                    acc += s * p
                for j in range(i + 1):
                    ds = pv[b, i, j] * (dpv[j] - acc) * scale
                    for e in range(dh):
                        dqv[b, i, e] += ds * kv[b, j, e]
                        dkv[b, j, e] += ds * qv[b, i, e]
    return dq.reshape(shape), dk.reshape(shape), dv.reshape(shape)


def attention_decode(q, k_cache, v_cache, Py_ssize_t length):
    qshape = np.shape(q)
    kshape = np.shape(k_cache)
    cdef Py_ssize_t dh = qshape[len(qshape) - 1], cap = kshape[len(kshape) - 2]
    cdef double[:, ::1] qv = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, dh)
    cdef double[:, :, ::1] kv = np.ascontiguousarray(k_cache).reshape(-1, cap, dh)
    cdef double[:, :, ::1] vv = np.ascontiguousarray(v_cache).reshape(-1, cap, dh)
    cdef Py_ssize_t nb = qv.shape[0], b, j, e
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((nb, dh))
    cdef cnp.ndarray[double, ndim=1] sc = np.empty(length)
    cdef double[:, ::1] ov = out
    cdef double[::1] sv = sc
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double s, m, z
    with nogil:
        for b in range(nb):
            m = -INFINITY
            for j in range(length):
                s = 0.0
                for e in range(dh):
                    s += qv[b, e] * kv[b, j, e]
                s *= scale
                sv[j] = s
                if s > m:
                    m = s
            z = 0.0
            for j in range(length):
                sv[j] = exp(sv[j] - m)
                z += sv[j]
            for j in range(length):
                s = sv[j] / z
                for e in range(dh):
                    ov[b, e] += s * vv[b, j, e]
    return out.reshape(qshape)


cdef void _order_desc(double* p, Py_ssize_t* idx, Py_ssize_t n) noexcept nogil:
    # insertion sort by descending probability, ties by ascending id
    cdef Py_ssize_t i, j, cur
    for i in range(n):
        idx[i] = i
    for i in range(1, n):
        cur = idx[i]
        j = i - 1
        while j >= 0 and p[idx[j]] < p[cur]:
            idx[j + 1] = idx[j]
            j -= 1
        idx[j + 1] = cur


def nucleus_sample(probs, uniforms, double temperature, double top_p):
    cdef double[:, ::1] pv = np.ascontiguousarray(np.atleast_2d(probs), dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(uniforms, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = pv.shape[0], vocab = pv.shape[1], i, j, keep, best
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] outv = out
    cdef cnp.ndarray[double, ndim=1] work = np.empty(vocab)
    cdef cnp.ndarray[Py_ssize_t, ndim=1] order = np.empty(vocab, dtype=np.intp)
    cdef cnp.ndarray[double, ndim=1] cumarr = np.empty(vocab)
    cdef double[::1] w = work, cum = cumarr
    cdef Py_ssize_t[::1] idx = order
    cdef double m, z, target, kept, x
    with nogil:
        for i in range(n):
            if temperature == 0.0:
                best = 0
                for j in range(1, vocab):
                    if pv[i, j] > pv[i, best]:
                        best = j
                outv[i] = best
                continue
            if temperature != 1.0:
                m = -INFINITY
                for j in range(vocab):
                    if pv[i, j] > 0.0:
                        w[j] = log(pv[i, j]) / temperature
                        if w[j] > m:
                            m = w[j]
                    else:
                        w[j] = -INFINITY
                z = 0.0
                for j in range(vocab):
                    w[j] = exp(w[j] - m)
                    z += w[j]
                for j in range(vocab):
                    w[j] = w[j] / z
            else:
                for j in range(vocab):
                    w[j] = pv[i, j]
            _order_desc(&w[0], &idx[0], vocab)
            target = top_p - TOP_P_SLACK
            z = 0.0
            keep = vocab
            for j in range(vocab):
                z += w[idx[j]]
                cum[j] = z
                if z >= target and keep == vocab:
                    keep = j + 1
            kept = cum[keep - 1]
            x = uv[i] * kept
            j = 0
            while j < keep - 1 and cum[j] <= x:
                j += 1
            outv[i] = idx[j]
    return out
