# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Single-pass float32 kernels for the training hot loop.

Every function has a numpy twin in mvpolicy._kernels; correctness is
checked against those in the test suite. Kernels are single-threaded on
purpose: training determinism is a contract.
"""

from libc.math cimport erff, expf, sqrtf

cdef float INV_SQRT2 = 0.7071067811865476
cdef float INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(const float[::1] x, float[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef float xi
    for i in range(n):
        xi = x[i]
        out[i] = 0.5 * xi * (1.0 + erff(xi * INV_SQRT2))


def gelu_bwd(const float[::1] x, const float[::1] g, float[::1] dx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef float xi, cdf, pdf
    for i in range(n):
        xi = x[i]
        cdf = 0.5 * (1.0 + erff(xi * INV_SQRT2))
        pdf = expf(-0.5 * xi * xi) * INV_SQRT2PI
        dx[i] = g[i] * (cdf + xi * pdf)


def softmax_rows(const float[:, ::1] x, float[:, ::1] out):
    cdef Py_ssize_t i, j, n = x.shape[0], k = x.shape[1]
    cdef float m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            e = expf(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s


def softmax_rows_bwd(const float[:, ::1] p, const float[:, ::1] g,
                     float[:, ::1] dx):
    cdef Py_ssize_t i, j, n = p.shape[0], k = p.shape[1]
    cdef float dot
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * p[i, j]
        for j in range(k):
            dx[i, j] = p[i, j] * (g[i, j] - dot)


def convex_fwd(const float[:, :, :, ::1] patch,
               const float[:, :, :, :, ::1] wl,
               float[:, :, :, ::1] out,
               float[:, :, :, :, ::1] wsoft):
    """out[b,i,j,p] = sum_k softmax(wl)[b,i,j,p,k] * patch[b,i+di,j+dj,p]."""
    cdef Py_ssize_t b = patch.shape[0], h = patch.shape[1]
    cdef Py_ssize_t w = patch.shape[2], pp = patch.shape[3]
    cdef Py_ssize_t bi, i, j, p, k, ni, nj
    cdef float m, s, e, acc, pv
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for p in range(pp):
                    m = wl[bi, i, j, p, 0]
                    for k in range(1, 9):
                        if wl[bi, i, j, p, k] > m:
                            m = wl[bi, i, j, p, k]
                    s = 0.0
                    for k in range(9):
                        e = expf(wl[bi, i, j, p, k] - m)
                        wsoft[bi, i, j, p, k] = e
                        s += e
                    acc = 0.0
                    for k in range(9):
                        wsoft[bi, i, j, p, k] /= s
                        ni = i + k // 3 - 1
                        nj = j + k % 3 - 1
                        if 0 <= ni < h and 0 <= nj < w:
                            pv = patch[bi, ni, nj, p]
                            acc += wsoft[bi, i, j, p, k] * pv
                    out[bi, i, j, p] = acc


def convex_bwd(const float[:, :, :, ::1] g,
               const float[:, :, :, :, ::1] wsoft,
               const float[:, :, :, ::1] patch,
               float[:, :, :, ::1] dpatch,
               float[:, :, :, :, ::1] dwl):
    cdef Py_ssize_t b = patch.shape[0], h = patch.shape[1]
    cdef Py_ssize_t w = patch.shape[2], pp = patch.shape[3]
    cdef Py_ssize_t bi, i, j, p, k, ni, nj
    cdef bint need_dp = dpatch is not None
    cdef bint need_dw = dwl is not None
    cdef float gv, dot, nv
    cdef float dws[9]
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for p in range(pp):
                    gv = g[bi, i, j, p]
                    dot = 0.0
                    for k in range(9):
                        ni = i + k // 3 - 1
                        nj = j + k % 3 - 1
                        nv = 0.0
                        if 0 <= ni < h and 0 <= nj < w:
                            nv = patch[bi, ni, nj, p]
                            if need_dp:
                                dpatch[bi, ni, nj, p] += gv * wsoft[bi, i, j, p, k]
                        dws[k] = gv * nv
                        dot += dws[k] * wsoft[bi, i, j, p, k]
                    if need_dw:
                        for k in range(9):
                            dwl[bi, i, j, p, k] = wsoft[bi, i, j, p, k] * (dws[k] - dot)


def adam_step(float[::1] p, const float[::1] g, float[::1] m, float[::1] v,
              float lr, float b1, float b2, float eps, float b1c, float b2c):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float mi, vi
    for i in range(n):
        mi = b1 * m[i] + (1.0 - b1) * g[i]
        vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / b1c) / (sqrtf(vi / b2c) + eps)
