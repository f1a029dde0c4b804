# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise constraint kernels.

Same contracts and tie-breaks as ``lace._pykernels``; loops replace the
``(B, L, L, 6)`` temporaries of the numpy version.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, log1p, exp, sqrt, INFINITY

cnp.import_array()

cdef double G_CLAMP = 1.0 - 1e-8


cdef inline void _edges(double[:, :] box, Py_ssize_t i, double* e) noexcept nogil:
    cdef double cx = box[i, 0], cy = box[i, 1], w = box[i, 2], h = box[i, 3]
    e[0] = cx - w / 2
    e[1] = cx
    e[2] = cx + w / 2
    e[3] = cy - h / 2
    e[4] = cy
    e[5] = cy + h / 2


cdef inline void _edge_grad_to_box(double* ge, double* gb) noexcept nogil:
    gb[0] += ge[0] + ge[1] + ge[2]
    gb[1] += ge[3] + ge[4] + ge[5]
    gb[2] += 0.5 * (ge[2] - ge[0])
    gb[3] += 0.5 * (ge[5] - ge[3])


cdef inline double _sign(double x) noexcept nogil:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


def local_alignment(boxes, n_real):
    cdef double[:, :, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef long[::1] nr = np.ascontiguousarray(n_real, dtype=np.int64)
    cdef Py_ssize_t B = bx.shape[0], L = bx.shape[1]
    loss_arr = np.zeros(B)
    grad_arr = np.zeros((B, L, 4))
    cdef double[::1] loss = loss_arr
    cdef double[:, :, ::1] grad = grad_arr
    cdef double[:, :, ::1] E = np.empty((B, L, 6))
    cdef Py_ssize_t b, i, j, k, n, kbest, jbest, jk
    cdef double d, best, dk, s, dg, cl
    cdef double ge[6]
    cdef double tmp[6]
    with nogil:
        for b in range(B):
            n = nr[b]
            for i in range(n):
                _edges(bx[b], i, tmp)
                for k in range(6):
                    E[b, i, k] = tmp[k]
            if n < 2:
                continue
            for i in range(n):
                best = INFINITY
                kbest = 0
                jbest = 0
                for k in range(6):
                    dk = INFINITY
                    jk = 0
                    for j in range(n):
                        if j == i:
                            continue
                        d = fabs(E[b, i, k] - E[b, j, k])
                        if d < dk:
                            dk = d
                            jk = j
                    if dk < best:
                        best = dk
                        kbest = k
                        jbest = jk
                cl = best if best < G_CLAMP else G_CLAMP
                loss[b] += -log1p(-cl)
                if best < G_CLAMP:
                    dg = 1.0 / (1.0 - cl)
                    s = _sign(E[b, i, kbest] - E[b, jbest, kbest]) * dg
                    for k in range(6):
                        ge[k] = 0.0
                    ge[kbest] = s
                    _edge_grad_to_box(ge, &grad[b, i, 0])
                    ge[kbest] = -s
                    _edge_grad_to_box(ge, &grad[b, jbest, 0])
    return loss_arr, grad_arr


def global_alignment(boxes, mask):
    cdef double[:, :, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef double[:, :, :, ::1] M = np.ascontiguousarray(mask, dtype=np.float64)
    cdef Py_ssize_t B = bx.shape[0], L = bx.shape[1]
    loss_arr = np.zeros(B)
    grad_arr = np.zeros((B, L, 4))
    cdef double[::1] loss = loss_arr
    cdef double[:, :, ::1] grad = grad_arr
    cdef double[:, ::1] E = np.empty((L, 6))
    cdef double[:, ::1] GE = np.empty((L, 6))
    cdef double msum[6]
    cdef double acc[6]
    cdef Py_ssize_t b, i, j, k
    cdef double s, cl, dls, m, sg, scale
    cdef double tmp[6]
    with nogil:
        for b in range(B):
            for i in range(L):
                _edges(bx[b], i, tmp)
                for k in range(6):
                    E[i, k] = tmp[k]
                    GE[i, k] = 0.0
            s = 0.0
            for k in range(6):
                msum[k] = 0.0
                acc[k] = 0.0
                for i in range(L):
                    for j in range(L):
                        m = M[b, k, i, j]
                        if m != 0.0:
                            msum[k] += m
                            acc[k] += m * fabs(E[i, k] - E[j, k])
                if msum[k] > 0:
                    s += acc[k] / msum[k]
            s /= 6.0
            cl = s if s < G_CLAMP else G_CLAMP
            if cl < 0:
                cl = 0.0
            loss[b] = -log1p(-cl)
            if s >= G_CLAMP:
                continue
            dls = 1.0 / (1.0 - cl)
            for k in range(6):
                if msum[k] <= 0:
                    continue
                scale = dls / (6.0 * msum[k])
                for i in range(L):
                    for j in range(L):
                        m = M[b, k, i, j]
                        if m != 0.0:
                            sg = m * _sign(E[i, k] - E[j, k]) * scale
                            GE[i, k] += sg
                            GE[j, k] -= sg
            for i in range(L):
                for k in range(6):
                    tmp[k] = GE[i, k]
                _edge_grad_to_box(tmp, &grad[b, i, 0])
    return loss_arr, grad_arr


def overlap(boxes, n_real):
    cdef double[:, :, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef long[::1] nr = np.ascontiguousarray(n_real, dtype=np.int64)
    cdef Py_ssize_t B = bx.shape[0], L = bx.shape[1]
    loss_arr = np.zeros(B)
    grad_arr = np.zeros((B, L, 4))
    cdef double[::1] loss = loss_arr
    cdef double[:, :, ::1] g = grad_arr
    cdef Py_ssize_t b, i, j, n
    cdef double norm, li, ri, ti, bi, lj, rj, tj, bj, iw, ih, inter, ai, aj, union, O
    cdef double dx, dy, dist, D, dO_dI, dO_da, d_iw, d_ih, gx, gy, total
    cdef bint r_sel, l_sel, b_sel, t_sel
    with nogil:
        for b in range(B):
            n = nr[b]
            if n < 2:
                continue
            norm = 1.0 / (n * (n - 1))
            total = 0.0
            for i in range(n):
                li = bx[b, i, 0] - bx[b, i, 2] / 2
                ri = bx[b, i, 0] + bx[b, i, 2] / 2
                ti = bx[b, i, 1] - bx[b, i, 3] / 2
                bi = bx[b, i, 1] + bx[b, i, 3] / 2
                ai = (bx[b, i, 2] if bx[b, i, 2] > 0 else 0.0) * (bx[b, i, 3] if bx[b, i, 3] > 0 else 0.0)
                for j in range(n):
                    if j == i:
                        continue
                    lj = bx[b, j, 0] - bx[b, j, 2] / 2
                    rj = bx[b, j, 0] + bx[b, j, 2] / 2
                    tj = bx[b, j, 1] - bx[b, j, 3] / 2
                    bj = bx[b, j, 1] + bx[b, j, 3] / 2
                    r_sel = ri <= rj
                    l_sel = li >= lj
                    b_sel = bi <= bj
                    t_sel = ti >= tj
                    iw = (ri if r_sel else rj) - (li if l_sel else lj)
                    ih = (bi if b_sel else bj) - (ti if t_sel else tj)
                    if iw <= 0 or ih <= 0:
                        continue
                    inter = iw * ih
                    aj = (bx[b, j, 2] if bx[b, j, 2] > 0 else 0.0) * (bx[b, j, 3] if bx[b, j, 3] > 0 else 0.0)
                    union = ai + aj - inter
                    if union <= 0:
                        continue
                    O = inter / union
                    dx = bx[b, i, 0] - bx[b, j, 0]
                    dy = bx[b, i, 1] - bx[b, j, 1]
                    dist = sqrt(dx * dx + dy * dy)
                    D = exp(-dist)
                    total += O + D

                    dO_dI = (1.0 / union + inter / (union * union)) * norm
                    dO_da = -inter / (union * union) * norm
                    d_iw = dO_dI * ih
                    d_ih = dO_dI * iw
                    # x extent
                    if r_sel:
                        g[b, i, 0] += d_iw
                        g[b, i, 2] += d_iw / 2
                    else:
                        g[b, j, 0] += d_iw
                        g[b, j, 2] += d_iw / 2
                    if l_sel:
                        g[b, i, 0] -= d_iw
                        g[b, i, 2] += d_iw / 2
                    else:
                        g[b, j, 0] -= d_iw
                        g[b, j, 2] += d_iw / 2
                    # y extent
                    if b_sel:
                        g[b, i, 1] += d_ih
                        g[b, i, 3] += d_ih / 2
                    else:
                        g[b, j, 1] += d_ih
                        g[b, j, 3] += d_ih / 2
                    if t_sel:
                        g[b, i, 1] -= d_ih
                        g[b, i, 3] += d_ih / 2
                    else:
                        g[b, j, 1] -= d_ih
                        g[b, j, 3] += d_ih / 2
                    # areas
                    if bx[b, i, 2] > 0 and bx[b, i, 3] > 0:
                        g[b, i, 2] += dO_da * bx[b, i, 3]
                        g[b, i, 3] += dO_da * bx[b, i, 2]
                    if bx[b, j, 2] > 0 and bx[b, j, 3] > 0:
                        g[b, j, 2] += dO_da * bx[b, j, 3]
                        g[b, j, 3] += dO_da * bx[b, j, 2]
                    # center distance
                    if dist > 0:
                        gx = -D / dist * dx * norm
                        gy = -D / dist * dy * norm
                        g[b, i, 0] += gx
                        g[b, i, 1] += gy
                        g[b, j, 0] -= gx
                        g[b, j, 1] -= gy
            loss[b] = total * norm
    return loss_arr, grad_arr


def iou_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cdef double[:, ::1] Bx = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = A.shape[0], m = Bx.shape[0], i, j
    out_arr = np.zeros((n, m))
    cdef double[:, ::1] out = out_arr
    cdef double iw, ih, inter, aa, ab, union
    with nogil:
        for i in range(n):
            aa = (A[i, 2] if A[i, 2] > 0 else 0.0) * (A[i, 3] if A[i, 3] > 0 else 0.0)
            for j in range(m):
                iw = min(A[i, 0] + A[i, 2] / 2, Bx[j, 0] + Bx[j, 2] / 2) - max(A[i, 0] - A[i, 2] / 2, Bx[j, 0] - Bx[j, 2] / 2)
                ih = min(A[i, 1] + A[i, 3] / 2, Bx[j, 1] + Bx[j, 3] / 2) - max(A[i, 1] - A[i, 3] / 2, Bx[j, 1] - Bx[j, 3] / 2)
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                ab = (Bx[j, 2] if Bx[j, 2] > 0 else 0.0) * (Bx[j, 3] if Bx[j, 3] > 0 else 0.0)
                union = aa + ab - inter
                if union > 0:
                    out[i, j] = inter / union
    return out_arr
