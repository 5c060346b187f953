# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attack kernels for GAM models ``z = beta^T phi(x)``.

Feature map: ``phi(x) = act(W x + b)`` with ``act`` ReLU or identity.
Loss kinds: 0 cross-entropy, 1 margin, 2 linear (``-w . z``).
Norm kinds: 0 l-inf, 1 l2.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport exp, log, sqrt
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

BACKEND = "cython"


cdef inline double _loss_grad(const double* x, const double[:, ::1] W, const double[::1] b,
                              bint relu, const double[:, ::1] beta, int kind, long label,
                              const double* lin_w, double* pre, double* z, double* dz,
                              double* gphi, double* grad) noexcept nogil:
    # Row-major (p, d) W is column-major (d, p) to BLAS, likewise beta.
    cdef int p = <int> W.shape[0], d = <int> W.shape[1], C = <int> beta.shape[1]
    cdef int one = 1, i, k, jstar
    cdef double done = 1.0, dzero = 0.0
    cdef double zmax, lse, loss, best
    cdef double* Wp = <double*> &W[0, 0]
    cdef double* Bp = <double*> &beta[0, 0]
    cdef char trans = b'T', notrans = b'N'
    # pre = W x + b; gphi holds phi(pre) for the forward pass
    dgemv(&trans, &d, &p, &done, Wp, &d, <double*> x, &one, &dzero, pre, &one)
    for k in range(p):
        pre[k] = pre[k] + b[k]
        gphi[k] = 0.0 if (relu and pre[k] < 0.0) else pre[k]
    # z = beta^T phi
    dgemv(&notrans, &C, &p, &done, Bp, &C, gphi, &one, &dzero, z, &one)
    if kind == 0:
        zmax = z[0]
        for i in range(1, C):
            if z[i] > zmax:
                zmax = z[i]
        lse = 0.0
        for i in range(C):
            dz[i] = exp(z[i] - zmax)
            lse = lse + dz[i]
        for i in range(C):
            dz[i] = dz[i] / lse
        dz[label] = dz[label] - 1.0
        loss = zmax + log(lse) - z[label]
    elif kind == 1:
        jstar = -1
        best = 0.0
        for i in range(C):
            if i != label and (jstar < 0 or z[i] > best):
                jstar = i
                best = z[i]
        for i in range(C):
            dz[i] = 0.0
        dz[jstar] = 1.0
        dz[label] = -1.0
        loss = best - z[label]
    else:
        loss = 0.0
        for i in range(C):
            dz[i] = -lin_w[i]
            loss = loss - lin_w[i] * z[i]
    # gphi = beta dz, masked by the ReLU derivative; grad = W^T gphi
    dgemv(&trans, &C, &p, &done, Bp, &C, dz, &one, &dzero, gphi, &one)
    if relu:
        for k in range(p):
            if pre[k] <= 0.0:
                gphi[k] = 0.0
    dgemv(&notrans, &d, &p, &done, Wp, &d, gphi, &one, &dzero, grad, &one)
    return loss


def loss_and_grad(double[:, ::1] X, double[:, ::1] W, double[::1] b, bint relu,
                  double[:, ::1] beta, int kind, long[::1] labels, double[:, ::1] lin_w):
    cdef Py_ssize_t m = X.shape[0], d = X.shape[1], p = W.shape[0], C = beta.shape[1]
    cdef Py_ssize_t s
    loss_arr = np.empty(m)
    grad_arr = np.empty((m, d))
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double* pre = <double*> malloc(p * sizeof(double))
    cdef double* gphi = <double*> malloc(p * sizeof(double))
    cdef double* z = <double*> malloc(C * sizeof(double))
    cdef double* dz = <double*> malloc(C * sizeof(double))
    try:
        for s in range(m):
            loss[s] = _loss_grad(&X[s, 0], W, b, relu, beta, kind, labels[s], &lin_w[s, 0],
                                 pre, z, dz, gphi, &grad[s, 0])
    finally:
        free(pre); free(gphi); free(z); free(dz)
    return loss_arr, grad_arr


def pgd(double[:, ::1] X0, double[:, ::1] delta0, double[:, ::1] W, double[::1] b, bint relu,
        double[:, ::1] beta, int kind, long[::1] labels, double[:, ::1] lin_w,
        double eps, double step, int iters, int norm_kind,
        bint use_clip, double clip_lo, double clip_hi, int n_threads=1):
    cdef Py_ssize_t m = X0.shape[0], d = X0.shape[1], p = W.shape[0], C = beta.shape[1]
    cdef Py_ssize_t s, j, it
    cdef int nt = n_threads if n_threads > 0 else 1
    xadv_arr = np.empty((m, d))
    best_arr = np.empty(m)
    trace_arr = np.empty((m, iters + 1))
    zero_arr = np.zeros(m, dtype=np.uint8)
    cdef double[:, ::1] xadv = xadv_arr
    cdef double[::1] bestv = best_arr
    cdef double[:, ::1] trace = trace_arr
    cdef unsigned char[::1] zero = zero_arr
    cdef double* buf
    cdef double* pre
    cdef double* z
    cdef double* dz
    cdef double* gphi
    cdef double* grad
    cdef double* delta
    cdef double* xc
    cdef double loss, best, nrm, scale, v
    with nogil, parallel(num_threads=nt):
        buf = <double*> malloc((3 * p + 2 * C + 3 * d) * sizeof(double))
        pre = buf
        gphi = buf + p
        z = buf + 2 * p
        dz = buf + 2 * p + C
        grad = buf + 2 * p + 2 * C
        delta = grad + d
        xc = delta + d
        for s in prange(m, schedule="static"):
            for j in range(d):
                delta[j] = delta0[s, j]
                v = X0[s, j] + delta[j]
                if use_clip:
                    if v < clip_lo:
                        v = clip_lo
                    elif v > clip_hi:
                        v = clip_hi
                    delta[j] = v - X0[s, j]
                xc[j] = v
            best = 0.0
            for it in range(iters + 1):
                loss = _loss_grad(xc, W, b, relu, beta, kind, labels[s], &lin_w[s, 0],
                                  pre, z, dz, gphi, grad)
                if it == 0 or loss > best:
                    best = loss
                    for j in range(d):
                        xadv[s, j] = xc[j]
                trace[s, it] = best
                if it == iters:
                    break
                nrm = 0.0
                for j in range(d):
                    nrm = nrm + grad[j] * grad[j]
                if nrm == 0.0:
                    if it == 0:
                        zero[s] = 1
                    # a stalled iterate never moves again; fill the rest of the trace
                    for j in range(it + 1, iters + 1):
                        trace[s, j] = best
                    break
                if norm_kind == 0:
                    for j in range(d):
                        v = grad[j]
                        if v > 0.0:
                            delta[j] = delta[j] + step
                        elif v < 0.0:
                            delta[j] = delta[j] - step
                        if delta[j] > eps:
                            delta[j] = eps
                        elif delta[j] < -eps:
                            delta[j] = -eps
                else:
                    scale = step / sqrt(nrm)
                    for j in range(d):
                        delta[j] = delta[j] + scale * grad[j]
                    nrm = 0.0
                    for j in range(d):
                        nrm = nrm + delta[j] * delta[j]
                    nrm = sqrt(nrm)
                    if nrm > eps:
                        scale = eps / nrm
                        for j in range(d):
                            delta[j] = delta[j] * scale
                for j in range(d):
                    v = X0[s, j] + delta[j]
                    if use_clip:
                        if v < clip_lo:
                            v = clip_lo
                        elif v > clip_hi:
                            v = clip_hi
                        delta[j] = v - X0[s, j]
                    xc[j] = v
            bestv[s] = best
        free(buf)
    return xadv_arr, best_arr, trace_arr, zero_arr
