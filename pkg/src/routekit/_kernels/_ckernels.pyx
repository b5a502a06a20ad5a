# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: sparse MLP forward/backward, linear-head
forward/backward, the Adam-with-decoupled-decay update, and the brute-force
cosine argmax scan. Mirrors routekit._kernels._pykernels exactly."""

from libc.math cimport exp, sqrt

import numpy as np

BACKEND = "cython"


cdef void _softmax_inplace(double[::1] z) nogil:
    cdef Py_ssize_t k, n = z.shape[0]
    cdef double zmax = z[0]
    cdef double total = 0.0
    for k in range(1, n):
        if z[k] > zmax:
            zmax = z[k]
    for k in range(n):
        z[k] = exp(z[k] - zmax)
        total += z[k]
    for k in range(n):
        z[k] /= total


def softmax(z):
    """Stable softmax of a 1-D float64 vector (returns a new array)."""
    out = np.array(z, dtype=np.float64, copy=True)
    _softmax_inplace(out)
    return out


def mlp_forward(double[:, ::1] w1, double[::1] b1,
                double[:, ::1] w2, double[::1] b2,
                long[::1] idx, double[::1] val):
    """Forward pass for one sparse sample: h = relu(w1[idx]^T val + b1),
    y = softmax(h^T w2 + b2). Returns (h, y)."""
    cdef Py_ssize_t m = b1.shape[0]
    cdef Py_ssize_t e = b2.shape[0]
    cdef Py_ssize_t nnz = idx.shape[0]
    h_arr = np.empty(m, dtype=np.float64)
    y_arr = np.empty(e, dtype=np.float64)
    cdef double[::1] h = h_arr
    cdef double[::1] y = y_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, v
    with nogil:
        for j in range(m):
            h[j] = b1[j]
        for i in range(nnz):
            v = val[i]
            for j in range(m):
                h[j] += v * w1[idx[i], j]
        for j in range(m):
            if h[j] < 0.0:
                h[j] = 0.0
        for k in range(e):
            acc = b2[k]
            for j in range(m):
                acc += h[j] * w2[j, k]
            y[k] = acc
        _softmax_inplace(y)
    return h_arr, y_arr


def mlp_backward(double[:, ::1] w2, double[::1] h, double[::1] y,
                 long[::1] idx, double[::1] val,
                 double[::1] target, double weight, double scale,
                 double[:, ::1] gw1, double[::1] gb1,
                 double[:, ::1] gw2, double[::1] gb2):
    """Accumulate scale * weight-scaled gradients of the soft cross-entropy
    for one sample into gw1/gb1/gw2/gb2. Forward results (h, y) are reused."""
    cdef Py_ssize_t m = h.shape[0]
    cdef Py_ssize_t e = y.shape[0]
    cdef Py_ssize_t nnz = idx.shape[0]
    dz2_arr = np.empty(e, dtype=np.float64)
    dz1_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] dz2 = dz2_arr
    cdef double[::1] dz1 = dz1_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, v
    with nogil:
        for k in range(e):
            dz2[k] = weight * (y[k] - target[k])
            gb2[k] += scale * dz2[k]
        for j in range(m):
            if h[j] > 0.0:
                acc = 0.0
                for k in range(e):
                    acc += w2[j, k] * dz2[k]
                    gw2[j, k] += scale * h[j] * dz2[k]
                dz1[j] = acc
                gb1[j] += scale * acc
            else:
                dz1[j] = 0.0
                for k in range(e):
                    gw2[j, k] += scale * h[j] * dz2[k]
        for i in range(nnz):
            v = scale * val[i]
            for j in range(m):
                gw1[idx[i], j] += v * dz1[j]


def head_forward(double[:, ::1] w, double[::1] b, double[::1] x):
    """y = softmax(x^T w + b) for a dense sample."""
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t e = b.shape[0]
    y_arr = np.empty(e, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef Py_ssize_t i, k
    cdef double acc
    with nogil:
        for k in range(e):
            acc = b[k]
            for i in range(d):
                acc += x[i] * w[i, k]
            y[k] = acc
        _softmax_inplace(y)
    return y_arr


def head_backward(double[::1] x, double[::1] y,
                  double[::1] target, double weight, double scale,
                  double[:, ::1] gw, double[::1] gb):
    """Accumulate gradients for one dense sample into gw/gb."""
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t e = y.shape[0]
    cdef Py_ssize_t i, k
    cdef double dzk
    with nogil:
        for k in range(e):
            dzk = weight * (y[k] - target[k])
            gb[k] += scale * dzk
            for i in range(d):
                gw[i, k] += scale * x[i] * dzk
    return None


def adam_update(double[::1] p, double[::1] g,
                double[::1] m, double[::1] v, long step,
                double lr, double beta1, double beta2,
                double eps, double weight_decay):
    """One Adam step with bias correction and decoupled weight decay,
    applied in place to the flat parameter view p."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef double shrink = 1.0 - lr * weight_decay
    cdef double mhat, vhat
    with nogil:
        for i in range(n):
            p[i] *= shrink
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / c1
            vhat = v[i] / c2
            p[i] -= lr * mhat / (sqrt(vhat) + eps)
    return None


def argmax_cosine(double[:, ::1] mat, double[::1] norms, double[::1] q):
    """Index and similarity of the row of mat most cosine-similar to q.

    Zero-norm rows score 0. Returns (-1, 0.0) when q itself has zero norm.
    Ties keep the earliest row, so the caller controls tie-breaking by
    row order."""
    cdef Py_ssize_t n = mat.shape[0]
    cdef Py_ssize_t d = mat.shape[1]
    cdef Py_ssize_t i, j
    cdef double qnorm = 0.0, dot, sim
    cdef double best = -2.0
    cdef Py_ssize_t best_i = -1
    with nogil:
        for j in range(d):
            qnorm += q[j] * q[j]
        qnorm = sqrt(qnorm)
    if qnorm == 0.0:
        return -1, 0.0
    with nogil:
        for i in range(n):
            if norms[i] == 0.0:
                sim = 0.0
            else:
                dot = 0.0
                for j in range(d):
                    dot += mat[i, j] * q[j]
                sim = dot / (norms[i] * qnorm)
            if sim > best:
                best = sim
                best_i = i
    return best_i, best
