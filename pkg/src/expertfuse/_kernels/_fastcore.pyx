# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled aggregation kernels.

Same contract and cache layout as ``reference.py``.  The assignment
weights are transposed on entry so every inner loop runs at unit stride,
and dot products accumulate in four independent lanes so the compiler can
vectorize them; partial sums may therefore reduce in a different order
than numpy's, which is why cross-backend tests compare with tolerances
instead of bit equality.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


cdef inline double _dot(const double[::1] a, const double[::1] b) noexcept nogil:
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i = 0
    while i + 4 <= n:
        s0 += a[i] * b[i]
        s1 += a[i + 1] * b[i + 1]
        s2 += a[i + 2] * b[i + 2]
        s3 += a[i + 3] * b[i + 3]
        i += 4
    while i < n:
        s0 += a[i] * b[i]
        i += 1
    return (s0 + s1) + (s2 + s3)


def vlad_forward(x, clusters, assign_w, assign_b, eps):
    """Aggregates a feature sequence into a normalized VLAD descriptor."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    clusters = np.ascontiguousarray(clusters, dtype=np.float64)
    assign_w = np.ascontiguousarray(assign_w, dtype=np.float64)
    assign_b = np.ascontiguousarray(assign_b, dtype=np.float64)

    cdef double[:, ::1] xv = x
    cdef double[:, ::1] cv = clusters
    cdef double[:, ::1] wt = np.ascontiguousarray(assign_w.T)
    cdef double[::1] bv = assign_b
    cdef Py_ssize_t t_len = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    cdef Py_ssize_t k = cv.shape[0]
    cdef Py_ssize_t kg = wt.shape[0]
    cdef double guard = eps

    assign_arr = np.empty((t_len, kg), dtype=np.float64)
    residual_arr = np.empty((k, d), dtype=np.float64)
    intra_arr = np.empty((k, d), dtype=np.float64)
    row_norms_arr = np.empty(k, dtype=np.float64)
    out_arr = np.empty(k * d, dtype=np.float64)
    cdef double[:, ::1] assign = assign_arr
    cdef double[:, ::1] residual = residual_arr
    cdef double[:, ::1] intra = intra_arr
    cdef double[::1] row_norms = row_norms_arr
    cdef double[::1] out = out_arr

    cdef Py_ssize_t t, i, j
    cdef double acc, xi, row_max, row_sum, norm, flat_norm, scale

    # Row softmax over the K + G assignment logits.
    for t in range(t_len):
        row_max = -1e308
        for j in range(kg):
            acc = bv[j] + _dot(wt[j], xv[t])
            assign[t, j] = acc
            if acc > row_max:
                row_max = acc
        row_sum = 0.0
        for j in range(kg):
            acc = exp(assign[t, j] - row_max)
            assign[t, j] = acc
            row_sum += acc
        for j in range(kg):
            assign[t, j] /= row_sum

    # Residuals against the K real centroids; ghost columns only ate mass.
    for j in range(k):
        acc = 0.0
        for t in range(t_len):
            acc += assign[t, j]
        for i in range(d):
            residual[j, i] = -acc * cv[j, i]
        for t in range(t_len):
            xi = assign[t, j]
            for i in range(d):
                residual[j, i] += xi * xv[t, i]

    flat_norm = 0.0
    for j in range(k):
        norm = sqrt(_dot(residual[j], residual[j]))
        row_norms[j] = norm
        if norm < guard:
            norm = guard
        for i in range(d):
            intra[j, i] = residual[j, i] / norm
        flat_norm += _dot(intra[j], intra[j])
    flat_norm = sqrt(flat_norm)

    scale = flat_norm if flat_norm > guard else guard
    for j in range(k):
        for i in range(d):
            out[j * d + i] = intra[j, i] / scale

    cache = (x, clusters, assign_w, assign_arr, residual_arr, intra_arr,
             row_norms_arr, float(flat_norm), guard)
    return out_arr, cache


def vlad_backward(cache, grad_out):
    """Gradients of ``vlad_forward`` for inputs, centroids, weights, biases."""
    x, clusters, assign_w, assign_arr, residual_arr, intra_arr, \
        row_norms_arr, flat_norm_f, eps = cache
    grad_arr = np.ascontiguousarray(grad_out, dtype=np.float64).reshape(
        clusters.shape[0], clusters.shape[1])

    cdef double[:, ::1] xv = x
    cdef double[:, ::1] cv = clusters
    cdef double[:, ::1] wt = np.ascontiguousarray(assign_w.T)
    cdef double[:, ::1] assign = assign_arr
    cdef double[:, ::1] intra = intra_arr
    cdef double[::1] row_norms = row_norms_arr
    cdef double[:, ::1] gv = grad_arr
    cdef Py_ssize_t t_len = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    cdef Py_ssize_t k = cv.shape[0]
    cdef Py_ssize_t kg = wt.shape[0]
    cdef double guard = eps
    cdef double flat_norm = flat_norm_f

    g_intra_arr = np.empty((k, d), dtype=np.float64)
    g_residual_arr = np.empty((k, d), dtype=np.float64)
    g_x_arr = np.zeros((t_len, d), dtype=np.float64)
    g_clusters_arr = np.empty((k, d), dtype=np.float64)
    g_wt_arr = np.zeros((kg, d), dtype=np.float64)
    g_b_arr = np.zeros(kg, dtype=np.float64)
    g_logits_arr = np.empty((t_len, kg), dtype=np.float64)
    cdef double[:, ::1] g_intra = g_intra_arr
    cdef double[:, ::1] g_residual = g_residual_arr
    cdef double[:, ::1] g_x = g_x_arr
    cdef double[:, ::1] g_clusters = g_clusters_arr
    cdef double[:, ::1] g_wt = g_wt_arr
    cdef double[::1] g_b = g_b_arr
    cdef double[:, ::1] g_logits = g_logits_arr

    cdef Py_ssize_t t, i, j
    cdef double acc, gl, scale, inner, safe, mass_j, cdot, dot

    # Whole-vector normalization: out = y / max(|y|, eps).
    if flat_norm >= guard:
        scale = 1.0 / flat_norm
        acc = 0.0
        for j in range(k):
            acc += _dot(intra[j], gv[j])
        acc *= scale
        for j in range(k):
            for i in range(d):
                g_intra[j, i] = (gv[j, i] - intra[j, i] * acc) * scale
    else:
        for j in range(k):
            for i in range(d):
                g_intra[j, i] = gv[j, i] / guard

    # Per-cluster intra-normalization, guarded rows pass the gradient through.
    for j in range(k):
        safe = row_norms[j] if row_norms[j] > guard else guard
        if row_norms[j] >= guard:
            inner = _dot(intra[j], g_intra[j])
            for i in range(d):
                g_residual[j, i] = (g_intra[j, i] - intra[j, i] * inner) / safe
        else:
            for i in range(d):
                g_residual[j, i] = g_intra[j, i] / safe

    # residual = real^T x - mass[:, None] * clusters
    for j in range(k):
        mass_j = 0.0
        for t in range(t_len):
            mass_j += assign[t, j]
        cdot = _dot(g_residual[j], cv[j])
        for i in range(d):
            g_clusters[j, i] = -mass_j * g_residual[j, i]
        for t in range(t_len):
            g_logits[t, j] = _dot(xv[t], g_residual[j]) - cdot
            gl = assign[t, j]
            for i in range(d):
                g_x[t, i] += gl * g_residual[j, i]
    for t in range(t_len):
        for j in range(k, kg):
            g_logits[t, j] = 0.0

    # Row softmax backprop, then the three linear-map gradients.
    for t in range(t_len):
        dot = 0.0
        for j in range(kg):
            dot += assign[t, j] * g_logits[t, j]
        for j in range(kg):
            gl = assign[t, j] * (g_logits[t, j] - dot)
            g_logits[t, j] = gl
            g_b[j] += gl
            for i in range(d):
                g_x[t, i] += gl * wt[j, i]
                g_wt[j, i] += gl * xv[t, i]
    return g_x_arr, g_clusters_arr, np.ascontiguousarray(g_wt_arr.T), g_b_arr
