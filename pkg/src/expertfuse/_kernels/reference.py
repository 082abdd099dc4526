"""Pure numpy kernels: the fallback backend.

``expertfuse._kernels`` re-exports the compiled Cython twins of these
functions when the extension is importable and this module otherwise.
Both implementations follow the same contract and are cross-checked by
the test suite; the benchmark script compares their speed.
"""

import numpy as np


def vlad_forward(x, clusters, assign_w, assign_b, eps):
    """Aggregates a feature sequence into a normalized VLAD descriptor.

    Soft-assigns every input row to ``K + G`` learned anchors, accumulates
    residuals against the K real centroids only (the G ghost columns soak
    up assignment mass without contributing output), normalizes each
    cluster block, and normalizes the flattened result.

    Args:
        x: (T, d) input rows, float64.
        clusters: (K, d) real centroids.
        assign_w: (d, K + G) soft-assignment weights.
        assign_b: (K + G,) soft-assignment biases.
        eps: norm guard for both normalization stages.

    Returns:
        (out, cache): the (K * d,) descriptor and the intermediates
        required by ``vlad_backward``.
    """
    k = clusters.shape[0]
    logits = x @ assign_w + assign_b
    logits -= logits.max(axis=1, keepdims=True)
    assign = np.exp(logits)
    assign /= assign.sum(axis=1, keepdims=True)
    real = assign[:, :k]
    mass = real.sum(axis=0)
    residual = real.T @ x - mass[:, None] * clusters
    row_norms = np.sqrt((residual * residual).sum(axis=1))
    intra = residual / np.maximum(row_norms, eps)[:, None]
    flat_norm = float(np.sqrt((intra * intra).sum()))
    out = (intra / max(flat_norm, eps)).reshape(-1)
    cache = (x, clusters, assign_w, assign, residual, intra, row_norms, flat_norm, eps)
    return out, cache


def vlad_backward(cache, grad_out):
    """Gradients of ``vlad_forward`` for inputs, centroids, weights, biases."""
    x, clusters, assign_w, assign, residual, intra, row_norms, flat_norm, eps = cache
    k, d = clusters.shape
    real = assign[:, :k]
    g = grad_out.reshape(k, d)

    # Whole-vector normalization: out = y / max(|y|, eps).
    if flat_norm >= eps:
        scale = 1.0 / flat_norm
        unit = intra * scale
        g_intra = (g - unit * float((unit * g).sum())) * scale
    else:
        g_intra = g / eps

    # Per-cluster intra-normalization, guarded rows pass the gradient through.
    safe = np.maximum(row_norms, eps)[:, None]
    inner = (intra * g_intra).sum(axis=1, keepdims=True)
    g_residual = np.where(row_norms[:, None] >= eps, g_intra - intra * inner, g_intra) / safe

    # residual = real^T x - mass[:, None] * clusters
    g_real = x @ g_residual.T
    g_x = real @ g_residual
    mass = real.sum(axis=0)
    g_clusters = -mass[:, None] * g_residual
    g_real += -(g_residual * clusters).sum(axis=1)[None, :]

    # Row softmax over the K + G assignment logits.
    g_assign = np.concatenate(
        [g_real, np.zeros((x.shape[0], assign.shape[1] - k))], axis=1
    )
    dot = (assign * g_assign).sum(axis=1, keepdims=True)
    g_logits = assign * (g_assign - dot)
    g_x += g_logits @ assign_w.T
    g_w = x.T @ g_logits
    g_b = g_logits.sum(axis=0)
    return g_x, g_clusters, g_w, g_b
