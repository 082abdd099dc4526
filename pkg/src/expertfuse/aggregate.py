"""Temporal aggregation of variable-length feature sequences.

Two aggregators cover the expert streams: plain mean pooling for features
that are already stable across a clip, and learnable soft-assignment
pooling (NetVLAD) for streams whose per-frame content varies, such as
word vectors or audio frames.  Both map a (T, d) sequence to a fixed
vector, are order-invariant over rows, and differentiate through the
tape.  The NetVLAD forward/backward pair runs on the selected kernel
backend (compiled extension or numpy fallback).
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import EmptySequence, ShapeMismatch
from .tensor import Tensor, _accum, _make, mean_rows


@dataclass(frozen=True)
class NetVladParams:
    """Learned state of one soft-assignment pooling head.

    ``clusters`` holds the K real centroids whose residuals form the
    output.  ``assign_w``/``assign_b`` produce K + G assignment logits per
    row; the trailing G ghost columns exist only to absorb assignment mass
    from uninformative rows and never contribute residuals.  Ghost anchors
    are used once, to seed ``assign_w``; afterwards the assignment map is
    free to drift from the centroids.
    """

    clusters: Tensor
    assign_w: Tensor
    assign_b: Tensor
    ghosts: int = 0

    @property
    def cluster_count(self) -> int:
        return self.clusters.shape[0]

    @property
    def output_dim(self) -> int:
        return self.clusters.shape[0] * self.clusters.shape[1]


def init_netvlad(rng, dim: int, clusters: int, ghosts: int = 0, alpha: float = 1.0):
    """Centroid-tied initial arrays for a NetVLAD head.

    Anchors are standard normal scaled by 1/sqrt(d).  Assignment weights
    start at 2 * alpha * anchor with bias -alpha * |anchor|^2, so initial
    soft assignment approximates a nearest-anchor rule; ghost columns are
    seeded from throwaway anchors of their own.
    """
    if clusters < 1 or ghosts < 0 or dim < 1:
        raise ShapeMismatch(
            f"init_netvlad: need dim >= 1, clusters >= 1, ghosts >= 0, "
            f"got ({dim}, {clusters}, {ghosts})"
        )
    anchors = rng.standard_normal((clusters + ghosts, dim)) / np.sqrt(dim)
    return {
        "clusters": anchors[:clusters].copy(),
        "assign_w": np.ascontiguousarray((2.0 * alpha * anchors).T),
        "assign_b": -alpha * (anchors * anchors).sum(axis=1),
    }


def _check_vlad_shapes(seq: Tensor, p: NetVladParams):
    if seq.ndim != 2:
        raise ShapeMismatch(f"netvlad: expected (T, d) sequence, got shape {seq.shape}")
    if seq.shape[0] == 0:
        raise EmptySequence("netvlad: zero-row sequence")
    k, d = p.clusters.shape
    if seq.shape[1] != d:
        raise ShapeMismatch(
            f"netvlad: sequence width {seq.shape} does not match centroids {p.clusters.shape}"
        )
    if p.assign_w.shape != (d, k + p.ghosts) or p.assign_b.shape != (k + p.ghosts,):
        raise ShapeMismatch(
            f"netvlad: assignment shapes {p.assign_w.shape}/{p.assign_b.shape} do not "
            f"match centroids {p.clusters.shape} with {p.ghosts} ghosts"
        )


def netvlad(seq: Tensor, p: NetVladParams, eps: float = 1e-12) -> Tensor:
    """Soft-assignment pooling of a (T, d) sequence into (K * d,).

    Residuals against each real centroid are accumulated under the row
    softmax over K + G logits, normalized per cluster block, flattened,
    and normalized again, so the output always has unit norm (up to the
    eps guard on degenerate inputs).
    """
    _check_vlad_shapes(seq, p)
    x = np.ascontiguousarray(seq.data)
    out, cache = _kernels.vlad_forward(
        x,
        np.ascontiguousarray(p.clusters.data),
        np.ascontiguousarray(p.assign_w.data),
        np.ascontiguousarray(p.assign_b.data),
        eps,
    )
    parents = (seq, p.clusters, p.assign_w, p.assign_b)

    def bwd(g):
        gx, gc, gw, gb = _kernels.vlad_backward(cache, np.ascontiguousarray(g))
        _accum(seq, gx)
        _accum(p.clusters, gc)
        _accum(p.assign_w, gw)
        _accum(p.assign_b, gb)

    return _make(out, parents, bwd)


def mean_pool(seq: Tensor) -> Tensor:
    """Mean over the rows of a (T, d) sequence, T >= 1."""
    if seq.ndim != 2:
        raise ShapeMismatch(f"mean_pool: expected (T, d) sequence, got shape {seq.shape}")
    if seq.shape[0] == 0:
        raise EmptySequence("mean_pool: zero-row sequence")
    return mean_rows(seq)
