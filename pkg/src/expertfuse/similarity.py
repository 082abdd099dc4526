"""Cross-modal scoring under missing experts.

The score of (video, caption) is the mixture-weighted sum of per-expert
block inner products, with the caption's weights renormalized over the
experts the video actually has.  Because missing video blocks are exact
zeros, this equals the full zero-padded inner product divided by the
surviving weight mass; both the scalar and the batched paths compute the
same numbers, and the training-graph variant mirrors them with tape ops.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateWeights, NoAvailableExperts, ShapeMismatch
from .tensor import Tensor, add, col, div, matmul, scale_cols, tensor, transpose
from .text_encoder import MIN_WEIGHT_MASS, TextEmbedding, renormalize_weights
from .video_encoder import JointEmbedding


@dataclass(frozen=True)
class SimilarityMatrix:
    """Dense (N_videos, N_captions) score table with row/column identity."""

    scores: np.ndarray
    video_ids: tuple
    caption_ids: tuple


def _check_blocks(video: JointEmbedding, text: TextEmbedding):
    if len(video.blocks) != len(text.blocks):
        raise ShapeMismatch(
            f"similarity: {len(video.blocks)} video blocks vs {len(text.blocks)} text blocks"
        )
    for i, (v, t) in enumerate(zip(video.blocks, text.blocks)):
        if v.shape != t.shape:
            raise ShapeMismatch(
                f"similarity: block {i} shapes {v.shape} and {t.shape} differ"
            )


def similarity(video: JointEmbedding, text: TextEmbedding) -> float:
    """Scores one pair.

    With mixture weights the caption's weights are renormalized over the
    video's available experts; without them the score is the plain sum of
    block inner products (missing blocks are zero and contribute nothing).
    """
    _check_blocks(video, text)
    if text.weights is None:
        return float(sum(float(v @ t) for v, t in zip(video.blocks, text.blocks)))
    w = renormalize_weights(text.weights, video.available)
    return float(
        sum(w[i] * float(v @ t) for i, (v, t) in enumerate(zip(video.blocks, text.blocks)))
    )


def similarity_matrix(videos, texts, video_ids=None, caption_ids=None) -> SimilarityMatrix:
    """Scores every (video, caption) pair into one dense matrix.

    Vectorized over records; failures during weight renormalization are
    re-raised naming the offending pair.
    """
    if not videos or not texts:
        raise ShapeMismatch("similarity_matrix: empty video or caption list")
    video_ids = tuple(video_ids) if video_ids is not None else tuple(range(len(videos)))
    caption_ids = tuple(caption_ids) if caption_ids is not None else tuple(range(len(texts)))
    _check_blocks(videos[0], texts[0])
    blocks = len(videos[0].blocks)

    v_stack = [np.stack([v.blocks[e] for v in videos]) for e in range(blocks)]
    t_stack = [np.stack([t.blocks[e] for t in texts]) for e in range(blocks)]

    if texts[0].weights is None:
        scores = sum(v_stack[e] @ t_stack[e].T for e in range(blocks))
        return SimilarityMatrix(scores, video_ids, caption_ids)

    mask = np.array([[1.0 if a else 0.0 for a in v.available] for v in videos])
    weights = np.stack([t.weights for t in texts])
    for i in range(len(videos)):
        if not mask[i].any():
            raise NoAvailableExperts(f"video {video_ids[i]!r}: no expert available")
    denom = mask @ weights.T
    bad = np.argwhere(denom < MIN_WEIGHT_MASS)
    if bad.size:
        i, j = bad[0]
        raise DegenerateWeights(
            f"pair (video {video_ids[i]!r}, caption {caption_ids[j]!r}): available "
            f"weight mass {denom[i, j]:.3e} is below {MIN_WEIGHT_MASS:.0e}"
        )
    numer = np.zeros_like(denom)
    for e in range(blocks):
        numer += (v_stack[e] @ t_stack[e].T) * weights[:, e][None, :]
    scores = numer / denom
    return SimilarityMatrix(scores, video_ids, caption_ids)


def similarity_graph(video_blocks, availability, text_blocks, weights) -> Tensor:
    """Training-graph twin of ``similarity_matrix``.

    Args:
        video_blocks: n tensors (B_v, width), zero rows where missing.
        availability: (B_v, n) 0/1 float array.
        weights: (B_t, n) tensor or None.

    Returns:
        (B_v, B_t) score tensor.
    """
    if len(video_blocks) != len(text_blocks):
        raise ShapeMismatch(
            f"similarity_graph: {len(video_blocks)} video blocks vs "
            f"{len(text_blocks)} text blocks"
        )
    products = None
    for e, (v, t) in enumerate(zip(video_blocks, text_blocks)):
        prod = matmul(v, transpose(t))
        if weights is not None:
            prod = scale_cols(prod, col(weights, e))
        products = prod if products is None else add(products, prod)
    if weights is None:
        return products
    denom = matmul(tensor(availability), transpose(weights))
    if np.any(denom.data < MIN_WEIGHT_MASS):
        i, j = np.argwhere(denom.data < MIN_WEIGHT_MASS)[0]
        raise DegenerateWeights(
            f"pair (video {i}, caption {j}): available weight mass "
            f"{denom.data[i, j]:.3e} is below {MIN_WEIGHT_MASS:.0e}"
        )
    return div(products, denom)
