"""Bidirectional max-margin ranking objective.

Given a square score matrix whose diagonal holds the matched pairs, every
off-diagonal entry is pushed below its row's and its column's diagonal
score by at least the margin, in both retrieval directions, and the two
hinge families are summed and divided by the batch size.  The hinge
subgradient at the kink is zero, so exactly-at-margin pairs do not move.
"""

import numpy as np

from .exceptions import ConfigError, ShapeMismatch
from .tensor import (
    Tensor,
    add,
    add_scalar,
    diag_part,
    mul_const,
    relu,
    scale,
    sub_colvec,
    sum_all,
    transpose,
)


def ranking_loss(scores: Tensor, margin: float = 0.2) -> Tensor:
    """Scalar ranking loss over a (N, N) matched-pair score matrix.

    For each pair of distinct indices (i, j), penalizes caption j scoring
    against video i within ``margin`` of the matched score s_ii, and the
    mirrored video-against-caption case; zero exactly when every matched
    score beats every mismatch in its row and column by the margin.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeMismatch(f"ranking_loss: expected square matrix, got {scores.shape}")
    if margin <= 0:
        raise ConfigError(f"ranking_loss: margin must be positive, got {margin}")
    n = scores.shape[0]
    matched = diag_part(scores)
    text_hinge = relu(add_scalar(sub_colvec(scores, matched), margin))
    video_hinge = relu(add_scalar(sub_colvec(transpose(scores), matched), margin))
    off_diagonal = 1.0 - np.eye(n)
    total = sum_all(mul_const(add(text_hinge, video_hinge), off_diagonal))
    return scale(total, 1.0 / n)
