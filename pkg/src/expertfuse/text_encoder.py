"""Text-side encoder: pool word vectors, emit one block per expert plus
mixture weights.

A caption is a (L, d_w) matrix of word vectors.  One shared NetVLAD head
pools it into a single aggregate; from that aggregate each expert gets
its own GEM block (sized to pair with the video side for the active
variant), and a single affine head followed by a softmax produces the
mixture weights used by the similarity stage.  Weight renormalization
over the video's available experts also lives here, since the weights
are a text-side product.
"""

from dataclasses import dataclass

import numpy as np

from .aggregate import netvlad
from .config import ModelConfig
from .exceptions import (
    DegenerateWeights,
    EmptySequence,
    NoAvailableExperts,
    ShapeMismatch,
)
from .params import ModelParams
from .tensor import (
    Tensor,
    add_bias,
    concat_cols,
    matmul,
    softmax,
    stack_rows,
    tensor,
)
from .video_encoder import gem, gem_params, vlad_params

MIN_WEIGHT_MASS = 1e-12


@dataclass(frozen=True)
class TextEmbedding:
    """Per-expert caption blocks plus mixture weights.

    GEM blocks have unit norm and the weights are a probability vector
    over experts.  Variants without mixture weights carry ``None`` and
    are scored as a plain sum of block inner products.
    """

    blocks: tuple
    weights: object  # (n,) array or None


def renormalize_weights(weights, available):
    """Restricts mixture weights to the available experts and rescales
    them to sum to one.

    Missing experts get exact zeros.  Raises when no expert is available
    or when the surviving mass is numerically zero (a fully saturated
    mixture head pointing only at missing experts).
    """
    w = np.asarray(weights, dtype=np.float64)
    avail = np.asarray(available, dtype=bool)
    if w.ndim != 1 or w.shape != avail.shape:
        raise ShapeMismatch(
            f"renormalize_weights: weights {w.shape} vs availability {avail.shape}"
        )
    if not avail.any():
        raise NoAvailableExperts("renormalize_weights: every expert is missing")
    mass = float(w[avail].sum())
    if mass < MIN_WEIGHT_MASS:
        raise DegenerateWeights(
            f"renormalize_weights: available weight mass {mass:.3e} is below "
            f"{MIN_WEIGHT_MASS:.0e}"
        )
    out = np.zeros_like(w)
    out[avail] = w[avail] / mass
    return out


def _check_caption(caption, cfg: ModelConfig, idx):
    if caption.ndim != 2 or caption.shape[1] != cfg.caption_dim:
        raise ShapeMismatch(
            f"caption {idx}: shape {caption.shape}, expected (L, {cfg.caption_dim})"
        )
    if caption.shape[0] == 0:
        raise EmptySequence(f"caption {idx}: zero words")


def encode_texts(captions, params: ModelParams, cfg: ModelConfig):
    """Encodes a batch of captions into block tensors and weights.

    Args:
        captions: list of (L, d_w) word-vector arrays.

    Returns:
        (blocks, weights): blocks is a list of (B, width) tensors, one
        per expert (a single padded tensor for the concat variant);
        weights is a (B, n) tensor for weight-bearing variants, else None.
    """
    if not captions:
        raise EmptySequence("encode_texts: empty batch")
    vlad = vlad_params(params, "vlad.text", cfg.text_vlad_ghosts)
    rows = []
    for idx, caption in enumerate(captions):
        caption = np.asarray(caption, dtype=np.float64)
        _check_caption(caption, cfg, idx)
        rows.append(netvlad(tensor(caption), vlad, cfg.eps))
    pooled = stack_rows(rows)

    if cfg.variant == "concat":
        short = cfg.pad_dim - pooled.shape[1]
        if short > 0:
            pooled = concat_cols([pooled, tensor(np.zeros((len(captions), short)))])
        return [pooled], None

    blocks = [
        gem(pooled, gem_params(params, f"tgem.{e.name}"), cfg.eps) for e in cfg.experts
    ]
    weights = None
    if cfg.uses_weights:
        weights = softmax(add_bias(matmul(pooled, params["mix.w"]), params["mix.b"]))
    return blocks, weights


def encode_text(caption, params: ModelParams, cfg: ModelConfig) -> TextEmbedding:
    """Encodes one caption to its embedding."""
    blocks, weights = encode_texts([caption], params, cfg)
    return TextEmbedding(
        tuple(np.asarray(b.data[0]) for b in blocks),
        None if weights is None else np.asarray(weights.data[0]),
    )
