"""Video-side encoder: aggregate each expert stream, project, let the
streams modulate one another, and embed.

The full variant runs four stages per record:

  1. temporal aggregation of each available expert (mean or NetVLAD),
  2. linear projection of every aggregate to the shared width,
  3. collaborative gating: each expert's projection is rescaled by a
     sigmoid gate computed from a learned relation to the other
     available experts,
  4. one gated embedding module (GEM) per expert, giving unit-norm
     blocks; blocks of missing experts are exactly zero.

Ablation variants skip stages (see ``ModelConfig.variant``).  Encoding is
batched: every stage past aggregation is a handful of matrix ops over
records-as-rows.
"""

from dataclasses import dataclass

import numpy as np

from .aggregate import NetVladParams, mean_pool, netvlad
from .config import ModelConfig
from .exceptions import EmptySequence, NoAvailableExperts, ShapeMismatch
from .params import ModelParams
from .tensor import (
    Tensor,
    add,
    add_bias,
    concat_cols,
    hadamard,
    l2_normalize,
    matmul,
    mul_const,
    relu,
    sigmoid,
    stack_rows,
    tensor,
)


@dataclass(frozen=True)
class JointEmbedding:
    """Per-expert embedding blocks for one video.

    For GEM-producing variants every available block has unit norm and
    every missing block is exactly zero; the concat variant carries a
    single unnormalized block and reports it available.
    """

    blocks: tuple
    available: tuple


@dataclass(frozen=True)
class GemParams:
    """One gated embedding module: two affine maps."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(frozen=True)
class GatingParams:
    """The two shared MLPs of the collaborative gating stage.

    The pair MLP reads a concatenated (self, partner) projection pair;
    the out MLP turns the summed pair relations into a gate preactivation.
    Both are shared across all expert pairs.
    """

    pair_w1: Tensor
    pair_b1: Tensor
    pair_w2: Tensor
    pair_b2: Tensor
    out_w1: Tensor
    out_b1: Tensor
    out_w2: Tensor
    out_b2: Tensor


def gem_params(params: ModelParams, prefix: str) -> GemParams:
    return GemParams(*(params[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")))


def gating_params(params: ModelParams) -> GatingParams:
    return GatingParams(
        *(params[f"gate.pair.{k}"] for k in ("w1", "b1", "w2", "b2")),
        *(params[f"gate.out.{k}"] for k in ("w1", "b1", "w2", "b2")),
    )


def vlad_params(params: ModelParams, prefix: str, ghosts: int) -> NetVladParams:
    return NetVladParams(
        params[f"{prefix}.clusters"],
        params[f"{prefix}.assign_w"],
        params[f"{prefix}.assign_b"],
        ghosts,
    )


def project_expert(agg: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of aggregated features (rows) to the shared width."""
    return add_bias(matmul(agg, w), b)


def gem(x: Tensor, p: GemParams, eps: float = 1e-12) -> Tensor:
    """Gated embedding module over rows.

    An affine image of the input is rescaled elementwise by a sigmoid of
    its own affine image, then unit-normalized, so each output row lies
    on the sphere regardless of input scale.
    """
    y = add_bias(matmul(x, p.w1), p.b1)
    gate = sigmoid(add_bias(matmul(y, p.w2), p.b2))
    return l2_normalize(hadamard(y, gate), eps)


def _mlp(x, w1, b1, w2, b2):
    return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2)


def collaborative_attention(projections, availability, gp: GatingParams):
    """Gate preactivations from every expert's available partners.

    For expert i the shared pair MLP scores (i, j) for every other expert
    j, scores of unavailable partners are zeroed per record (identical to
    dropping them from the sum), and the shared out MLP maps the summed
    relations to expert i's gate preactivation.  An expert with no
    available partner receives the out MLP's image of the zero vector.

    Args:
        projections: n tensors of shape (B, D).
        availability: (B, n) 0/1 float array.
        gp: the two shared MLPs.

    Returns:
        n tensors of shape (B, D).
    """
    n = len(projections)
    rows, width = projections[0].shape
    if availability.shape != (rows, n):
        raise ShapeMismatch(
            f"collaborative_attention: availability {availability.shape} does not "
            f"match {n} projections of shape {projections[0].shape}"
        )
    out = []
    for i in range(n):
        total = None
        for j in range(n):
            if j == i:
                continue
            rel = _mlp(
                concat_cols([projections[i], projections[j]]),
                gp.pair_w1, gp.pair_b1, gp.pair_w2, gp.pair_b2,
            )
            rel = mul_const(rel, availability[:, j : j + 1])
            total = rel if total is None else add(total, rel)
        if total is None:
            total = tensor(np.zeros((rows, width)))
        out.append(_mlp(total, gp.out_w1, gp.out_b1, gp.out_w2, gp.out_b2))
    return out


def gate_experts(projections, attention):
    """Rescales each projection by the sigmoid of its gate preactivation."""
    if len(projections) != len(attention):
        raise ShapeMismatch(
            f"gate_experts: {len(projections)} projections vs {len(attention)} gates"
        )
    return [hadamard(p, sigmoid(t)) for p, t in zip(projections, attention)]


def _availability(batch, cfg: ModelConfig, ids):
    mask = np.zeros((len(batch), len(cfg.experts)))
    for r, feats in enumerate(batch):
        for j, e in enumerate(cfg.experts):
            seq = feats.get(e.name)
            if seq is None:
                continue
            if seq.ndim != 2 or (seq.shape[0] > 0 and seq.shape[1] != e.dim):
                ident = ids[r] if ids is not None else f"record {r}"
                raise ShapeMismatch(
                    f"{ident}: expert {e.name!r} has shape {seq.shape}, "
                    f"expected (T, {e.dim})"
                )
            if seq.shape[0] > 0:
                mask[r, j] = 1.0
        if not mask[r].any():
            ident = ids[r] if ids is not None else f"record {r}"
            raise NoAvailableExperts(f"{ident}: no expert features present")
    return mask


def _aggregate_column(batch, e, params: ModelParams, cfg: ModelConfig, mask_col):
    vlad = None
    if e.aggregator == "netvlad":
        vlad = vlad_params(params, f"vlad.video.{e.name}", e.vlad_ghosts)
    zero = np.zeros(e.agg_dim)
    rows = []
    for feats, present in zip(batch, mask_col):
        if not present:
            rows.append(tensor(zero))
        elif vlad is not None:
            rows.append(netvlad(tensor(feats[e.name]), vlad, cfg.eps))
        else:
            rows.append(mean_pool(tensor(feats[e.name])))
    return stack_rows(rows)


def encode_videos(batch, params: ModelParams, cfg: ModelConfig, ids=None):
    """Encodes a batch of records into per-expert block tensors.

    Args:
        batch: list of dicts mapping expert name -> (T, d) array or None.
        ids: optional record names used in error messages.

    Returns:
        (blocks, availability): blocks is a list of (B, width) tensors,
        one per expert (a single padded tensor for the concat variant);
        availability is the (B, n) 0/1 float array.  Missing blocks are
        exactly zero rows.
    """
    if not batch:
        raise EmptySequence("encode_videos: empty batch")
    mask = _availability(batch, cfg, ids)
    agg = [
        _aggregate_column(batch, e, params, cfg, mask[:, j])
        for j, e in enumerate(cfg.experts)
    ]

    if cfg.variant == "concat":
        vec = concat_cols(agg) if len(agg) > 1 else agg[0]
        short = cfg.pad_dim - vec.shape[1]
        if short > 0:
            vec = concat_cols([vec, tensor(np.zeros((len(batch), short)))])
        return [vec], mask

    if cfg.variant in ("ce", "ce_no_cg"):
        streams = [
            project_expert(a, params[f"proj.{e.name}.w"], params[f"proj.{e.name}.b"])
            for a, e in zip(agg, cfg.experts)
        ]
    else:
        streams = agg

    if cfg.variant == "ce":
        attention = collaborative_attention(streams, mask, gating_params(params))
        streams = gate_experts(streams, attention)

    return [
        mul_const(gem(s, gem_params(params, f"vgem.{e.name}"), cfg.eps), mask[:, j : j + 1])
        for j, (s, e) in enumerate(zip(streams, cfg.experts))
    ], mask


def encode_video(features: dict, params: ModelParams, cfg: ModelConfig, name=None) -> JointEmbedding:
    """Encodes one record (expert name -> sequence or None) to an embedding."""
    blocks, mask = encode_videos([features], params, cfg, ids=[name] if name else None)
    if cfg.variant == "concat":
        available = (True,)
    else:
        available = tuple(bool(v) for v in mask[0])
    return JointEmbedding(tuple(np.asarray(b.data[0]) for b in blocks), available)
