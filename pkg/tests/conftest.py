"""Shared oracles and fixtures for the test suite."""

import numpy as np
import pytest

from expertfuse.config import ExpertConfig, ModelConfig


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f at array x."""
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    return np.abs(analytic - numeric).max() / (np.abs(numeric).max() + 1e-8)


def netvlad_oracle(x, clusters, assign_w, assign_b, ghosts, eps=1e-12):
    """Row-by-row soft-assignment pooling, derived independently with loops."""
    rows, _ = x.shape
    k = clusters.shape[0]
    pooled = np.zeros_like(clusters)
    for t in range(rows):
        logits = np.array(
            [float(x[t] @ assign_w[:, j]) + assign_b[j] for j in range(k + ghosts)]
        )
        shifted = np.exp(logits - logits.max())
        soft = shifted / shifted.sum()
        for j in range(k):
            pooled[j] += soft[j] * (x[t] - clusters[j])
    for j in range(k):
        pooled[j] = pooled[j] / max(np.linalg.norm(pooled[j]), eps)
    flat = pooled.reshape(-1)
    return flat / max(np.linalg.norm(flat), eps)


def small_model_config(variant="ce", common_dim=8):
    """Three mixed-aggregator experts at toy widths."""
    return ModelConfig(
        experts=(
            ExpertConfig("motion", 5, "mean"),
            ExpertConfig("audio", 4, "netvlad", vlad_clusters=3, vlad_ghosts=1),
            ExpertConfig("scene", 6, "mean"),
        ),
        caption_dim=4,
        variant=variant,
        common_dim=common_dim,
        text_vlad_clusters=2,
        text_vlad_ghosts=1,
    )


def random_record(rng, cfg, present=None):
    """One synthetic record: expert name -> (T, d) array or None."""
    feats = {}
    for j, e in enumerate(cfg.experts):
        if present is not None and not present[j]:
            feats[e.name] = None
        else:
            feats[e.name] = rng.standard_normal((int(rng.integers(1, 7)), e.dim))
    return feats


def random_caption(rng, cfg):
    return rng.standard_normal((int(rng.integers(1, 9)), cfg.caption_dim))


@pytest.fixture(scope="session")
def session_rng():
    return np.random.default_rng(1234)
