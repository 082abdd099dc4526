"""Finite-difference verification of every differentiable operation.

Each named operation owns a small randomized scenario: a dict of
parameter arrays and a scalar loss built through the operation.  The
suite replays every scenario over many seeds, compares tape gradients
against central differences, and reports the worst relative error per
operation.  A corruption hook deliberately perturbs one operation's
analytic gradients so the reporting path itself can be exercised.
"""

from dataclasses import dataclass

import numpy as np

from .aggregate import NetVladParams, netvlad
from .exceptions import ConfigError
from .loss import ranking_loss
from .tensor import (
    add_bias,
    backward,
    concat_cols,
    hadamard,
    l2_normalize,
    matmul,
    parameter,
    sigmoid,
    softmax,
    sum_all,
    tensor,
)
from .video_encoder import (
    GatingParams,
    GemParams,
    collaborative_attention,
    gate_experts,
    gem,
    project_expert,
)

DEFAULT_TOLERANCE = 1e-5
DEFAULT_STEP = 1e-6


@dataclass(frozen=True)
class OpCheck:
    """Outcome of one operation's gradient check across all seeds."""

    op: str
    worst_rel_err: float
    tolerance: float
    passed: bool
    seeds: int
    worst_seed: int


def finite_difference(value_fn, arrays, h: float = DEFAULT_STEP) -> dict:
    """Central-difference gradients of a scalar function of named arrays."""
    grads = {}
    for name, base in arrays.items():
        g = np.zeros_like(base, dtype=np.float64)
        for i in range(base.size):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name].flat[i] += h
            minus[name].flat[i] -= h
            g.flat[i] = (value_fn(plus) - value_fn(minus)) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(analytic, numeric) -> float:
    return float(np.abs(analytic - numeric).max() / (np.abs(numeric).max() + 1e-8))


def _reduce(out, readout):
    """Scalar loss sensitive to every output entry via a fixed readout."""
    return sum_all(hadamard(out, tensor(readout)))


def _build_matmul(rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
    r = rng.standard_normal((3, 2))
    return arrays, lambda p: _reduce(matmul(p["a"], p["b"]), r)


def _build_softmax(rng):
    arrays = {"x": rng.standard_normal((3, 5)) * 2.0}
    r = rng.standard_normal((3, 5))
    return arrays, lambda p: _reduce(softmax(p["x"]), r)


def _build_sigmoid(rng):
    arrays = {"x": rng.standard_normal((4, 3)) * 2.0}
    r = rng.standard_normal((4, 3))
    return arrays, lambda p: _reduce(sigmoid(p["x"]), r)


def _build_l2_normalize(rng):
    while True:
        x = rng.standard_normal((3, 4))
        if np.sqrt((x * x).sum(axis=1)).min() > 0.3:
            break
    r = rng.standard_normal((3, 4))
    return {"x": x}, lambda p: _reduce(l2_normalize(p["x"]), r)


def _build_hadamard(rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}
    r = rng.standard_normal((3, 4))
    return arrays, lambda p: _reduce(hadamard(p["a"], p["b"]), r)


def _build_netvlad(rng):
    arrays = {
        "x": rng.standard_normal((5, 3)),
        "clusters": rng.standard_normal((2, 3)),
        "assign_w": rng.standard_normal((3, 3)),
        "assign_b": rng.standard_normal(3) * 0.2,
    }
    r = rng.standard_normal(6)

    def f(p):
        vp = NetVladParams(p["clusters"], p["assign_w"], p["assign_b"], ghosts=1)
        return _reduce(netvlad(p["x"], vp), r)

    return arrays, f


def _build_projection(rng):
    arrays = {
        "agg": rng.standard_normal((3, 5)),
        "w": rng.standard_normal((5, 4)) / np.sqrt(5),
        "b": rng.standard_normal(4) * 0.1,
    }
    r = rng.standard_normal((3, 4))
    return arrays, lambda p: _reduce(project_expert(p["agg"], p["w"], p["b"]), r)


def _build_gem(rng):
    arrays = {
        "x": rng.standard_normal((3, 5)),
        "w1": rng.standard_normal((5, 4)) / np.sqrt(5),
        "b1": rng.standard_normal(4) * 0.1,
        "w2": rng.standard_normal((4, 4)) / 2.0,
        "b2": rng.standard_normal(4) * 0.1,
    }
    r = rng.standard_normal((3, 4))

    def f(p):
        return _reduce(gem(p["x"], GemParams(p["w1"], p["b1"], p["w2"], p["b2"])), r)

    return arrays, f


def _build_gating_mlp(rng):
    width = 3
    arrays = {
        "p0": rng.standard_normal((2, width)),
        "p1": rng.standard_normal((2, width)),
        "p2": rng.standard_normal((2, width)),
        "pair_w1": rng.standard_normal((2 * width, 4)) / np.sqrt(2 * width),
        "pair_b1": rng.standard_normal(4) * 0.1,
        "pair_w2": rng.standard_normal((4, width)) / 2.0,
        "pair_b2": rng.standard_normal(width) * 0.1,
        "out_w1": rng.standard_normal((width, 4)) / np.sqrt(width),
        "out_b1": rng.standard_normal(4) * 0.1,
        "out_w2": rng.standard_normal((4, width)) / 2.0,
        "out_b2": rng.standard_normal(width) * 0.1,
    }
    availability = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0]])
    r = rng.standard_normal((2, 3 * width))

    def f(p):
        gp = GatingParams(
            p["pair_w1"], p["pair_b1"], p["pair_w2"], p["pair_b2"],
            p["out_w1"], p["out_b1"], p["out_w2"], p["out_b2"],
        )
        streams = [p["p0"], p["p1"], p["p2"]]
        gated = gate_experts(streams, collaborative_attention(streams, availability, gp))
        return _reduce(concat_cols(gated), r)

    return arrays, f


def _build_mixture_head(rng):
    arrays = {
        "pooled": rng.standard_normal((3, 6)),
        "w": rng.standard_normal((6, 4)) / np.sqrt(6),
        "b": rng.standard_normal(4) * 0.1,
    }
    r = rng.standard_normal((3, 4))
    return arrays, lambda p: _reduce(
        softmax(add_bias(matmul(p["pooled"], p["w"]), p["b"])), r
    )


def _build_ranking_loss(rng):
    margin = 0.2
    while True:
        s = rng.standard_normal((4, 4))
        d = np.diag(s)
        off = ~np.eye(4, dtype=bool)
        near_kink = min(
            np.abs(margin + s - d[:, None])[off].min(),
            np.abs(margin + s.T - d[:, None])[off].min(),
        )
        if near_kink > 1e-4:
            break
    return {"s": s}, lambda p: ranking_loss(p["s"], margin)


OPS = {
    "matmul": _build_matmul,
    "softmax": _build_softmax,
    "sigmoid": _build_sigmoid,
    "l2_normalize": _build_l2_normalize,
    "hadamard": _build_hadamard,
    "netvlad": _build_netvlad,
    "projection": _build_projection,
    "gating_mlp": _build_gating_mlp,
    "gem": _build_gem,
    "mixture_head": _build_mixture_head,
    "ranking_loss": _build_ranking_loss,
}


def check_op(name: str, seeds: int = 20, h: float = DEFAULT_STEP,
             tol: float = DEFAULT_TOLERANCE, corrupt: bool = False) -> OpCheck:
    """Gradient-checks one named operation over the given number of seeds."""
    if name not in OPS:
        raise ConfigError(f"unknown operation {name!r}; expected one of {sorted(OPS)}")
    build = OPS[name]
    worst = 0.0
    worst_seed = 0
    for seed in range(seeds):
        arrays, f = build(np.random.default_rng(seed))
        leaves = {k: parameter(v) for k, v in arrays.items()}
        backward(f(leaves))

        def value_at(arrs):
            return float(f({k: tensor(v) for k, v in arrs.items()}).data)

        numeric = finite_difference(value_at, arrays, h)
        for key in arrays:
            analytic = leaves[key].grad
            if analytic is None:
                analytic = np.zeros_like(arrays[key])
            if corrupt:
                analytic = analytic * 1.01 + 1e-3
            err = relative_error(analytic, numeric[key])
            if err > worst:
                worst, worst_seed = err, seed
    return OpCheck(name, worst, tol, worst < tol, seeds, worst_seed)


def run_gradient_suite(seeds: int = 20, h: float = DEFAULT_STEP,
                       tol: float = DEFAULT_TOLERANCE, corrupt_op=None) -> list:
    """Runs every operation's check; each op appears exactly once."""
    if corrupt_op is not None and corrupt_op not in OPS:
        raise ConfigError(f"unknown operation {corrupt_op!r}; expected one of {sorted(OPS)}")
    return [
        check_op(name, seeds=seeds, h=h, tol=tol, corrupt=(name == corrupt_op))
        for name in OPS
    ]
