"""Named parameter registry and seeded initialization.

Parameter names are hierarchical and stable (``proj.<expert>.w``,
``gate.pair.w1``, ``vlad.text.clusters`` ...), which gives optimizers,
checkpoints, and the gradient checker one shared vocabulary.  A variant
only instantiates the components it actually uses.
"""

import numpy as np

from .aggregate import init_netvlad
from .config import ModelConfig
from .exceptions import ConfigError
from .tensor import Tensor, parameter


class ModelParams:
    """Ordered name -> parameter tensor registry."""

    def __init__(self):
        self._tensors = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = parameter(array)
        self._tensors[name] = t
        return t

    def replace(self, name: str, array) -> Tensor:
        """Swaps in a fresh leaf tensor; the old one stays valid but orphaned."""
        if name not in self._tensors:
            raise KeyError(name)
        t = parameter(array)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self) -> dict:
        """Live name -> array view of the current values."""
        return {name: t.data for name, t in self._tensors.items()}

    def entry_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def _linear(rng, fan_in: int, fan_out: int):
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return w, np.zeros(fan_out)


def _add_linear(params, prefix, rng, fan_in, fan_out, w="w", b="b"):
    wv, bv = _linear(rng, fan_in, fan_out)
    params.add(f"{prefix}.{w}", wv)
    params.add(f"{prefix}.{b}", bv)


def _add_gem(params, prefix, rng, fan_in, fan_out):
    _add_linear(params, prefix, rng, fan_in, fan_out, "w1", "b1")
    _add_linear(params, prefix, rng, fan_out, fan_out, "w2", "b2")


def _add_vlad(params, prefix, rng, dim, clusters, ghosts):
    arrays = init_netvlad(rng, dim, clusters, ghosts)
    for key, value in arrays.items():
        params.add(f"{prefix}.{key}", value)


def init_model_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Freshly initialized parameters for the given variant and seed.

    Consumption order of the underlying generator is fixed, so a given
    (config, seed) pair always yields bitwise-identical values.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()
    variant = cfg.variant

    for e in cfg.experts:
        if e.aggregator == "netvlad":
            _add_vlad(params, f"vlad.video.{e.name}", rng, e.dim, e.vlad_clusters, e.vlad_ghosts)
        if variant in ("ce", "ce_no_cg"):
            _add_linear(params, f"proj.{e.name}", rng, e.agg_dim, cfg.common_dim)
        if variant in ("ce", "ce_no_cg", "moee", "ce_no_mw_p_cg"):
            block_in = cfg.common_dim if variant in ("ce", "ce_no_cg") else e.agg_dim
            _add_gem(params, f"vgem.{e.name}", rng, block_in, block_in)

    if variant == "ce":
        width = cfg.gating_width
        _add_linear(params, "gate.pair", rng, 2 * cfg.common_dim, width, "w1", "b1")
        _add_linear(params, "gate.pair", rng, width, cfg.common_dim, "w2", "b2")
        _add_linear(params, "gate.out", rng, cfg.common_dim, width, "w1", "b1")
        # Zero-started output layer: attention logits begin at 0, so every
        # gate opens at sigmoid(0) = 0.5.  A fresh model applies no
        # sample-dependent modulation, only a uniform scale, and the gate
        # departs from that neutral point only where training finds use
        # for it.
        params.add("gate.out.w2", np.zeros((width, cfg.common_dim)))
        params.add("gate.out.b2", np.zeros(cfg.common_dim))

    _add_vlad(params, "vlad.text", rng, cfg.caption_dim, cfg.text_vlad_clusters, cfg.text_vlad_ghosts)

    if variant != "concat":
        for e, width in zip(cfg.experts, cfg.block_dims()):
            _add_gem(params, f"tgem.{e.name}", rng, cfg.text_agg_dim, width)

    if cfg.uses_weights:
        _add_linear(params, "mix", rng, cfg.text_agg_dim, len(cfg.experts))

    return params
