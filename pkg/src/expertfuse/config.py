"""Run configuration: typed dataclasses, JSON schema, and resolution.

A run is fully described by a JSON document.  ``validate_config`` reports
every schema violation at once, ``resolve_config`` fills defaults and
returns the typed tree, and ``config_hash`` digests the resolved form so
checkpoints can refuse to resume under a different configuration.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import jsonschema

from .exceptions import ConfigError

VARIANTS = ("concat", "ce_no_mw_p_cg", "moee", "ce_no_cg", "ce")
AGGREGATORS = ("mean", "netvlad")
OPTIMIZERS = ("adam", "radam", "radam+lookahead")


@dataclass(frozen=True)
class ExpertConfig:
    """One pretrained feature stream: its width and how it is pooled."""

    name: str
    dim: int
    aggregator: str = "mean"
    vlad_clusters: int = 8
    vlad_ghosts: int = 1

    @property
    def agg_dim(self) -> int:
        """Width of the aggregated feature fed to the fusion stages."""
        if self.aggregator == "netvlad":
            return self.vlad_clusters * self.dim
        return self.dim


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switchboard shared by the video and text encoders.

    ``variant`` picks the fusion ablation rung:
      concat          raw aggregated experts, zero-padded inner product
      ce_no_mw_p_cg   per-expert gated embeddings at native widths,
                      unweighted sum of block inner products
      moee            as above plus learned mixture weights
      ce_no_cg        common-width projection + gated embeddings + weights
      ce              full model: adds the collaborative gating stage
    """

    experts: tuple
    caption_dim: int
    variant: str = "ce"
    common_dim: int = 768
    gating_hidden: int = 0  # 0 means: use common_dim
    text_vlad_clusters: int = 28
    text_vlad_ghosts: int = 1
    margin: float = 0.2
    eps: float = 1e-12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.experts:
            raise ConfigError("at least one expert is required")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate expert names in {names}")
        for e in self.experts:
            if e.aggregator not in AGGREGATORS:
                raise ConfigError(
                    f"expert {e.name!r}: unknown aggregator {e.aggregator!r}"
                )
            if e.dim < 1 or e.vlad_clusters < 1 or e.vlad_ghosts < 0:
                raise ConfigError(f"expert {e.name!r}: non-positive extent")
        if self.caption_dim < 1 or self.common_dim < 1 or self.gating_hidden < 0:
            raise ConfigError("caption_dim and common_dim must be positive")
        if self.text_vlad_clusters < 1 or self.text_vlad_ghosts < 0:
            raise ConfigError("text_vlad_clusters must be >= 1, ghosts >= 0")
        if self.margin <= 0 or self.eps <= 0:
            raise ConfigError("margin and eps must be positive")

    @property
    def expert_names(self):
        return tuple(e.name for e in self.experts)

    @property
    def text_agg_dim(self) -> int:
        return self.text_vlad_clusters * self.caption_dim

    @property
    def gating_width(self) -> int:
        return self.gating_hidden or self.common_dim

    @property
    def uses_weights(self) -> bool:
        return self.variant in ("moee", "ce_no_cg", "ce")

    @property
    def pad_dim(self) -> int:
        """Shared width of the two concat-variant vectors."""
        return max(sum(e.agg_dim for e in self.experts), self.text_agg_dim)

    def block_dims(self):
        """Widths of the per-expert embedding blocks for this variant."""
        if self.variant == "concat":
            return (self.pad_dim,)
        if self.variant in ("moee", "ce_no_mw_p_cg"):
            return tuple(e.agg_dim for e in self.experts)
        return (self.common_dim,) * len(self.experts)


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer and batching knobs for one training run."""

    optimizer: str = "radam+lookahead"
    learning_rate: float = 0.01
    weight_decay: float = 5e-5
    batch_size: int = 32
    max_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_steps: int = 5
    lookahead_alpha: float = 0.5
    checkpoint_every: int = 0  # 0 means: final checkpoint only

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}"
            )
        if self.learning_rate < 0 or self.batch_size < 2 or self.max_steps < 1:
            raise ConfigError("learning_rate >= 0, batch_size >= 2, max_steps >= 1 required")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if self.lookahead_steps < 1 or not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead_steps >= 1 and 0 < lookahead_alpha <= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval invocation needs besides the dataset files."""

    model: ModelConfig
    optim: OptimConfig
    data_dir: str
    out_dir: str
    train_split: str = "train"
    eval_split: str = "test"
    seeds: tuple = (0, 1, 2)
    recall_ks: tuple = (1, 5, 10, 50)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(k < 1 for k in self.recall_ks):
            raise ConfigError("recall cutoffs must be >= 1")


_EXPERT_SCHEMA = {
    "type": "object",
    "required": ["name", "dim"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "dim": {"type": "integer", "minimum": 1},
        "aggregator": {"enum": list(AGGREGATORS)},
        "vlad_clusters": {"type": "integer", "minimum": 1},
        "vlad_ghosts": {"type": "integer", "minimum": 0},
    },
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["model", "data_dir", "out_dir"],
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "required": ["experts", "caption_dim"],
            "additionalProperties": False,
            "properties": {
                "experts": {"type": "array", "minItems": 1, "items": _EXPERT_SCHEMA},
                "caption_dim": {"type": "integer", "minimum": 1},
                "variant": {"enum": list(VARIANTS)},
                "common_dim": {"type": "integer", "minimum": 1},
                "gating_hidden": {"type": "integer", "minimum": 0},
                "text_vlad_clusters": {"type": "integer", "minimum": 1},
                "text_vlad_ghosts": {"type": "integer", "minimum": 0},
                "margin": {"type": "number", "exclusiveMinimum": 0},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "optim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "optimizer": {"enum": list(OPTIMIZERS)},
                "learning_rate": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "max_steps": {"type": "integer", "minimum": 1},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "lookahead_steps": {"type": "integer", "minimum": 1},
                "lookahead_alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
        "data_dir": {"type": "string", "minLength": 1},
        "out_dir": {"type": "string", "minLength": 1},
        "train_split": {"type": "string", "minLength": 1},
        "eval_split": {"type": "string", "minLength": 1},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "recall_ks": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
    },
}


def validate_config(obj) -> list:
    """Returns every schema violation in a run-config document (empty = valid)."""
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    return sorted(
        f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in validator.iter_errors(obj)
    )


def resolve_config(obj) -> RunConfig:
    """Builds the typed config tree from a document, filling all defaults."""
    errors = validate_config(obj)
    if errors:
        raise ConfigError("invalid run config:\n  " + "\n  ".join(errors))
    m = obj["model"]
    experts = tuple(ExpertConfig(**e) for e in m["experts"])
    model = ModelConfig(
        experts=experts,
        **{k: v for k, v in m.items() if k != "experts"},
    )
    optim = OptimConfig(**obj.get("optim", {}))
    return RunConfig(
        model=model,
        optim=optim,
        data_dir=obj["data_dir"],
        out_dir=obj["out_dir"],
        train_split=obj.get("train_split", "train"),
        eval_split=obj.get("eval_split", "test"),
        seeds=tuple(obj.get("seeds", (0, 1, 2))),
        recall_ks=tuple(obj.get("recall_ks", (1, 5, 10, 50))),
    )


def config_to_dict(cfg: RunConfig) -> dict:
    """Fully resolved config as a plain document (every default made explicit)."""
    doc = asdict(cfg)
    doc["model"]["experts"] = [asdict(e) for e in cfg.model.experts]
    doc["seeds"] = list(cfg.seeds)
    doc["recall_ks"] = list(cfg.recall_ks)
    return doc


def config_hash(cfg: RunConfig) -> str:
    """Digest of the resolved config; identical runs hash identically."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
