"""Training loop: deterministic pair sampling, batched ranking loss,
and a checkpoint container that resumes runs bit for bit.

A checkpoint is a directory: ``header.json`` (format version, config
hash, step count, sampler state, blob manifest) plus one double-precision
matrix file per parameter and per optimizer slot.  Double precision is
what makes save/load/resume indistinguishable from an uninterrupted run.
"""

import json
import os

import numpy as np

from .config import ModelConfig, OptimConfig
from .dataio import read_matrix_f64, write_matrix_f64
from .exceptions import ConfigError, DataIntegrityError, TrainingDiverged
from .loss import ranking_loss
from .optim import make_optimizer
from .params import ModelParams, init_model_params
from .similarity import similarity_graph
from .tensor import value_and_gradients
from .text_encoder import encode_texts
from .video_encoder import encode_videos

CHECKPOINT_HEADER = "header.json"
FORMAT_VERSION = 1


class PairSampler:
    """Epoch-permutation batch sampler over (record, caption) pairs.

    Every epoch draws a fresh permutation of all pairs and slices it into
    consecutive batches; a tail shorter than the batch size is dropped.
    Two captions of one video may land in the same batch and then act as
    each other's false negatives, which is the usual price of in-batch
    negative mining.
    """

    def __init__(self, n_pairs: int, batch_size: int, seed: int):
        if n_pairs < batch_size:
            raise ConfigError(
                f"sampler: {n_pairs} pairs cannot fill a batch of {batch_size}"
            )
        self.n_pairs = n_pairs
        self.batch_size = batch_size
        # keyed stream so the sampler never shares draws with the
        # parameter initializer for the same seed
        self._rng = np.random.default_rng([seed, 1])
        self._perm = None
        self._cursor = 0

    def next_batch(self):
        if self._perm is None or self._cursor + self.batch_size > self.n_pairs:
            self._perm = self._rng.permutation(self.n_pairs)
            self._cursor = 0
        batch = self._perm[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return [int(i) for i in batch]

    def state(self) -> dict:
        return {
            "rng": self._rng.bit_generator.state,
            "perm": None if self._perm is None else [int(i) for i in self._perm],
            "cursor": self._cursor,
        }

    def load_state(self, state: dict):
        self._rng.bit_generator.state = state["rng"]
        self._perm = None if state["perm"] is None else np.array(state["perm"], dtype=int)
        self._cursor = int(state["cursor"])


def _blob_plan(params: ModelParams, optimizer):
    blobs = {f"param.{name}": arr for name, arr in params.arrays().items()}
    _, opt_arrays = optimizer.state()
    for key, arr in opt_arrays.items():
        blobs[f"opt.{key}"] = arr
    return blobs


def save_checkpoint(path, params: ModelParams, optimizer, sampler: PairSampler,
                    step: int, config_digest: str):
    """Writes the complete run state under one directory."""
    os.makedirs(path, exist_ok=True)
    opt_meta, _ = optimizer.state()
    blobs = _blob_plan(params, optimizer)
    manifest = {}
    for name, arr in blobs.items():
        fname = f"{name}.cef8"
        write_matrix_f64(os.path.join(path, fname), np.atleast_2d(arr))
        manifest[name] = {"file": fname, "shape": list(arr.shape)}
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_digest,
        "step": step,
        "optimizer": opt_meta,
        "sampler": sampler.state(),
        "blobs": manifest,
    }
    with open(os.path.join(path, CHECKPOINT_HEADER), "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True)


def load_checkpoint(path) -> dict:
    """Reads a checkpoint directory back into arrays plus its header."""
    header_path = os.path.join(path, CHECKPOINT_HEADER)
    if not os.path.exists(header_path):
        raise DataIntegrityError(f"no checkpoint header at {header_path}")
    with open(header_path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("format_version") != FORMAT_VERSION:
        raise DataIntegrityError(
            f"checkpoint format version {header.get('format_version')!r} unsupported"
        )
    blobs = {}
    for name, entry in header["blobs"].items():
        arr = read_matrix_f64(os.path.join(path, entry["file"]))
        blobs[name] = arr.reshape(entry["shape"])
    params = {k[len("param."):]: v for k, v in blobs.items() if k.startswith("param.")}
    opt_arrays = {k[len("opt."):]: v for k, v in blobs.items() if k.startswith("opt.")}
    return {
        "step": int(header["step"]),
        "config_hash": header["config_hash"],
        "optimizer_meta": header["optimizer"],
        "optimizer_arrays": opt_arrays,
        "sampler": header["sampler"],
        "params": params,
    }


def restore_params(params: ModelParams, arrays: dict):
    """Loads checkpointed values into an initialized parameter registry."""
    missing = set(params.names()) ^ set(arrays)
    if missing:
        raise DataIntegrityError(
            f"checkpoint parameters do not match the model: {sorted(missing)[:5]}"
        )
    for name, arr in arrays.items():
        params.replace(name, arr)


def batch_loss_fn(records, caption_picks, model_cfg: ModelConfig):
    """Builds the loss closure for one sampled batch.

    Args:
        records: the batch's Record objects, one per pair.
        caption_picks: which caption of each record is the matched one.
    """
    features = [r.features for r in records]
    ids = [r.id for r in records]
    captions = [r.captions[c] for r, c in zip(records, caption_picks)]

    def loss_fn(params):
        blocks, mask = encode_videos(features, params, model_cfg, ids=ids)
        t_blocks, weights = encode_texts(captions, params, model_cfg)
        scores = similarity_graph(blocks, mask, t_blocks, weights)
        return ranking_loss(scores, model_cfg.margin)

    return loss_fn


def train(records, model_cfg: ModelConfig, optim_cfg: OptimConfig, seed: int,
          config_digest: str = "", checkpoint_dir=None, resume_from=None):
    """Runs the optimization loop over planted (video, caption) pairs.

    Returns (params, loss_log) where the log holds one finite entry per
    completed step.  With ``checkpoint_dir`` set, state is written every
    ``checkpoint_every`` steps (0 = only at the end) under
    ``checkpoint-<step>`` and always as ``checkpoint-final``.  Passing
    ``resume_from`` restores a saved run and continues it; the result is
    bitwise identical to never having stopped.
    """
    pairs = [
        (idx, cap)
        for idx, record in enumerate(records)
        for cap in range(len(record.captions))
    ]
    if len(pairs) < optim_cfg.batch_size:
        raise ConfigError(
            f"training needs at least batch_size={optim_cfg.batch_size} pairs, "
            f"got {len(pairs)}"
        )

    params = init_model_params(model_cfg, seed)
    optimizer = make_optimizer(optim_cfg, params)
    sampler = PairSampler(len(pairs), optim_cfg.batch_size, seed)
    start_step = 0

    if resume_from is not None:
        saved = load_checkpoint(resume_from)
        if config_digest and saved["config_hash"] != config_digest:
            raise ConfigError(
                f"checkpoint was written for config {saved['config_hash'][:12]}, "
                f"this run is {config_digest[:12]}"
            )
        restore_params(params, saved["params"])
        optimizer.load_state(saved["optimizer_meta"], saved["optimizer_arrays"])
        sampler.load_state(saved["sampler"])
        start_step = saved["step"]

    loss_log = []
    step = start_step
    for step in range(start_step + 1, optim_cfg.max_steps + 1):
        batch = sampler.next_batch()
        batch_records = [records[pairs[i][0]] for i in batch]
        picks = [pairs[i][1] for i in batch]
        loss_fn = batch_loss_fn(batch_records, picks, model_cfg)
        loss, grads = value_and_gradients(loss_fn, params)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"step {step}: non-finite loss {loss}; batch videos "
                f"{[r.id for r in batch_records]}"
            )
        optimizer.step(params, grads)
        loss_log.append({"step": step, "loss": loss})
        if (
            checkpoint_dir
            and optim_cfg.checkpoint_every
            and step % optim_cfg.checkpoint_every == 0
            and step < optim_cfg.max_steps
        ):
            save_checkpoint(
                os.path.join(checkpoint_dir, f"checkpoint-{step:06d}"),
                params, optimizer, sampler, step, config_digest,
            )
    if checkpoint_dir:
        save_checkpoint(
            os.path.join(checkpoint_dir, "checkpoint-final"),
            params, optimizer, sampler, step, config_digest,
        )
    return params, loss_log
