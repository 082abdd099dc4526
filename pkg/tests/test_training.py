"""Training loop: sampler contracts, determinism, divergence abort, and
bitwise checkpoint resume."""

import numpy as np
import pytest
from conftest import small_model_config

from expertfuse.config import OptimConfig
from expertfuse.dataio import Record
from expertfuse.exceptions import ConfigError, DataIntegrityError, TrainingDiverged
from expertfuse.params import init_model_params
from expertfuse.training import (
    PairSampler,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    train,
)
from expertfuse.optim import make_optimizer


def planted_records(rng, cfg, n, captions_per_video=1, noise=0.1, present_p=1.0):
    """In-memory planted-correspondence dataset for loop tests."""
    latent = 6
    mix = {e.name: rng.standard_normal((latent, e.dim)) for e in cfg.experts}
    cap_mix = rng.standard_normal((latent, cfg.caption_dim))
    records = []
    for i in range(n):
        z = rng.standard_normal(latent)
        while True:
            present = rng.uniform(size=len(cfg.experts)) < present_p
            if present.any():
                break
        features = {}
        for e, ok in zip(cfg.experts, present):
            if not ok:
                features[e.name] = None
                continue
            t = int(rng.integers(3, 7))
            features[e.name] = z @ mix[e.name] + noise * rng.standard_normal((t, e.dim))
        captions = tuple(
            z @ cap_mix + noise * rng.standard_normal((int(rng.integers(3, 7)), cfg.caption_dim))
            for _ in range(captions_per_video)
        )
        records.append(Record(f"vid{i:04d}", features, captions))
    return records


def fast_optim(**overrides):
    base = dict(optimizer="radam+lookahead", learning_rate=0.01,
                weight_decay=0.0, batch_size=4, max_steps=6)
    base.update(overrides)
    return OptimConfig(**base)


class TestPairSampler:
    def test_same_seed_same_batches(self):
        a = PairSampler(20, 4, seed=3)
        b = PairSampler(20, 4, seed=3)
        for _ in range(12):
            assert a.next_batch() == b.next_batch()

    def test_epoch_is_a_permutation(self):
        sampler = PairSampler(20, 4, seed=0)
        seen = [i for _ in range(5) for i in sampler.next_batch()]
        assert sorted(seen) == list(range(20))

    def test_partial_tail_is_dropped(self):
        sampler = PairSampler(10, 4, seed=0)
        epoch1 = [sampler.next_batch() for _ in range(2)]
        epoch2_first = sampler.next_batch()
        flat1 = [i for b in epoch1 for i in b]
        assert len(flat1) == 8 and len(set(flat1)) == 8
        assert len(epoch2_first) == 4

    def test_state_round_trip_continues_bitwise(self):
        a = PairSampler(13, 3, seed=9)
        for _ in range(5):
            a.next_batch()
        state = a.state()
        b = PairSampler(13, 3, seed=1234)  # different seed, state must win
        b.load_state(state)
        for _ in range(10):
            assert a.next_batch() == b.next_batch()

    def test_too_few_pairs_rejected(self):
        with pytest.raises(ConfigError, match="batch"):
            PairSampler(3, 4, seed=0)


class TestTrainLoop:
    def test_loss_log_shape_and_finiteness(self):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(0)
        records = planted_records(rng, cfg, 8)
        _, log = train(records, cfg, fast_optim(), seed=0)
        assert [entry["step"] for entry in log] == [1, 2, 3, 4, 5, 6]
        assert all(np.isfinite(entry["loss"]) for entry in log)

    def test_fixed_seed_reproduces_the_trajectory_bitwise(self):
        cfg = small_model_config("ce")
        rng = np.random.default_rng(1)
        records = planted_records(rng, cfg, 8, present_p=0.8)
        params_a, log_a = train(records, cfg, fast_optim(), seed=4)
        params_b, log_b = train(records, cfg, fast_optim(), seed=4)
        assert log_a == log_b
        for name, arr in params_a.arrays().items():
            assert np.array_equal(arr, params_b.arrays()[name]), name

    def test_different_seeds_differ(self):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(2)
        records = planted_records(rng, cfg, 8)
        _, log_a = train(records, cfg, fast_optim(), seed=0)
        _, log_b = train(records, cfg, fast_optim(), seed=1)
        assert log_a != log_b

    def test_zero_learning_rate_freezes_parameters(self):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(3)
        records = planted_records(rng, cfg, 8)
        frozen = init_model_params(cfg, seed=5)
        before = {k: v.copy() for k, v in frozen.arrays().items()}
        params, _ = train(records, cfg, fast_optim(learning_rate=0.0), seed=5)
        for name, arr in params.arrays().items():
            assert np.array_equal(arr, before[name]), name

    def test_loss_decreases_on_planted_pairs(self):
        """Median loss over the last sixth of steps must beat the first
        sixth; the pairs are learnable by construction."""
        cfg = small_model_config("moee")
        rng = np.random.default_rng(4)
        records = planted_records(rng, cfg, 16, noise=0.05)
        _, log = train(
            records, cfg,
            fast_optim(batch_size=8, max_steps=90, learning_rate=0.02),
            seed=0,
        )
        losses = [entry["loss"] for entry in log]
        assert np.median(losses[-15:]) < np.median(losses[:15])

    def test_non_finite_loss_aborts_with_step_and_ids(self):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(5)
        records = planted_records(rng, cfg, 8)
        poisoned = records[2]
        poisoned.features["motion"][0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match=r"step \d+.*vid"):
            train(records, cfg, fast_optim(max_steps=12), seed=0)

    def test_too_small_dataset_rejected(self):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(6)
        records = planted_records(rng, cfg, 2)
        with pytest.raises(ConfigError, match="batch_size"):
            train(records, cfg, fast_optim(batch_size=4), seed=0)

    def test_multi_caption_videos_enter_the_pair_pool(self):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(7)
        records = planted_records(rng, cfg, 4, captions_per_video=3)
        # 12 pairs available; batch_size 8 would be impossible with 4 videos
        _, log = train(records, cfg, fast_optim(batch_size=8, max_steps=3), seed=0)
        assert len(log) == 3


class TestCheckpointing:
    def test_resume_equals_uninterrupted_run_bitwise(self, tmp_path):
        cfg = small_model_config("ce")
        rng = np.random.default_rng(8)
        records = planted_records(rng, cfg, 8, present_p=0.8)
        optim = fast_optim(max_steps=12, checkpoint_every=7)

        params_full, log_full = train(
            records, cfg, optim, seed=2, config_digest="d1",
            checkpoint_dir=tmp_path / "full",
        )
        mid = tmp_path / "full" / "checkpoint-000007"
        assert mid.exists()

        params_resumed, log_resumed = train(
            records, cfg, optim, seed=2, config_digest="d1",
            resume_from=mid,
        )
        assert log_resumed == log_full[7:]
        for name, arr in params_full.arrays().items():
            assert np.array_equal(arr, params_resumed.arrays()[name]), name

    def test_final_checkpoint_reloads_into_identical_params(self, tmp_path):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(9)
        records = planted_records(rng, cfg, 8)
        params, _ = train(
            records, cfg, fast_optim(), seed=0, config_digest="h",
            checkpoint_dir=tmp_path,
        )
        saved = load_checkpoint(tmp_path / "checkpoint-final")
        assert saved["step"] == 6
        assert saved["config_hash"] == "h"
        fresh = init_model_params(cfg, seed=777)
        restore_params(fresh, saved["params"])
        for name, arr in params.arrays().items():
            assert np.array_equal(arr, fresh.arrays()[name]), name

    def test_config_hash_mismatch_rejected(self, tmp_path):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(10)
        records = planted_records(rng, cfg, 8)
        train(records, cfg, fast_optim(), seed=0, config_digest="aaa",
              checkpoint_dir=tmp_path)
        with pytest.raises(ConfigError, match="config"):
            train(records, cfg, fast_optim(max_steps=8), seed=0,
                  config_digest="bbb", resume_from=tmp_path / "checkpoint-final")

    def test_param_name_mismatch_rejected(self, tmp_path):
        cfg = small_model_config("moee")
        rng = np.random.default_rng(11)
        records = planted_records(rng, cfg, 8)
        train(records, cfg, fast_optim(), seed=0, checkpoint_dir=tmp_path)
        saved = load_checkpoint(tmp_path / "checkpoint-final")
        other = init_model_params(small_model_config("ce"), seed=0)
        with pytest.raises(DataIntegrityError, match="match"):
            restore_params(other, saved["params"])

    def test_missing_checkpoint_rejected(self, tmp_path):
        with pytest.raises(DataIntegrityError, match="header"):
            load_checkpoint(tmp_path / "nowhere")

    def test_shapes_survive_the_blob_round_trip(self, tmp_path):
        """1-D biases must come back 1-D, not as 1xN matrices."""
        cfg = small_model_config("ce")
        params = init_model_params(cfg, seed=0)
        optimizer = make_optimizer(fast_optim(), params)
        sampler = PairSampler(8, 4, seed=0)
        save_checkpoint(tmp_path / "c", params, optimizer, sampler, 0, "x")
        saved = load_checkpoint(tmp_path / "c")
        for name, arr in params.arrays().items():
            assert saved["params"][name].shape == arr.shape
            assert np.array_equal(saved["params"][name], arr)
