#!/usr/bin/env python3
"""
Tests for configuration handling, the optimizer, training steps and
checkpoints.
"""

import io
import json
import warnings

import numpy as np
import pytest

from skelseg import autodiff as ad
from skelseg.checkpoint import MAGIC, decode_state, encode_state, load_checkpoint, save_checkpoint
from skelseg.dataset import load_manifest
from skelseg.errors import (
    CheckpointError, CheckpointVersionError, ChecksumError, ConfigError, NumericError, ParseError
)
from skelseg.trainer import (
    AdamState, FrozenQuantization, Routing, TrainConfig, Trainer, adam_update, load_config
)


@pytest.fixture
def sequences(small_corpus):
    path, _ = small_corpus
    return list(load_manifest(path).sequences())


def _trained(tiny, sequences, epochs=1, **overrides):
    trainer = Trainer(tiny(**overrides))
    state = trainer.init_state(3, 4)
    trainer.fit(state, sequences, epochs=epochs)
    return trainer, state


class TestConfig:
    def test_defaults(self):
        config = TrainConfig().validate()
        assert config.lr == 5e-4
        assert config.hvq.alpha == 2 and config.hvq.beta == 0.5
        assert config.loss.lambda_spat == 0.001 and config.loss.lambda_temp == 0.2
        assert config.spatial_input is Routing.QA and config.temporal_input is Routing.QZ

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="unknown config key 'encoder.depth'"):
            TrainConfig.from_dict({"encoder": {"depth": 3}})
        with pytest.raises(ConfigError, match="unknown config key 'learning_rate'"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": "ten"})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"shuffle": 1})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"spatial_input": "QX"})

    def test_presets_and_overrides(self):
        flat = TrainConfig.from_dict({"preset": "flat"})
        assert flat.hvq.levels == 1 and flat.loss.lambda_temp == 0.0
        custom = TrainConfig.from_dict({"preset": "flat", "loss": {"lambda_temp": 0.5}})
        assert custom.hvq.levels == 1 and custom.loss.lambda_temp == 0.5
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"preset": "deep"})

    @pytest.mark.parametrize("preset,patch,fps,lambda_temp", [
        ("hugadb", 60, None, 0.2),
        ("lara", 50, 50, 0.2),
        ("babel", 30, 30, 0.02),
    ])
    def test_dataset_presets(self, preset, patch, fps, lambda_temp):
        config = TrainConfig.from_dict({"preset": preset})
        assert config.patch_size == patch and config.target_fps == fps
        assert config.loss.lambda_temp == lambda_temp
        assert config.loss.lambda_spat == 0.001 and config.hvq.levels == 2
        assert TrainConfig.from_dict(json.loads(config.to_json())) == config

    def test_hugadb_preset_leaves_inertial_channels_uncentered(self):
        assert TrainConfig.from_dict({"preset": "hugadb"}).root_joint is None

    def test_dict_round_trip(self):
        config = TrainConfig.from_dict({"spatial_input": "both", "target_fps": 15, "hvq": {"num_actions": 5}})
        assert config.spatial_input is Routing.BOTH
        again = TrainConfig.from_dict(json.loads(config.to_json()))
        assert again.to_dict() == config.to_dict()

    def test_nullable_fields(self):
        config = TrainConfig.from_dict({"root_joint": None, "target_fps": None, "hvq": {"num_actions": None}})
        assert config.root_joint is None and config.hvq.num_actions is None

    def test_load_config_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{\"lr\": }")
        with pytest.raises(ParseError):
            load_config(path)

    def test_k_comes_from_dataset(self, tiny):
        trainer = Trainer(tiny(hvq={"num_actions": None}))
        with pytest.raises(ConfigError):
            trainer.init_state(3, 4)
        state = trainer.init_state(3, 4, k_gt=5)
        assert state.config.hvq.level_sizes == [10, 5]


class TestAdam:
    def test_first_step_scalar(self):
        p = ad.parameter([0.0])
        state = adam_update({"p": p}, {"p": np.array([1.0])}, AdamState(), lr=0.1)
        assert p.data[0] == pytest.approx(-0.1, abs=1e-7)
        assert state.m["p"][0] == pytest.approx(0.1)
        assert state.v["p"][0] == pytest.approx(0.001)
        assert state.t == 1

    def test_zero_and_missing_gradients(self, rng):
        p, q = ad.parameter(rng.normal(size=3)), ad.parameter(rng.normal(size=2))
        before = p.data.copy(), q.data.copy()
        adam_update({"p": p, "q": q}, {"p": np.zeros(3), "q": None}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p.data, before[0])
        np.testing.assert_array_equal(q.data, before[1])

    def test_parameters_are_rebound(self):
        p = ad.parameter([1.0])
        old = p.data
        adam_update({"p": p}, {"p": np.array([1.0])}, AdamState(), lr=0.1)
        assert old[0] == 1.0
        assert p.data is not old


class TestTraining:
    def test_step_updates_state(self, tiny, sequences):
        trainer = Trainer(tiny())
        state = trainer.init_state(3, 4)
        batch = [trainer.prepare(s) for s in sequences[:2]]
        before = {k: v.copy() for k, v in state.model.state_arrays().items()}
        state, report, info = trainer.train_step(state, batch)
        assert state.step == 1 and info.step == 1
        assert state.hierarchy.initialized
        assert report.is_finite() and report.total > 0
        assert info.frames == sum(b.shape[2] for b in batch)
        assert [u.size for u in info.usage] == [6, 3]
        changed = [k for k, v in state.model.state_arrays().items() if not np.array_equal(v, before[k])]
        assert changed

    def test_fit_writes_one_row_per_step(self, tiny, sequences):
        trainer = Trainer(tiny())
        state = trainer.init_state(3, 4)
        log = io.StringIO()
        history = trainer.fit(state, sequences, log=log, epochs=2)
        rows = log.getvalue().splitlines()
        assert len(history) == len(rows) == 2 * 3
        assert [int(r.split(",")[0]) for r in rows] == list(range(1, 7))
        assert state.epoch == 2

    def test_same_seed_is_bit_identical(self, tiny, sequences):
        runs = []
        for _ in range(2):
            trainer = Trainer(tiny())
            state = trainer.init_state(3, 4)
            log = io.StringIO()
            trainer.fit(state, sequences, log=log)
            runs.append((log.getvalue(), encode_state(state)))
        assert runs[0] == runs[1]

    def test_temporal_loss_decreases(self, tiny, sequences):
        trainer = Trainer(tiny(lr=1e-2, shuffle=False, batch_size=6))
        state = trainer.init_state(3, 4)
        history = trainer.fit(state, sequences, epochs=40)
        assert np.mean([r.temporal for r in history[-5:]]) < np.mean([r.temporal for r in history[:5]])

    def test_total_falls_on_a_fixed_batch(self, tiny, sequences):
        trainer = Trainer(tiny(lr=5e-3))
        state = trainer.init_state(3, 4)
        batch = [trainer.prepare(s) for s in sequences[:2]]
        reports = []
        for _ in range(50):
            state, report, _ = trainer.train_step(state, batch)
            reports.append(report)
        assert reports[-1].total < reports[0].total
        for report in reports:
            assert report.recompute_total(trainer.config.loss) == pytest.approx(report.total, rel=1e-9, abs=1e-9)

    def test_all_zero_weights_leave_parameters_untouched(self, tiny, sequences):
        trainer = Trainer(tiny(loss={"lambda_commit": 0.0, "lambda_spat": 0.0, "lambda_temp": 0.0}))
        state = trainer.init_state(3, 4)
        before = {k: v.copy() for k, v in state.model.state_arrays().items()}
        trainer.fit(state, sequences, epochs=2)
        for name, value in state.model.state_arrays().items():
            np.testing.assert_array_equal(value, before[name])

    def test_ragged_batch_gradient_is_sum_of_sequence_gradients(self, tiny, sequences):
        trainer = Trainer(tiny())
        state = trainer.init_state(3, 4)
        ragged = list({s.num_frames: s for s in sequences}.values())[:3]
        assert len(ragged) > 1
        batch = [trainer.prepare(s) for s in ragged]
        trainer.ensure_codebooks(state, batch)

        params = state.model.named_parameters()
        expected = {name: np.zeros_like(p.data) for name, p in params.items()}
        for skeletons in batch:
            state.model.zero_grad()
            ad.backward(trainer.compute_losses(state, skeletons).loss)
            for name, p in params.items():
                if p.grad is not None:
                    expected[name] += p.grad

        trainer.train_step(state, batch)
        for name, p in params.items():
            accumulated = p.grad if p.grad is not None else np.zeros_like(expected[name])
            np.testing.assert_allclose(accumulated, expected[name], rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("field,module", [("lambda_spat", "spatial_decoder"),
                                              ("lambda_temp", "temporal_decoder")])
    def test_zero_weight_freezes_its_decoder(self, tiny, sequences, field, module):
        trainer = Trainer(tiny(loss={field: 0.0}))
        state = trainer.init_state(3, 4)
        before = {k: v.copy() for k, v in state.model.state_arrays().items()}
        trainer.fit(state, sequences, epochs=1)
        moved = []
        for name, value in state.model.state_arrays().items():
            if name.startswith(module + "."):
                np.testing.assert_array_equal(value, before[name])
            elif not np.array_equal(value, before[name]):
                moved.append(name)
        assert any(name.startswith("encoder.") for name in moved)

    def test_non_finite_loss_aborts(self, tiny, sequences):
        trainer = Trainer(tiny())
        state = trainer.init_state(3, 4)
        batch = [trainer.prepare(sequences[0])]
        trainer.train_step(state, batch)
        state.model.named_parameters()["encoder.stage0.conv_in.bias"].data[:] = np.nan
        with pytest.raises(NumericError):
            trainer.train_step(state, batch)

    def test_inference_needs_codebooks(self, tiny, sequences):
        trainer = Trainer(tiny())
        with pytest.raises(ConfigError):
            trainer.infer_patch_indices(trainer.init_state(3, 4), sequences[0])

    def test_inference_indices_per_patch(self, tiny, sequences):
        trainer, state = _trained(tiny, sequences)
        indices = trainer.infer_patch_indices(state, sequences[0])
        assert len(indices) == -(-sequences[0].num_frames // 3)
        assert indices.max() < 3

    @pytest.mark.parametrize("overrides", [
        {"hvq": {"levels": 1}},
        {"hvq": {"levels": 3}},
        {"hvq": {"alpha": 1}},
        {"hvq": {"alpha": 3}},
        {"hvq": {"ema_mode": "normalized"}},
        {"spatial_input": "QZ", "temporal_input": "QA"},
        {"spatial_input": "both", "temporal_input": "both"},
        {"loss": {"lambda_commit": 0.0, "lambda_spat": 0.0, "lambda_temp": 0.0}},
        {"precision": "float32"},
        {"target_fps": 15, "root_joint": None},
        {"encoder": {"dropout": 0.2}},
    ])
    def test_variants_run(self, tiny, sequences, overrides):
        _, state = _trained(tiny, sequences, **overrides)
        assert state.step == 3


class TestFullModelGradient:
    def test_composite_loss_matches_finite_differences(self, tiny, rng):
        trainer = Trainer(tiny(encoder={"hidden": 4, "latent": 4}, temporal_decoder={"hidden": [4, 3]},
                               loss={"lambda_spat": 0.5, "lambda_temp": 0.5}))
        state = trainer.init_state(3, 3)
        skeletons = rng.normal(size=(1, 3, 6, 3))
        trainer.ensure_codebooks(state, [skeletons])
        first = trainer.compute_losses(state, skeletons)
        frozen = FrozenQuantization(first.output.assignment, first.patches.data.copy())
        assert ad.check_gradients(lambda: trainer.compute_losses(state, skeletons, frozen).loss,
                                  state.model.parameters())


class TestCheckpoint:
    def test_round_trip_then_step_matches(self, tiny, sequences):
        trainer, state = _trained(tiny, sequences)
        restored = decode_state(encode_state(state))
        batch = [trainer.prepare(s) for s in sequences[:2]]
        _, direct, _ = trainer.train_step(state, batch)
        _, resumed, _ = Trainer(restored.config).train_step(restored, batch)
        assert direct == resumed
        assert encode_state(state) == encode_state(restored)

    def test_restore_is_warning_free_and_keeps_adam_counter(self, tiny, sequences):
        _, state = _trained(tiny, sequences)
        data = encode_state(state)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            restored = decode_state(data)
        assert restored.optimizer.t == state.optimizer.t == 3

    def test_resume_equals_uninterrupted(self, tiny, sequences, tmp_path):
        _, straight = _trained(tiny, sequences, epochs=2)
        trainer, half = _trained(tiny, sequences, epochs=1)
        save_checkpoint(half, tmp_path / "half.ckpt")
        resumed = load_checkpoint(tmp_path / "half.ckpt")
        Trainer(resumed.config).fit(resumed, sequences, epochs=2)
        assert encode_state(resumed) == encode_state(straight)

    def test_save_is_deterministic(self, tiny, sequences, tmp_path):
        _, state = _trained(tiny, sequences)
        save_checkpoint(state, tmp_path / "a.ckpt")
        save_checkpoint(state, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes()[:4] == MAGIC

    def test_truncated(self, tiny, sequences):
        _, state = _trained(tiny, sequences)
        data = encode_state(state)
        for cut in (len(data) - 1, len(data) // 2, 6):
            with pytest.raises(ChecksumError):
                decode_state(data[:cut])

    def test_corrupted_payload(self, tiny, sequences):
        _, state = _trained(tiny, sequences)
        data = bytearray(encode_state(state))
        data[-10] ^= 0xFF
        with pytest.raises(ChecksumError):
            decode_state(bytes(data))

    def test_version_mismatch(self, tiny, sequences):
        _, state = _trained(tiny, sequences)
        data = bytearray(encode_state(state))
        data[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(CheckpointVersionError):
            decode_state(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            decode_state(b"NOPE" + bytes(12))
