#!/usr/bin/env python3
"""
Tests for sequence files, label files, manifests, normalization, timestamps
and the synthetic corpus generator.
"""

import hashlib
import json

import numpy as np
import pytest

from skelseg.dataset import (
    SEQUENCE_HEADER, DatasetManifest, ManifestItem, SkeletonSequence, SynthConfig, build_motifs,
    center_at_root, downsample, load_manifest, load_sequence, make_timestamps, prepare_sequence, read_labels,
    read_sequence, synth_generate, write_labels, write_sequence
)
from skelseg.errors import ConfigError, DataValidationError, ParseError


def _digest(directory):
    h = hashlib.sha256()
    for path in sorted(directory.iterdir()):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


class TestFiles:
    def test_sequence_round_trip(self, tmp_path, rng):
        joints = rng.normal(size=(3, 2, 2)).astype(np.float32)
        write_sequence(SkeletonSequence(joints=joints, fps=30), tmp_path / "a.skl")
        seq = read_sequence(tmp_path / "a.skl")
        assert seq.joints.shape == (3, 2, 2)
        assert seq.fps == 30
        assert seq.sequence_id == "a"
        np.testing.assert_array_equal(seq.joints, joints)

    def test_truncated_sequence_reports_offset(self, tmp_path, rng):
        path = tmp_path / "a.skl"
        write_sequence(SkeletonSequence(joints=rng.normal(size=(3, 4, 2)), fps=30), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ParseError) as info:
            read_sequence(path)
        assert info.value.offset is not None
        assert info.value.offset >= SEQUENCE_HEADER.size

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.skl"
        path.write_bytes(b"NOPE" + bytes(SEQUENCE_HEADER.size))
        with pytest.raises(ParseError):
            read_sequence(path)

    def test_labels_round_trip_and_blank_lines(self, tmp_path):
        write_labels(np.array([0, 0, 2, 1]), tmp_path / "a.labels")
        np.testing.assert_array_equal(read_labels(tmp_path / "a.labels"), [0, 0, 2, 1])
        (tmp_path / "b.labels").write_text("1\n\n2\n")
        np.testing.assert_array_equal(read_labels(tmp_path / "b.labels"), [1, 2])

    def test_bad_label_names_line(self, tmp_path):
        (tmp_path / "a.labels").write_text("0\n1\nx\n")
        with pytest.raises(ParseError) as info:
            read_labels(tmp_path / "a.labels")
        assert info.value.line == 3

    def test_label_beyond_int64_is_parse_error(self, tmp_path):
        (tmp_path / "a.labels").write_text("0\n99999999999999999999\n")
        with pytest.raises(ParseError) as info:
            read_labels(tmp_path / "a.labels")
        assert info.value.line == 2

    def test_label_length_mismatch(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(3, 4, 2)), fps=30, labels=np.array([0, 1, 1]))
        with pytest.raises(DataValidationError, match="label length mismatch"):
            seq.validate()

    def test_validate_rejects_bad_shapes(self, rng):
        with pytest.raises(DataValidationError):
            SkeletonSequence(joints=rng.normal(size=(4, 5, 2)), fps=30).validate()
        with pytest.raises(DataValidationError):
            SkeletonSequence(joints=rng.normal(size=(3, 5, 1)), fps=30).validate()
        joints = rng.normal(size=(3, 5, 2))
        joints[0, 0, 0] = np.nan
        with pytest.raises(DataValidationError):
            SkeletonSequence(joints=joints, fps=30).validate()

    def test_label_out_of_range(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(3, 2, 2)), fps=30, labels=np.array([0, 3]))
        with pytest.raises(DataValidationError):
            seq.validate(k_gt=3)

    def test_manifest_relative_paths(self, tmp_path, rng):
        data = tmp_path / "data"
        data.mkdir()
        write_sequence(SkeletonSequence(joints=rng.normal(size=(3, 4, 2)), fps=30), data / "s1.skl")
        write_labels(np.array([0, 0, 1, 1]), data / "s1.labels")
        doc = {"k_gt": 2, "fps": 30, "v": 2, "c": 3,
               "items": [{"seq": "s1.skl", "labels": "s1.labels", "activity": "walk"}]}
        (data / "manifest.json").write_text(json.dumps(doc))
        manifest = load_manifest(data / "manifest.json")
        assert manifest.items[0].sequence_id == "s1"
        seq = load_sequence(manifest.items[0], manifest)
        assert seq.activity == "walk"
        np.testing.assert_array_equal(seq.labels, [0, 0, 1, 1])

    def test_manifest_missing_file(self, tmp_path):
        doc = {"k_gt": 2, "fps": 30, "v": 2, "c": 3, "items": [{"seq": "missing.skl"}]}
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DataValidationError):
            load_manifest(tmp_path / "manifest.json")

    def test_manifest_invalid_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{\n  \"k_gt\": ,\n}")
        with pytest.raises(ParseError) as info:
            load_manifest(tmp_path / "manifest.json")
        assert info.value.line == 2

    @pytest.mark.parametrize("key,value", [("k_gt", "four"), ("fps", None), ("v", [4]), ("c", 2.5), ("k_gt", True),
                                           ("fps", 1e400)])
    def test_manifest_non_integer_field_names_key(self, tmp_path, key, value):
        doc = {"k_gt": 2, "fps": 30, "v": 2, "c": 3, "items": []}
        doc[key] = value
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DataValidationError) as info:
            load_manifest(tmp_path / "manifest.json")
        assert info.value.field == key

    def test_manifest_items_must_be_list(self, tmp_path):
        doc = {"k_gt": 2, "fps": 30, "v": 2, "c": 3, "items": 5}
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DataValidationError):
            load_manifest(tmp_path / "manifest.json")

    def test_manifest_joint_count_disagreement(self, tmp_path, rng):
        write_sequence(SkeletonSequence(joints=rng.normal(size=(3, 4, 5)), fps=30), tmp_path / "s.skl")
        manifest = DatasetManifest(items=[ManifestItem(seq=tmp_path / "s.skl")], k_gt=2, fps=30, v=4, c=3,
                                   root=tmp_path)
        with pytest.raises(DataValidationError):
            manifest.validate(load=True)


class TestNormalization:
    def test_center_at_root_hand_example(self):
        joints = np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])[:, None, :]
        centered = center_at_root(SkeletonSequence(joints=joints, fps=30), 0)
        np.testing.assert_array_equal(centered.joints[:, 0, 0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(centered.joints[:, 0, 1], [1.0, 2.0, 3.0])

    def test_center_at_root_keeps_inter_joint_distances(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(3, 7, 5)) * 10.0, fps=30)
        centered = center_at_root(seq, 2)

        def distances(joints):
            return np.linalg.norm(joints[:, :, :, None] - joints[:, :, None, :], axis=0)

        np.testing.assert_allclose(distances(centered.joints), distances(seq.joints), rtol=0, atol=1e-9)

    def test_center_rejects_six_channels(self, rng):
        with pytest.raises(DataValidationError):
            center_at_root(SkeletonSequence(joints=rng.normal(size=(6, 3, 2)), fps=30), 0)

    def test_center_root_out_of_range(self, rng):
        with pytest.raises(DataValidationError):
            center_at_root(SkeletonSequence(joints=rng.normal(size=(3, 3, 2)), fps=30), 5)

    def test_downsample_stride(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(3, 8, 2)), fps=200,
                               labels=np.array([0, 0, 0, 0, 1, 1, 1, 1]))
        out = downsample(seq, 50)
        assert out.num_frames == 2
        assert out.fps == 50
        np.testing.assert_array_equal(out.joints, seq.joints[:, [0, 4]])
        np.testing.assert_array_equal(out.labels, [0, 1])

    def test_downsample_identity(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(3, 8, 2)), fps=30)
        assert downsample(seq, 30) is seq

    def test_downsample_non_divisor(self, rng):
        with pytest.raises(DataValidationError):
            downsample(SkeletonSequence(joints=rng.normal(size=(3, 8, 2)), fps=30), 7)

    def test_prepare_passes_six_channels_through(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(6, 4, 3)), fps=30)
        np.testing.assert_array_equal(prepare_sequence(seq, 0).joints, seq.joints)

    def test_prepare_downsamples_then_centers(self, rng):
        seq = SkeletonSequence(joints=rng.normal(size=(3, 8, 3)), fps=60)
        out = prepare_sequence(seq, root_joint=1, target_fps=30)
        assert out.num_frames == 4
        assert not np.any(out.joints[:, :, 1])

    @pytest.mark.parametrize("frames,patch,expected", [
        (6, 3, [0.0, 1.0]),
        (9, 3, [0.0, 0.5, 1.0]),
        (4, 5, [0.0]),
        (7, 3, [0.0, 0.5, 1.0]),
    ])
    def test_timestamps(self, frames, patch, expected):
        np.testing.assert_array_equal(make_timestamps(frames, patch).values, expected)


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        config = SynthConfig(sequences=3, seed=3)
        synth_generate(tmp_path / "a", config)
        synth_generate(tmp_path / "b", config)
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        synth_generate(tmp_path / "a", SynthConfig(sequences=2, seed=1))
        synth_generate(tmp_path / "b", SynthConfig(sequences=2, seed=2))
        assert _digest(tmp_path / "a") != _digest(tmp_path / "b")

    def test_corpus_is_valid_and_covers_classes(self, small_corpus):
        path, _ = small_corpus
        manifest = load_manifest(path)
        seen = set()
        for seq in manifest.sequences():
            assert seq.joint_dim == 3 and seq.num_joints == 4
            seen.update(int(x) for x in np.unique(seq.labels))
        assert seen == {0, 1, 2}

    def test_segment_lengths(self, small_corpus):
        _, manifest = small_corpus
        for item in manifest.items:
            labels = read_labels(item.labels)
            cuts = np.flatnonzero(np.diff(labels)) + 1
            lengths = np.diff(np.concatenate([[0], cuts, [len(labels)]]))
            assert all(n == 3 or 6 <= n <= 24 for n in lengths)
            assert np.all(labels[cuts] != labels[cuts - 1])

    def test_class_offsets_are_separated(self):
        config = SynthConfig(classes=5)
        motifs = build_motifs(config)
        flat = motifs.offsets.reshape(5, -1)
        gaps = np.linalg.norm(flat[:, None] - flat[None], axis=-1) + np.eye(5) * 1e9
        assert gaps.min() > config.min_separation

    def test_noise_free_segments_of_a_class_share_frames(self, tmp_path):
        synth_generate(tmp_path, SynthConfig(classes=3, sequences=4, mean_segments=4, patch_size=3, noise=0.0, seed=9))
        starts = {}
        for seq in load_manifest(tmp_path / "manifest.json").sequences():
            cuts = np.concatenate([[0], np.flatnonzero(np.diff(seq.labels)) + 1, [seq.num_frames]])
            for begin, end in zip(cuts[:-1], cuts[1:]):
                starts.setdefault(int(seq.labels[begin]), []).append(seq.joints[:, begin:end])
        for segments in starts.values():
            shortest = min(s.shape[1] for s in segments)
            for other in segments[1:]:
                np.testing.assert_array_equal(other[:, :shortest], segments[0][:, :shortest])

    def test_rejects_single_class(self, tmp_path):
        with pytest.raises(ConfigError):
            synth_generate(tmp_path, SynthConfig(classes=1))
