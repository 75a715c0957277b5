"""Tests for the synthetic audio-visual corpus."""
import pickle
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))
import avcorpus
import config
from errors import AlreadyCropped, ConfigError, DurationOutOfRange, ShapeError

from tests.conftest import TINY_CORPUS


@pytest.fixture(scope="module")
def profiles():
    return {avcorpus.speaker_name(i): avcorpus.make_speaker(5, i, avcorpus.GROUPS[i % 2]) for i in range(4)}


class TestSeeds:
    def test_stable_seed_is_deterministic(self):
        assert avcorpus.stable_seed(1, "a", 2) == avcorpus.stable_seed(1, "a", 2)
        assert avcorpus.stable_seed(1, "a", 2) != avcorpus.stable_seed(1, "a", 3)
        assert 0 <= avcorpus.stable_seed("x") < 2 ** 64

    def test_speaker_names(self):
        assert avcorpus.speaker_name(7) == "spk0007"
        assert avcorpus.speaker_index("spk0007") == 7


class TestSpeakers:
    def test_make_speaker_is_deterministic(self):
        a = avcorpus.make_speaker(5, 2, "low")
        b = avcorpus.make_speaker(5, 2, "low")
        assert a.f0_hz == b.f0_hz
        np.testing.assert_array_equal(a.face_template, b.face_template)

    def test_group_sets_pitch_range(self, profiles):
        for profile in profiles.values():
            lo, hi = avcorpus.F0_RANGES[profile.group]
            assert lo <= profile.f0_hz <= hi

    def test_templates_differ(self, profiles):
        a, b = profiles["spk0000"].face_template, profiles["spk0001"].face_template
        assert a.shape == (32, 32)
        assert np.abs(a - b).mean() > 0
        ids = sorted(profiles)
        for i, first in enumerate(ids):
            for second in ids[i + 1:]:
                diff = np.abs(profiles[first].face_template - profiles[second].face_template)
                assert diff.max() > 0.05, (first, second)

    def test_bad_group(self):
        with pytest.raises(ConfigError):
            avcorpus.make_speaker(5, 0, "middle")

    def test_negative_index(self):
        with pytest.raises(ConfigError):
            avcorpus.make_speaker(5, -1, "low")


class TestStreams:
    def test_waveform_rejects_empty(self):
        with pytest.raises(ShapeError):
            avcorpus.Waveform(np.zeros(0))

    def test_waveform_rejects_nan(self):
        with pytest.raises(ShapeError):
            avcorpus.Waveform(np.array([0.0, np.nan]))

    def test_video_must_be_square(self):
        with pytest.raises(ShapeError):
            avcorpus.VideoStream(np.zeros((3, 32, 16)))


class TestSynthUtterance:
    def test_lengths_are_frame_aligned(self, profiles):
        utt = avcorpus.synth_utterance(profiles["spk0000"], 42, 4.2)
        assert len(utt.video) == 105
        assert len(utt.audio) == 105 * 320
        assert len(utt.aperture) == 105
        assert np.max(np.abs(utt.audio.samples)) == pytest.approx(0.9)

    def test_aperture_range(self, profiles):
        utt = avcorpus.synth_utterance(profiles["spk0001"], 7, 4.0)
        assert utt.aperture.min() >= 0.0
        assert utt.aperture.max() <= 1.0

    def test_mouth_follows_audio(self, profiles):
        for sid, profile in sorted(profiles.items()):
            for seed, duration in ((9, 5.0), (2, 4.0), (31, 5.9)):
                utt = avcorpus.synth_utterance(profile, seed, duration)
                assert avcorpus.sync_correlation(utt) >= 0.9, (sid, seed)

    def test_same_seed_same_utterance(self, profiles):
        a = avcorpus.synth_utterance(profiles["spk0003"], 1, 4.0)
        b = avcorpus.synth_utterance(profiles["spk0003"], 1, 4.0)
        np.testing.assert_array_equal(a.audio.samples, b.audio.samples)
        np.testing.assert_array_equal(a.video.frames, b.video.frames)

    @pytest.mark.parametrize("duration", [3.9, 6.1])
    def test_duration_out_of_range(self, profiles, duration):
        with pytest.raises(DurationOutOfRange):
            avcorpus.synth_utterance(profiles["spk0000"], 1, duration)


class TestMouthCrop:
    def test_crop_keeps_resolution(self, profiles):
        utt = avcorpus.synth_utterance(profiles["spk0000"], 3, 4.0)
        mouth = avcorpus.crop_mouth(utt.video)
        assert mouth.field == "mouth"
        assert mouth.frames.shape == utt.video.frames.shape

    def test_crop_twice(self, profiles):
        utt = avcorpus.synth_utterance(profiles["spk0000"], 3, 4.0)
        with pytest.raises(AlreadyCropped):
            avcorpus.crop_mouth(avcorpus.crop_mouth(utt.video))

    def test_crop_is_speaker_independent(self, profiles):
        aperture = np.linspace(0.0, 1.0, 10)
        crops = [
            avcorpus.crop_mouth(avcorpus.VideoStream(avcorpus.render_frames(p.face_template, aperture))).frames
            for p in profiles.values()
        ]
        for crop in crops[1:]:
            np.testing.assert_allclose(crop, crops[0])

    def test_identity_by_nearest_template(self, profiles):
        ids = sorted(profiles)
        utts = [avcorpus.synth_utterance(profiles[sid], 100 + i, 4.0) for i, sid in enumerate(ids)]
        faces = [u.video for u in utts]
        mouths = [avcorpus.crop_mouth(u.video) for u in utts]
        assert avcorpus.nearest_template_accuracy(faces, ids, profiles) == 1.0
        assert avcorpus.nearest_template_accuracy(mouths, ids, profiles) <= 1.0 / len(ids)


class TestCorpus:
    def test_counts(self, manifest):
        per_split = TINY_CORPUS["train_speakers"] * TINY_CORPUS["utterances_per_speaker"]
        assert manifest.counts == {"train": per_split, "dev": per_split, "test": per_split}

    def test_splits_are_disjoint(self, manifest):
        sets = [{sid for sid, _ in manifest.speakers(s)} for s in config.SPLITS]
        assert not sets[0] & sets[1]
        assert not sets[0] & sets[2]
        assert not sets[1] & sets[2]

    def test_groups_balanced(self, manifest):
        for split in config.SPLITS:
            groups = [g for _, g in manifest.speakers(split)]
            assert groups.count("low") == groups.count("high")

    def test_paths_relative(self, manifest, corpus_dir):
        for rec in manifest.records:
            assert not Path(rec.audio_path).is_absolute()
            assert (corpus_dir / rec.audio_path).exists()
            assert (corpus_dir / rec.video_path).exists()
            assert TINY_CORPUS["min_duration_s"] <= rec.duration_s <= TINY_CORPUS["max_duration_s"]

    def test_splits_view(self, manifest):
        entries = manifest.splits["train"]
        assert len(entries) == TINY_CORPUS["train_speakers"]
        speaker_id, paths, group = entries[0]
        assert len(paths) == TINY_CORPUS["utterances_per_speaker"]
        assert group in avcorpus.GROUPS

    def test_store_loads_aligned_streams(self, manifest, store):
        rec = manifest.records[0]
        utt = store.get(rec.utt_id)
        assert utt.speaker_id == rec.speaker_id
        assert utt.group == rec.group
        assert len(utt.audio) == len(utt.video) * (manifest.sample_rate // manifest.fps)
        assert utt.video.field == "face"
        assert rec.utt_id in store

    def test_store_unknown_utterance(self, store):
        with pytest.raises(ConfigError):
            store.get("spk9999_u000")

    def test_store_pickles(self, manifest, store):
        clone = pickle.loads(pickle.dumps(store))
        utt_id = manifest.records[1].utt_id
        np.testing.assert_array_equal(clone.get(utt_id).audio.samples, store.get(utt_id).audio.samples)

    def test_rebuild_is_identical(self, manifest, corpus_dir, tmp_path):
        avcorpus.build_corpus(config.CorpusConfig(**TINY_CORPUS), tmp_path)
        assert (tmp_path / "manifest.jsonl").read_bytes() == (corpus_dir / "manifest.jsonl").read_bytes()
        rec = manifest.records[-1]
        assert (tmp_path / rec.audio_path).read_bytes() == (corpus_dir / rec.audio_path).read_bytes()
        assert (tmp_path / rec.video_path).read_bytes() == (corpus_dir / rec.video_path).read_bytes()

    def test_load_manifest_from_file(self, corpus_dir, manifest):
        loaded = avcorpus.load_manifest(corpus_dir / "manifest.jsonl")
        assert loaded.records == manifest.records
        assert loaded.digest() == manifest.digest()

    def test_load_manifest_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            avcorpus.load_manifest(tmp_path)

    def test_too_few_utterances(self, tmp_path):
        with pytest.raises(ConfigError):
            avcorpus.build_corpus(config.CorpusConfig(**{**TINY_CORPUS, "utterances_per_speaker": 1}), tmp_path)

    def test_too_few_speakers(self, tmp_path):
        with pytest.raises(ConfigError):
            avcorpus.build_corpus(config.CorpusConfig(**{**TINY_CORPUS, "test_speakers": 3}), tmp_path)
