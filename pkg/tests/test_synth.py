"""Synthetic corpus generation: determinism, SNR accuracy, labels, splits."""

import numpy as np
import pytest

from specmap import dsp, formats, synth
from specmap.dsp import frame_count, spectrogram


class TestCleanUtterances:
    def test_same_seed_bitwise_identical(self):
        a = synth.synth_clean_utterance(42, 3)
        b = synth.synth_clean_utterance(42, 3)
        assert np.array_equal(a[0].samples, b[0].samples)
        assert np.array_equal(a[2], b[2])

    def test_single_segment_single_label(self):
        wave, segments, labels = synth.synth_clean_utterance(7, 1, num_classes=10)
        assert len(segments) == 1
        assert np.all(labels == segments[0][0])

    def test_peak_normalized(self):
        wave, _, _ = synth.synth_clean_utterance(9, 4)
        assert np.abs(wave.samples).max() == pytest.approx(0.5)

    def test_label_count_matches_frames(self):
        wave, _, labels = synth.synth_clean_utterance(11, 3)
        assert len(labels) == frame_count(len(wave))

    def test_labels_change_near_boundaries(self):
        wave, segments, labels = synth.synth_clean_utterance(13, 4, num_classes=6)
        for cls, start, end in segments:
            # a frame whose centre is comfortably inside the segment has its label
            centre_frames = [m for m in range(len(labels))
                             if start + 240 <= 160 * m + 200 <= end - 240]
            for m in centre_frames:
                assert labels[m] == cls

    def test_zero_segments_rejected(self):
        with pytest.raises(ValueError):
            synth.synth_clean_utterance(1, 0)

    def test_class_templates_are_fixed(self):
        f0a, ampsa = synth.class_template(5)
        f0b, ampsb = synth.class_template(5)
        assert f0a == f0b and np.array_equal(ampsa, ampsb)
        f0c, _ = synth.class_template(6)
        assert f0c != f0a


class TestNoise:
    @pytest.mark.parametrize("kind", synth.NOISE_KINDS)
    def test_unit_rms(self, kind):
        wave = synth.synth_noise(3, 8000, kind)
        assert np.sqrt(np.mean(wave.samples ** 2)) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("kind", synth.NOISE_KINDS)
    def test_deterministic(self, kind):
        a = synth.synth_noise(5, 4000, kind)
        b = synth.synth_noise(5, 4000, kind)
        assert np.array_equal(a.samples, b.samples)

    def test_lowpass_centroid_below_white(self):
        def centroid(x):
            mags = np.abs(np.fft.rfft(x))
            freqs = np.arange(len(mags))
            return (freqs * mags).sum() / mags.sum()

        white = synth.synth_noise(7, 8000, "white")
        low = synth.synth_noise(7, 8000, "lowpass")
        assert centroid(low.samples) < centroid(white.samples)

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            synth.synth_noise(1, 100, "pink")

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            synth.synth_noise(1, 0)


class TestMixing:
    def test_zero_db_equal_powers(self):
        clean, _, _ = synth.synth_clean_utterance(20, 3)
        noise = synth.synth_noise(21, len(clean))
        noisy, scale = synth.mix_at_snr(clean, noise, 0.0)
        residual = noisy.samples - scale * clean.samples
        p_sig = np.mean((scale * clean.samples) ** 2)
        p_noise = np.mean(residual ** 2)
        assert p_sig / p_noise == pytest.approx(1.0, rel=1e-6)

    def test_achieved_snr_within_hundredth_db(self):
        worst = 0.0
        for i in range(100):
            clean, _, _ = synth.synth_clean_utterance(300 + i, 2)
            noise = synth.synth_noise(400 + i, len(clean),
                                      synth.NOISE_KINDS[i % 3])
            target = synth.SNRS_DB[i % 6]
            noisy, scale = synth.mix_at_snr(clean, noise, target)
            got = synth.measured_snr_db(clean.samples, noisy.samples, scale)
            worst = max(worst, abs(got - target))
        assert worst < 0.01

    def test_snr_set(self):
        assert synth.SNRS_DB == (-6, -3, 0, 3, 6, 9)

    def test_silent_clean_rejected(self):
        clean = dsp.Waveform(np.zeros(1000))
        noise = synth.synth_noise(1, 1000)
        with pytest.raises(ValueError):
            synth.mix_at_snr(clean, noise, 0.0)

    def test_short_noise_rejected(self):
        clean, _, _ = synth.synth_clean_utterance(1, 3)
        noise = synth.synth_noise(1, len(clean) - 100)
        with pytest.raises(ValueError):
            synth.mix_at_snr(clean, noise, 0.0)

    def test_clip_protection(self):
        clean, _, _ = synth.synth_clean_utterance(50, 2)
        noise = synth.synth_noise(51, len(clean))
        noisy, scale = synth.mix_at_snr(clean, noise, -6)
        assert np.abs(noisy.samples).max() <= 1.0
        if scale != 1.0:
            assert scale < 1.0


class TestCorpus:
    def test_default_split_ratio(self):
        sizes = synth.DEFAULT_SPLIT_SIZES
        assert sizes == {"train": 200, "dev": 69, "test": 55}
        # close to the published 7138:2454:1980 proportions
        assert sizes["dev"] / sizes["train"] == pytest.approx(2454 / 7138, abs=0.01)
        assert sizes["test"] / sizes["train"] == pytest.approx(1980 / 7138, abs=0.01)

    def test_round_robin_snrs(self, tiny_corpus):
        _, records = formats.read_manifest(tiny_corpus)
        train = [r for r in records if r.split == "train"]
        counts = {snr: sum(1 for r in train if r.snr_db == snr) for snr in synth.SNRS_DB}
        size = len(train)
        for snr, count in counts.items():
            assert abs(count - size / 6) <= 1

    def test_label_class_coverage(self, tiny_corpus):
        meta, records = formats.read_manifest(tiny_corpus)
        num_classes = int(meta["num_classes"])
        seen = set()
        for rec in records:
            if rec.split == "train":
                seen.update(np.unique(formats.read_labels(rec.label_path)))
        assert seen == set(range(num_classes))

    def test_parallel_frame_counts(self, tiny_corpus):
        _, records = formats.read_manifest(tiny_corpus)
        for rec in records[:6]:
            clean = spectrogram(formats.read_wav(rec.clean_path))
            noisy = spectrogram(formats.read_wav(rec.noisy_path))
            labels = formats.read_labels(rec.label_path)
            assert clean.num_frames == noisy.num_frames == len(labels)

    def test_regeneration_byte_identical(self, tmp_path):
        import hashlib

        def checksum_tree(root):
            digest = hashlib.sha256()
            for path in sorted(root.rglob("*")):
                if path.is_file():
                    digest.update(path.name.encode())
                    digest.update(path.read_bytes())
            return digest.hexdigest()

        a, b = tmp_path / "a", tmp_path / "b"
        synth.build_corpus(a, {"train": 6, "dev": 3}, num_classes=5, seed=9)
        synth.build_corpus(b, {"train": 6, "dev": 3}, num_classes=5, seed=9)
        assert checksum_tree(a) == checksum_tree(b)

    def test_zero_split_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            synth.build_corpus(tmp_path, {"train": 0, "dev": 1})

    def test_splits_use_distinct_ids(self, tiny_corpus):
        _, records = formats.read_manifest(tiny_corpus)
        ids = [r.utt_id for r in records]
        assert len(ids) == len(set(ids))
