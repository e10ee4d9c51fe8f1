"""Feature pipeline: framing, FFT, log magnitudes, splicing, deltas."""

import numpy as np
import pytest

from specmap import dsp
from specmap.dsp import (Spectrogram, Waveform, deltas, fft_512, fft_512_batch,
                         frame_and_window, frame_count, hamming_window, log_magnitude,
                         mean_normalize, spectrogram, splice, static_delta_stack,
                         with_deltas)


def naive_dft(x):
    n = 512
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ np.pad(x, (0, n - len(x)))


class TestFraming:
    def test_minimum_length_gives_one_frame(self):
        frames = frame_and_window(np.ones(400))
        assert frames.shape == (1, 400)

    def test_one_second_gives_98_frames(self):
        assert frame_and_window(np.zeros(16000)).shape[0] == 98
        assert frame_count(16000) == 98

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            frame_and_window(np.zeros(399))

    def test_hamming_endpoints_and_symmetry(self):
        h = hamming_window()
        assert h[0] == pytest.approx(0.08)
        assert np.abs(h - h[::-1]).max() < 1e-12

    def test_frame_offsets(self):
        sig = np.arange(1000, dtype=float)
        frames = frame_and_window(sig)
        h = hamming_window()
        for t in range(frames.shape[0]):
            assert np.array_equal(frames[t], sig[160 * t : 160 * t + 400] * h)

    def test_frame_count_law_exhaustive(self):
        for n in range(400, 4001):
            assert frame_count(n) == 1 + (n - 400) // 160


class TestFFT:
    def test_impulse(self):
        x = np.zeros(400)
        x[0] = 1.0
        assert np.abs(fft_512(x) - 1.0).max() < 1e-12

    def test_dc_over_full_length(self):
        spec = fft_512(np.ones(512))
        assert spec[0] == pytest.approx(512.0)
        assert np.abs(spec[1:]).max() < 1e-9

    def test_matches_naive_dft_100_frames(self):
        rng = np.random.default_rng(0)
        frames = rng.standard_normal((100, 400))
        got = fft_512_batch(frames)
        worst = max(np.abs(got[i] - naive_dft(frames[i])).max() for i in range(100))
        assert worst < 1e-9

    def test_parseval(self):
        rng = np.random.default_rng(1)
        for seed in range(10):
            x = np.random.default_rng(seed).standard_normal(512)
            spec = fft_512(x)
            time_e = np.sum(np.abs(x) ** 2)
            freq_e = np.sum(np.abs(spec) ** 2) / 512
            assert abs(time_e - freq_e) / time_e < 1e-10
        _ = rng

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal(400), rng.standard_normal(400)
        lhs = fft_512(2.5 * x - 1.25 * y)
        rhs = 2.5 * fft_512(x) - 1.25 * fft_512(y)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_overlong_frame_rejected(self):
        with pytest.raises(ValueError):
            fft_512(np.zeros(513))


class TestLogMagnitude:
    def test_output_width(self):
        assert log_magnitude(fft_512(np.random.default_rng(3).standard_normal(400))).shape == (257,)

    def test_zero_spectrum_floors(self):
        assert np.all(log_magnitude(np.zeros(512, dtype=complex)) == np.log(1e-8))

    def test_unit_magnitude_gives_zero(self):
        assert np.abs(log_magnitude(np.ones(512, dtype=complex))).max() == 0.0


class TestSpectrogram:
    def test_column_count(self):
        wave = Waveform(np.random.default_rng(4).standard_normal(3200) * 0.1)
        s = spectrogram(wave)
        assert s.frames.shape == (frame_count(3200), 257)

    def test_mean_normalize_removes_means(self):
        wave = Waveform(np.random.default_rng(5).standard_normal(3200) * 0.1)
        s = mean_normalize(spectrogram(wave))
        assert np.abs(s.frames.mean(axis=0)).max() < 1e-12
        assert s.normalized

    def test_constant_spectrogram_normalizes_to_zero(self):
        s = Spectrogram(np.full((6, 257), 3.25))
        assert np.all(mean_normalize(s).frames == 0.0)

    def test_double_normalization_rejected(self):
        s = mean_normalize(Spectrogram(np.random.default_rng(6).standard_normal((5, 257))))
        with pytest.raises(ValueError):
            mean_normalize(s)

    def test_offset_invariance(self):
        base = np.random.default_rng(7).standard_normal((9, 257))
        a = mean_normalize(Spectrogram(base.copy()))
        b = mean_normalize(Spectrogram(base + 3.7))
        assert np.abs(a.frames - b.frames).max() < 1e-12

    def test_normalize_idempotent_in_effect(self):
        base = np.random.default_rng(8).standard_normal((9, 257))
        base -= base.mean(axis=0)
        out = mean_normalize(Spectrogram(base.copy()))
        assert np.abs(out.frames - base).max() < 1e-12


class TestSplice:
    def test_width_2827(self):
        mat = np.random.default_rng(9).standard_normal((20, 257))
        assert splice(mat).shape == (20, 2827)

    def test_edge_replication(self):
        mat = np.random.default_rng(10).standard_normal((8, 257))
        row0 = splice(mat)[0].reshape(11, 257)
        for pos in range(6):  # offsets -5..0 all clip to frame 0
            assert np.array_equal(row0[pos], mat[0])

    def test_interior_concatenation(self):
        mat = np.random.default_rng(11).standard_normal((16, 257))
        row = splice(mat)[8].reshape(11, 257)
        assert np.array_equal(row, mat[3:14])

    def test_unsplice_center_roundtrip(self):
        mat = np.random.default_rng(12).standard_normal((10, 257))
        center = splice(mat)[:, 5 * 257 : 6 * 257]
        assert np.array_equal(center, mat)


class TestDeltas:
    def test_final_width_8481(self):
        mat = np.random.default_rng(13).standard_normal((12, 257))
        assert with_deltas(mat).shape == (12, 8481)
        assert static_delta_stack(mat).shape == (12, 771)

    def test_constant_sequence_zero_deltas(self):
        mat = np.full((9, 5), 2.5)
        assert np.all(deltas(mat) == 0)
        stacked = static_delta_stack(mat)
        assert np.all(stacked[:, 5:] == 0)

    def test_linear_ramp_gives_slope(self):
        c = 0.75
        mat = c * np.arange(12)[:, None] * np.ones((1, 4))
        d = deltas(mat)
        assert np.abs(d[2:-2] - c).max() < 1e-12
