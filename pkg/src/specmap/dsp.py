"""Waveform-to-feature pipeline: framing, FFT, log magnitudes, splicing.

16 kHz audio is cut into 400-sample (25 ms) Hamming windows every 160
samples (10 ms), transformed with a 512-point radix-2 FFT, and reduced to
the 257 non-redundant log-magnitude bins. Context splicing and delta
stacking produce the mapper/classifier input rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
WINDOW = 400
HOP = 160
NFFT = 512
BINS = 257
CONTEXT = 5
LOG_FLOOR = 1e-8


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")

    def __len__(self):
        return self.samples.size


@dataclass
class Spectrogram:
    """T x 257 matrix of log magnitudes; `normalized` marks mean removal."""

    frames: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != BINS:
            raise ValueError(f"spectrogram must be T x {BINS}, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def frame_count(num_samples: int) -> int:
    if num_samples < WINDOW:
        raise ValueError(f"signal shorter than one window ({num_samples} < {WINDOW})")
    return 1 + (num_samples - WINDOW) // HOP


def hamming_window(n: int = WINDOW) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))


_WINDOW = hamming_window()


def frame_and_window(samples: np.ndarray) -> np.ndarray:
    """Slice a signal into overlapping windowed frames, shape (T, 400)."""
    samples = np.asarray(samples, dtype=np.float64)
    t = frame_count(samples.size)
    offsets = HOP * np.arange(t)[:, None] + np.arange(WINDOW)[None, :]
    return samples[offsets] * _WINDOW


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(n):
        r = 0
        v = i
        for _ in range(bits):
            r = (r << 1) | (v & 1)
            v >>= 1
        rev[i] = r
    return rev


_BITREV = _bit_reverse_permutation(NFFT)
_TWIDDLES = {
    m: np.exp(-2j * np.pi * np.arange(m // 2) / m)
    for m in (2 ** s for s in range(1, 10))
}


def fft_512_batch(frames: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT of zero-padded rows.

    Accepts (T, n) with n <= 512 and returns (T, 512) complex bins with the
    convention X[k] = sum_n x[n] exp(-2 pi i k n / 512).
    """
    frames = np.atleast_2d(np.asarray(frames))
    t, n = frames.shape
    if n > NFFT:
        raise ValueError(f"frame length {n} exceeds FFT size {NFFT}")
    x = np.zeros((t, NFFT), dtype=np.complex128)
    x[:, :n] = frames
    x = x[:, _BITREV]
    m = 2
    while m <= NFFT:
        half = m // 2
        x = x.reshape(t, NFFT // m, m)
        even = x[:, :, :half]
        odd = x[:, :, half:] * _TWIDDLES[m]
        x = np.concatenate([even + odd, even - odd], axis=2)
        m *= 2
    return x.reshape(t, NFFT)


def fft_512(frame: np.ndarray) -> np.ndarray:
    """512-point FFT of a single frame of up to 512 samples."""
    return fft_512_batch(np.asarray(frame)[None, :])[0]


def log_magnitude(spectrum: np.ndarray) -> np.ndarray:
    """Log magnitude of the 257 non-redundant bins, floored at 1e-8."""
    spec = np.asarray(spectrum)
    single = spec.ndim == 1
    spec2 = spec[None, :] if single else spec
    out = np.log(np.maximum(np.abs(spec2[:, :BINS]), LOG_FLOOR))
    return out[0] if single else out


def spectrogram(wave: Waveform) -> Spectrogram:
    """Full pipeline from waveform to unnormalised log-magnitude frames."""
    frames = frame_and_window(wave.samples)
    spectra = fft_512_batch(frames)
    mags = np.abs(spectra[:, :BINS])
    return Spectrogram(np.log(np.maximum(mags, LOG_FLOOR)))


def mean_normalize(s: Spectrogram) -> Spectrogram:
    """Remove the per-utterance mean of every frequency bin."""
    if s.normalized:
        raise ValueError("spectrogram is already mean-normalized")
    return Spectrogram(s.frames - s.frames.mean(axis=0), normalized=True)


def splice(rows: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    """Stack each row with its +-context neighbours (edges replicated).

    A (T, w) matrix becomes (T, (2*context+1)*w); with the 257-bin frames
    this is the 2827-wide mapper/classifier input.
    """
    rows = np.asarray(rows)
    t = rows.shape[0]
    idx = np.clip(np.arange(t)[:, None] + np.arange(-context, context + 1)[None, :], 0, t - 1)
    return rows[idx].reshape(t, -1)


def deltas(rows: np.ndarray) -> np.ndarray:
    """Two-tap regression filter over time with replicated edges."""
    rows = np.asarray(rows)
    t = rows.shape[0]

    def pick(off):
        return rows[np.clip(np.arange(t) + off, 0, t - 1)]

    return (pick(1) - pick(-1) + 2.0 * (pick(2) - pick(-2))) / 10.0


def static_delta_stack(frames: np.ndarray) -> np.ndarray:
    """Append delta and double-delta columns: (T, 257) -> (T, 771)."""
    d = deltas(frames)
    return np.hstack([frames, d, deltas(d)])


def with_deltas(frames: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    """Delta-augmented spliced rows: (T, 257) -> (T, 8481)."""
    return splice(static_delta_stack(frames), context)
