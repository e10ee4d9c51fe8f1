"""Synthetic parallel clean/noisy corpus with per-frame class labels.

Clean "speech" is a concatenation of short harmonic segments; every class
is a fixed template (fundamental, harmonic count, harmonic amplitudes), so
frame labels are exact by construction. Noise is mixed in at one of six
fixed SNRs. The corpus stands in for a licensed multi-condition dataset at
desk scale: sizes default to a 200/69/55 split.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .dsp import HOP, SAMPLE_RATE, WINDOW, Waveform, frame_count
from .util import rng_stream

SNRS_DB = (-6, -3, 0, 3, 6, 9)
NOISE_KINDS = ("white", "lowpass", "babble_mix")
DEFAULT_SPLIT_SIZES = {"train": 200, "dev": 69, "test": 55}
DEFAULT_NUM_CLASSES = 40

_SEG_DUR_RANGE = (0.10, 0.22)        # seconds per harmonic segment
_SEG_COUNT_RANGE = (2, 4)            # segments per utterance
_PEAK = 0.5


@dataclass
class Utterance:
    utt_id: str
    clean: Waveform
    noisy: Waveform
    snr_db: int
    labels: np.ndarray
    phone_segments: list[tuple[int, int, int]]  # (class, start_sample, end_sample)
    mix_scale: float = 1.0


def class_template(cls: int) -> tuple[float, np.ndarray]:
    """Fixed per-class fundamental and harmonic amplitudes."""
    f0 = 85.0 * 1.045 ** cls
    num_harmonics = 2 + cls % 3
    amps = rng_stream("class_template", cls).uniform(0.3, 1.0, size=num_harmonics)
    return f0, amps


def _render_segment(cls: int, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    f0, amps = class_template(cls)
    t = np.arange(num_samples) / SAMPLE_RATE
    sig = np.zeros(num_samples)
    for h, amp in enumerate(amps, start=1):
        sig += amp * np.sin(2.0 * np.pi * f0 * h * t + rng.uniform(0.0, 2.0 * np.pi))
    env_rate = rng.uniform(1.5, 4.0)
    env = 0.65 + 0.35 * np.sin(2.0 * np.pi * env_rate * t + rng.uniform(0.0, 2.0 * np.pi))
    return sig * env


def synth_clean_utterance(seed: int, num_segments: int,
                          num_classes: int = DEFAULT_NUM_CLASSES,
                          first_class: int | None = None,
                          seg_duration: tuple[float, float] = _SEG_DUR_RANGE):
    """Deterministic clean utterance: waveform, segment list, frame labels."""
    if num_segments < 1:
        raise ValueError("need at least one segment")
    rng = rng_stream(seed, "clean_utt")
    pieces = []
    segments: list[tuple[int, int, int]] = []
    cursor = 0
    for i in range(num_segments):
        cls = int(rng.integers(0, num_classes))
        if i == 0 and first_class is not None:
            cls = int(first_class)
        dur = rng.uniform(*seg_duration)
        n = max(int(round(dur * SAMPLE_RATE)), HOP)
        pieces.append(_render_segment(cls, n, rng))
        segments.append((cls, cursor, cursor + n))
        cursor += n
    samples = np.concatenate(pieces)
    if samples.size < WINDOW:
        samples = np.pad(samples, (0, WINDOW - samples.size))
        segments[-1] = (segments[-1][0], segments[-1][1], samples.size)
    samples = samples * (_PEAK / np.abs(samples).max())
    wave = Waveform(samples)

    centers = HOP * np.arange(frame_count(samples.size)) + WINDOW // 2
    starts = np.array([s for _, s, _ in segments])
    labels = np.array([segments[j][0] for j in
                       np.clip(np.searchsorted(starts, centers, side="right") - 1,
                               0, len(segments) - 1)], dtype=np.int64)
    return wave, segments, labels


def synth_noise(seed: int, length: int, kind: str = "white") -> Waveform:
    """Unit-RMS noise of the requested flavour."""
    if length <= 0:
        raise ValueError("noise length must be positive")
    rng = rng_stream(seed, "noise", kind)
    if kind == "white":
        sig = rng.standard_normal(length)
    elif kind == "lowpass":
        white = rng.standard_normal(length)
        sig = np.empty(length)
        acc = 0.0
        a = 0.9
        for i in range(length):  # one-pole IIR; sequential by nature
            acc = a * acc + (1.0 - a) * white[i]
            sig[i] = acc
    elif kind == "babble_mix":
        sig = np.zeros(length)
        for k in range(4):
            wave, _, _ = synth_clean_utterance(seed * 7 + k + 1, num_segments=3)
            talker = np.tile(wave.samples, length // wave.samples.size + 1)[:length]
            sig += np.roll(talker, k * length // 4)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    rms = np.sqrt(np.mean(sig ** 2))
    return Waveform(sig / rms)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, float]:
    """clean + gain*noise with the gain set for the exact target SNR.

    If the mixture would clip, the whole mixture is rescaled (preserving the
    SNR) and the applied factor is returned alongside the waveform.
    """
    n = len(clean)
    if len(noise) < n:
        raise ValueError(f"noise ({len(noise)}) shorter than clean ({n})")
    p_clean = np.mean(clean.samples ** 2)
    if p_clean == 0.0:
        raise ValueError("clean signal is silent; SNR undefined")
    noise_cut = noise.samples[:n]
    p_noise = np.mean(noise_cut ** 2)
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixture = clean.samples + gain * noise_cut
    scale = 1.0
    peak = np.abs(mixture).max()
    if peak > 1.0:
        scale = 0.999 / peak
        mixture = mixture * scale
    return Waveform(mixture), scale


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray, scale: float = 1.0) -> float:
    """Achieved SNR of a mixture noisy = scale*(clean + g*noise)."""
    signal_part = scale * clean
    residual = noisy - signal_part
    return 10.0 * np.log10(np.mean(signal_part ** 2) / np.mean(residual ** 2))


def _utt_seed(corpus_seed: int, split: str, index: int) -> int:
    return zlib.crc32(f"{corpus_seed}:{split}:{index}".encode("utf-8"))


def make_utterance(corpus_seed: int, split: str, index: int,
                   num_classes: int, snr_db: int, noise_kind: str,
                   first_class: int | None = None,
                   seg_count: tuple[int, int] = _SEG_COUNT_RANGE,
                   seg_duration: tuple[float, float] = _SEG_DUR_RANGE) -> Utterance:
    seed = _utt_seed(corpus_seed, split, index)
    rng = rng_stream(seed, "layout")
    num_segments = int(rng.integers(seg_count[0], seg_count[1] + 1))
    clean, segments, labels = synth_clean_utterance(seed, num_segments, num_classes,
                                                    first_class=first_class,
                                                    seg_duration=seg_duration)
    noise = synth_noise(seed, len(clean), kind=noise_kind)
    noisy, scale = mix_at_snr(clean, noise, snr_db)
    return Utterance(utt_id=f"{split}_{index:04d}", clean=clean, noisy=noisy,
                     snr_db=snr_db, labels=labels, phone_segments=segments,
                     mix_scale=scale)


def build_corpus(out_dir, split_sizes: dict[str, int] | None = None,
                 num_classes: int = DEFAULT_NUM_CLASSES, seed: int = 0,
                 seg_count: tuple[int, int] = _SEG_COUNT_RANGE,
                 seg_duration: tuple[float, float] = _SEG_DUR_RANGE) -> Path:
    """Generate WAVs, label files and the manifest; returns the manifest path.

    SNRs rotate round-robin inside each split and noise kinds rotate on a
    different period, so every (snr, kind) pair occurs. The first utterances
    of the train split force one segment of every class, guaranteeing label
    coverage.
    """
    split_sizes = dict(split_sizes or DEFAULT_SPLIT_SIZES)
    for split, size in split_sizes.items():
        if size < 1:
            raise ValueError(f"split {split!r} needs at least 1 utterance")
    out_dir = Path(out_dir)
    records: list[formats.UttRecord] = []
    for split, size in split_sizes.items():
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(size):
            first = i if (split == "train" and i < num_classes) else None
            utt = make_utterance(seed, split, i, num_classes,
                                 snr_db=SNRS_DB[i % len(SNRS_DB)],
                                 noise_kind=NOISE_KINDS[i % len(NOISE_KINDS)],
                                 first_class=first,
                                 seg_count=seg_count, seg_duration=seg_duration)
            clean_path = split_dir / f"{utt.utt_id}_clean.wav"
            noisy_path = split_dir / f"{utt.utt_id}_noisy.wav"
            label_path = split_dir / f"{utt.utt_id}_labels.bin"
            formats.write_wav(clean_path, utt.clean)
            formats.write_wav(noisy_path, utt.noisy)
            formats.write_labels(label_path, utt.labels)
            records.append(formats.UttRecord(utt.utt_id, clean_path, noisy_path,
                                             label_path, utt.snr_db))
    manifest = out_dir / "manifest.tsv"
    meta = {"num_classes": num_classes, "seed": seed}
    for split, size in split_sizes.items():
        meta[f"split_{split}"] = size
    formats.write_manifest(manifest, meta, records)
    return manifest
