"""Corpus loading and feature assembly for training and evaluation.

A split is held as concatenated per-utterance feature matrices plus an
index table, so batches are cheap row gathers. Splice windows never cross
utterance boundaries: the gather indices are built per utterance with edge
replication and then offset into the concatenated matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, formats


@dataclass
class UttFeatures:
    utt_id: str
    snr_db: int
    clean: np.ndarray   # (T, 257) mean-normalized log magnitudes
    noisy: np.ndarray   # (T, 257) mean-normalized log magnitudes
    labels: np.ndarray  # (T,)


def utterance_features(clean_wave, noisy_wave, labels, utt_id="", snr_db=0) -> UttFeatures:
    clean = dsp.mean_normalize(dsp.spectrogram(clean_wave)).frames
    noisy = dsp.mean_normalize(dsp.spectrogram(noisy_wave)).frames
    if clean.shape[0] != noisy.shape[0]:
        raise ValueError(f"{utt_id}: clean/noisy frame counts differ")
    labels = np.asarray(labels)
    if labels.shape[0] != clean.shape[0]:
        raise ValueError(f"{utt_id}: {labels.shape[0]} labels for {clean.shape[0]} frames")
    return UttFeatures(utt_id, snr_db, clean, noisy, labels)


class SplitData:
    """One corpus split, concatenated and indexed for batch gathers."""

    def __init__(self, utts: list[UttFeatures]):
        if not utts:
            raise ValueError("empty split")
        self.utts = utts
        self.clean = np.concatenate([u.clean for u in utts])
        self.noisy = np.concatenate([u.noisy for u in utts])
        self.labels = np.concatenate([u.labels for u in utts])
        lengths = [u.clean.shape[0] for u in utts]
        self.bounds = np.concatenate([[0], np.cumsum(lengths)])
        self.splice_idx = self._build_splice_index(lengths)
        self._noisy_delta: np.ndarray | None = None

    def _build_splice_index(self, lengths) -> np.ndarray:
        ctx = dsp.CONTEXT
        offsets = np.arange(-ctx, ctx + 1)
        chunks = []
        for u, t_len in enumerate(lengths):
            local = np.clip(np.arange(t_len)[:, None] + offsets[None, :], 0, t_len - 1)
            chunks.append(local + self.bounds[u])
        return np.concatenate(chunks)

    @property
    def num_frames(self) -> int:
        return int(self.bounds[-1])

    @property
    def num_utts(self) -> int:
        return len(self.utts)

    def utt_rows(self, u: int) -> np.ndarray:
        return np.arange(self.bounds[u], self.bounds[u + 1])

    def noisy_delta(self) -> np.ndarray:
        """(N, 771) static+delta+double-delta noisy frames, built on demand."""
        if self._noisy_delta is None:
            self._noisy_delta = np.concatenate(
                [dsp.static_delta_stack(u.noisy) for u in self.utts])
        return self._noisy_delta

    def gather_spliced(self, base: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Context-window rows of any (N, w) matrix aligned with this split."""
        return base[self.splice_idx[rows]].reshape(len(rows), -1)

    def mapper_input(self, arch: str, rows: np.ndarray) -> np.ndarray:
        """Noisy-model input rows: 8481-wide for dnn, (B,1,11,257) for resnet."""
        if arch == "dnn":
            return self.gather_spliced(self.noisy_delta(), rows)
        if arch == "resnet":
            spliced = self.noisy[self.splice_idx[rows]]
            return spliced.reshape(len(rows), 1, dsp.CONTEXT * 2 + 1, dsp.BINS)
        raise ValueError(f"unknown mapper arch {arch!r}")


def load_split(manifest_path, split: str) -> SplitData:
    meta, records = formats.read_manifest(manifest_path)
    wanted = [r for r in records if r.split == split]
    if not wanted:
        raise FileNotFoundError(f"split {split!r} not present in {manifest_path}")
    utts = []
    for rec in wanted:
        utts.append(utterance_features(
            formats.read_wav(rec.clean_path),
            formats.read_wav(rec.noisy_path),
            formats.read_labels(rec.label_path),
            utt_id=rec.utt_id,
            snr_db=rec.snr_db,
        ))
    return SplitData(utts)


def manifest_num_classes(manifest_path) -> int:
    meta, _ = formats.read_manifest(manifest_path)
    try:
        return int(meta["num_classes"])
    except (KeyError, ValueError):
        raise formats.FormatError("manifest does not declare num_classes") from None
