"""On-disk formats: WAV audio, SMAP matrices, SMCK checkpoints, labels, PGM.

Everything is little-endian with a magic header. Readers parse from a fully
read buffer with explicit bounds checks and never allocate from unvalidated
sizes, so corrupt or truncated files raise :class:`FormatError` instead of
crashing. Checkpoints store float32 payloads; training state upcasts to
float64 on load.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, Waveform

SMAP_MAGIC = b"SMAP"
SMCK_MAGIC = b"SMCK"
SMAP_VERSION = 1
SMCK_VERSION = 1
_MAX_NAME = 4096
_MAX_RANK = 8


class FormatError(ValueError):
    """A file does not conform to its declared format."""


class _Cursor:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"corrupt {self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"corrupt {self.what}: {self.remaining()} trailing bytes")


# ---------------------------------------------------------------------------
# WAV (strict canonical 44-byte header, 16-bit mono PCM at 16 kHz)


def write_wav(path, wave: Waveform) -> None:
    samples = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype("<i2")
    data = samples.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, SAMPLE_RATE, SAMPLE_RATE * 2, 2, 16,
        b"data", len(data),
    )
    Path(path).write_bytes(header + data)


def read_wav(path) -> Waveform:
    buf = Path(path).read_bytes()
    if len(buf) < 44:
        raise FormatError("not a wav file: shorter than the canonical header")
    (riff, riff_size, wave_tag, fmt_tag, fmt_size, audio_fmt, channels, rate,
     byte_rate, block_align, bits, data_tag, data_len) = struct.unpack(
        "<4sI4s4sIHHIIHH4sI", buf[:44])
    if riff != b"RIFF" or wave_tag != b"WAVE" or fmt_tag != b"fmt " or data_tag != b"data":
        raise FormatError("not a wav file: bad chunk layout")
    if fmt_size != 16 or audio_fmt != 1 or bits != 16:
        raise FormatError("unsupported wav: need 16-bit PCM with a 16-byte fmt chunk")
    if channels != 1 or rate != SAMPLE_RATE:
        raise FormatError(f"unsupported wav: need mono {SAMPLE_RATE} Hz")
    if block_align != 2 or byte_rate != SAMPLE_RATE * 2:
        raise FormatError("unsupported wav: inconsistent fmt fields")
    if riff_size != len(buf) - 8 or data_len != len(buf) - 44 or data_len % 2:
        raise FormatError("corrupt wav: size fields disagree with the file")
    if data_len == 0:
        raise FormatError("corrupt wav: empty data chunk")
    samples = np.frombuffer(buf, dtype="<i2", offset=44).astype(np.float64) / 32768.0
    return Waveform(samples)


# ---------------------------------------------------------------------------
# SMAP: magic, u32 version, u32 rows, u32 cols, row-major float32


def write_smap(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"smap matrices are 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    header = SMAP_MAGIC + struct.pack("<III", SMAP_VERSION, rows, cols)
    Path(path).write_bytes(header + matrix.astype("<f4").tobytes())


def read_smap(path) -> np.ndarray:
    cur = _Cursor(Path(path).read_bytes(), "smap file")
    if cur.take(4) != SMAP_MAGIC:
        raise FormatError("not a smap file: bad magic")
    version = cur.u32()
    if version != SMAP_VERSION:
        raise FormatError(f"unsupported smap version {version}")
    rows, cols = cur.u32(), cur.u32()
    expected = rows * cols * 4
    if cur.remaining() != expected:
        raise FormatError(f"corrupt smap: payload {cur.remaining()} bytes, header says {expected}")
    data = _finite_f32(cur.take(expected), "smap")
    return data.reshape(rows, cols)


def _finite_f32(raw: bytes, what: str) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"corrupt {what}: non-finite values in payload")
    return data


# ---------------------------------------------------------------------------
# frame labels: u32 count then count u32 class ids


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    Path(path).write_bytes(struct.pack("<I", labels.size) + labels.astype("<u4").tobytes())


def read_labels(path) -> np.ndarray:
    cur = _Cursor(Path(path).read_bytes(), "label file")
    count = cur.u32()
    if cur.remaining() != count * 4:
        raise FormatError(f"corrupt label file: {cur.remaining()} bytes for {count} labels")
    return np.frombuffer(cur.take(count * 4), dtype="<u4").astype(np.int64)


# ---------------------------------------------------------------------------
# SMCK checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict[str, str]
    optimizer: dict[str, np.ndarray] | None = None
    counters: dict[str, int] = field(default_factory=dict)


def _encode_config(config: dict) -> bytes:
    lines = []
    for key, value in config.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"config entry {key!r} cannot be serialized")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def _decode_config(blob: bytes) -> dict[str, str]:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"corrupt checkpoint: config block ({exc})") from None
    config = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError("corrupt checkpoint: malformed config line")
        key, _, value = line.partition("=")
        config[key] = value
    return config


def _encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def _decode_tensors(cur: _Cursor) -> dict[str, np.ndarray]:
    count = cur.u32()
    if count > 1_000_000:
        raise FormatError(f"corrupt checkpoint: implausible tensor count {count}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = cur.u32()
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"corrupt checkpoint: tensor name of {name_len} bytes")
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("corrupt checkpoint: tensor name is not utf-8") from None
        rank = cur.u32()
        if rank > _MAX_RANK:
            raise FormatError(f"corrupt checkpoint: tensor rank {rank}")
        dims = [cur.u32() for _ in range(rank)]
        size = 1
        for d in dims:
            size *= d
        if size * 4 > cur.remaining():
            raise FormatError("corrupt checkpoint: tensor payload exceeds file size")
        data = _finite_f32(cur.take(size * 4), "checkpoint")
        out[name] = data.reshape(dims)
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict,
                    optimizer: dict[str, np.ndarray] | None = None,
                    counters: dict[str, int] | None = None) -> None:
    """Write a checkpoint; the round trip is bitwise at float32 precision."""
    counters = counters or {}
    body = [SMCK_MAGIC, struct.pack("<I", SMCK_VERSION)]
    cfg = _encode_config(config)
    body.append(struct.pack("<I", len(cfg)))
    body.append(cfg)
    body.append(_encode_tensors(tensors))
    if optimizer is None:
        body.append(b"\x00")
    else:
        body.append(b"\x01")
        body.append(_encode_tensors(optimizer))
        body.append(struct.pack("<QQ", counters.get("step", 0), counters.get("epoch", 0)))
    payload = b"".join(body)
    checksum = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(payload + checksum)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != SMCK_MAGIC:
        raise FormatError("not a checkpoint file")
    if len(buf) < 12:
        raise FormatError("corrupt checkpoint: truncated header")
    payload, checksum = buf[:-4], buf[-4:]
    if struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF) != checksum:
        raise FormatError("corrupt checkpoint: checksum mismatch")
    cur = _Cursor(payload, "checkpoint")
    cur.take(4)
    version = cur.u32()
    if version != SMCK_VERSION:
        raise FormatError(f"checkpoint version {version} needs a newer reader")
    cfg_len = cur.u32()
    config = _decode_config(cur.take(cfg_len))
    tensors = _decode_tensors(cur)
    optimizer = None
    counters: dict[str, int] = {}
    if cur.u8():
        optimizer = _decode_tensors(cur)
        counters = {"step": cur.u64(), "epoch": cur.u64()}
    cur.done()
    return Checkpoint(tensors=tensors, config=config, optimizer=optimizer, counters=counters)


# ---------------------------------------------------------------------------
# PGM export


def write_pgm(path, matrix: np.ndarray) -> None:
    """8-bit min-max normalised spectrogram image, frequency ascending upward."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"pgm export needs a 2-D matrix, got {matrix.shape}")
    lo, hi = matrix.min(), matrix.max()
    if hi > lo:
        pixels = np.round(255.0 * (matrix - lo) / (hi - lo))
    else:
        pixels = np.full(matrix.shape, 128.0)
    image = pixels.astype(np.uint8).T[::-1]  # (cols, rows) with bin 0 at the bottom
    height, width = image.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + image.tobytes())


# ---------------------------------------------------------------------------
# corpus manifest


@dataclass
class UttRecord:
    utt_id: str
    clean_path: Path
    noisy_path: Path
    label_path: Path
    snr_db: int

    @property
    def split(self) -> str:
        return self.utt_id.rsplit("_", 1)[0]


def write_manifest(path, meta: dict, records: list[UttRecord]) -> None:
    base = Path(path).parent
    lines = [f"# {key}\t{value}" for key, value in meta.items()]
    for rec in records:
        lines.append("\t".join([
            rec.utt_id,
            str(Path(rec.clean_path).relative_to(base)),
            str(Path(rec.noisy_path).relative_to(base)),
            str(Path(rec.label_path).relative_to(base)),
            str(rec.snr_db),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[dict, list[UttRecord]]:
    path = Path(path)
    base = path.parent
    meta: dict[str, str] = {}
    records: list[UttRecord] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("\t")
            meta[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"manifest line {lineno}: expected 5 fields, got {len(fields)}")
        try:
            snr = int(fields[4])
        except ValueError:
            raise FormatError(f"manifest line {lineno}: bad snr {fields[4]!r}") from None
        records.append(UttRecord(fields[0], base / fields[1], base / fields[2],
                                 base / fields[3], snr))
    return meta, records


# ---------------------------------------------------------------------------
# training trace CSV


TRACE_COLUMNS = ("step", "lr", "fidelity", "mimic", "joint", "dev_fidelity", "dev_ce")


def write_trace(path, rows: list[dict]) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for row in rows:
        cells = []
        for col in TRACE_COLUMNS:
            value = row.get(col)
            if value is None:
                cells.append("")
            elif col == "step":
                cells.append(str(int(value)))
            else:
                cells.append(f"{value:.10g}")
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
