"""Audio plumbing: 16-bit PCM WAV files, 8-bit codecs, and the packed
training-dataset container.

Quantization convention, shared by both codecs: float in [-1, 1] maps onto
codes {0..255} with rounding half away from zero, and decode maps a code back
to the center of its cell via code/127.5 - 1.  The compressing codec applies
a logarithmic companding curve (mu = 255) before quantizing, which spends
more codes near zero where audio lives; the linear codec quantizes directly.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MULAW = "mulaw"
LINEAR = "linear"
_ENCODING_TAGS = {MULAW: 0, LINEAR: 1}
_TAG_ENCODINGS = {v: k for k, v in _ENCODING_TAGS.items()}

_MU = 255.0
_LOG1P_MU = float(np.log1p(_MU))

DATASET_MAGIC = b"HRNN"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIBIQQQ")


class AudioFormatError(ValueError):
    """Raised for malformed WAV or dataset bytes."""


# ---------------------------------------------------------------------------
# codecs

def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def mulaw_encode(x) -> np.ndarray:
    """Compress then quantize to uint8 codes.  0.0 lands on code 128."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    y = np.sign(x) * np.log1p(_MU * np.abs(x)) / _LOG1P_MU
    return _round_half_away((y + 1.0) * 127.5).astype(np.uint8)


def mulaw_decode(codes) -> np.ndarray:
    codes = np.asarray(codes)
    y = codes.astype(np.float64) / 127.5 - 1.0
    x = np.sign(y) * (np.expm1(np.abs(y) * _LOG1P_MU)) / _MU
    return x.astype(np.float32)


def linear_encode(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return _round_half_away((x + 1.0) * 127.5).astype(np.uint8)


def linear_decode(codes) -> np.ndarray:
    codes = np.asarray(codes)
    return (codes.astype(np.float64) / 127.5 - 1.0).astype(np.float32)


def encode(x, encoding: str) -> np.ndarray:
    if encoding == MULAW:
        return mulaw_encode(x)
    if encoding == LINEAR:
        return linear_encode(x)
    raise ValueError(f"unknown encoding {encoding!r}, expected 'mulaw' or 'linear'")


def decode(codes, encoding: str) -> np.ndarray:
    if encoding == MULAW:
        return mulaw_decode(codes)
    if encoding == LINEAR:
        return linear_decode(codes)
    raise ValueError(f"unknown encoding {encoding!r}, expected 'mulaw' or 'linear'")


# ---------------------------------------------------------------------------
# WAV files

@dataclass
class PcmAudio:
    """Mono float32 samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate: int


def read_wav(source) -> PcmAudio:
    """Parse a 16-bit PCM WAV from bytes or a path.  Multichannel input keeps
    channel 0.  Samples are scaled by 1/32768."""
    if isinstance(source, (str, Path, os.PathLike)):
        data = Path(source).read_bytes()
    else:
        data = bytes(source)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("not a RIFF/WAVE file")

    fmt = None
    payload = None
    at = 12
    while at + 8 <= len(data):
        cid = data[at:at + 4]
        (size,) = struct.unpack_from("<I", data, at + 4)
        body = data[at + 8:at + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise AudioFormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
        at += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise AudioFormatError("missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1 or bits != 16:
        raise AudioFormatError(f"only 16-bit PCM is supported, got format={audio_format} bits={bits}")
    if channels < 1:
        raise AudioFormatError("channel count must be positive")

    frames = len(payload) // (2 * channels)
    ints = np.frombuffer(payload[:frames * 2 * channels], dtype="<i2").reshape(frames, channels)
    samples = (ints[:, 0].astype(np.float32)) / 32768.0
    return PcmAudio(samples, int(sample_rate))


def write_wav(audio: PcmAudio) -> bytes:
    """Serialize mono 16-bit PCM.  Values are scaled by 32768, rounded half
    away from zero, and clamped to the int16 range, so write then read is an
    exact identity on the int16 grid."""
    x = np.asarray(audio.samples, dtype=np.float64)
    ints = np.clip(_round_half_away(x * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    sr = int(audio.sample_rate)
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload


def save_wav(path, audio: PcmAudio) -> None:
    Path(path).write_bytes(write_wav(audio))


# ---------------------------------------------------------------------------
# dataset container

@dataclass
class QuantizedDataset:
    """Fixed-length uint8 code sequences ready for training."""

    encoding: str
    sample_rate: int
    seq_len: int
    seed: int
    sequences: np.ndarray  # [count, seq_len] uint8

    @property
    def count(self) -> int:
        return self.sequences.shape[0]

    def to_bytes(self) -> bytes:
        seqs = np.ascontiguousarray(self.sequences, dtype=np.uint8)
        header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION,
                                      _ENCODING_TAGS[self.encoding], int(self.sample_rate),
                                      int(self.seq_len), seqs.shape[0], int(self.seed))
        return header + seqs.tobytes()

    @staticmethod
    def from_bytes(data: bytes) -> "QuantizedDataset":
        if len(data) < _DATASET_HEADER.size:
            raise AudioFormatError("dataset truncated before header end")
        magic, version, tag, sample_rate, seq_len, count, seed = _DATASET_HEADER.unpack_from(data, 0)
        if magic != DATASET_MAGIC:
            raise AudioFormatError(f"bad dataset magic {magic!r}")
        if version != DATASET_VERSION:
            raise AudioFormatError(f"unsupported dataset version {version}")
        if tag not in _TAG_ENCODINGS:
            raise AudioFormatError(f"unknown encoding tag {tag}")
        need = _DATASET_HEADER.size + count * seq_len
        if len(data) != need:
            raise AudioFormatError(f"dataset payload is {len(data) - _DATASET_HEADER.size} bytes, expected {count * seq_len}")
        seqs = np.frombuffer(data, dtype=np.uint8, offset=_DATASET_HEADER.size).reshape(count, seq_len).copy()
        return QuantizedDataset(_TAG_ENCODINGS[tag], sample_rate, seq_len, seed, seqs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path) -> "QuantizedDataset":
        return QuantizedDataset.from_bytes(Path(path).read_bytes())


def build_dataset(wav_paths, encoding: str, seq_len: int, hop: int | None = None,
                  seed: int = 0) -> QuantizedDataset:
    """Window each file into length seq_len code sequences (hop defaults to
    seq_len, i.e. non-overlapping), then shuffle the pool with the seed.
    Windows never straddle file boundaries; files shorter than seq_len are
    skipped with a warning."""
    if seq_len <= 0:
        raise ValueError("seq_len must be positive")
    hop = seq_len if hop is None else int(hop)
    if hop <= 0:
        raise ValueError("hop must be positive")

    paths = sorted(Path(p) for p in wav_paths)
    windows = []
    sample_rate = None
    for path in paths:
        audio = read_wav(path)
        if sample_rate is None:
            sample_rate = audio.sample_rate
        elif audio.sample_rate != sample_rate:
            raise AudioFormatError(f"{path}: sample rate {audio.sample_rate} != {sample_rate}")
        codes = encode(audio.samples, encoding)
        if len(codes) < seq_len:
            warnings.warn(f"{path}: {len(codes)} samples is shorter than "
                          f"seq_len {seq_len}, skipped")
            continue
        for start in range(0, len(codes) - seq_len + 1, hop):
            windows.append(codes[start:start + seq_len])
    if not windows:
        raise AudioFormatError(f"no sequences: no windows of length {seq_len} in {len(paths)} file(s)")

    pool = np.stack(windows)
    order = np.random.default_rng(seed).permutation(len(pool))
    return QuantizedDataset(encoding, int(sample_rate), seq_len, seed, pool[order])


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_AMPLITUDE = 0.5
SINE_MIX_FREQS = (100.0, 2000.0)


def sine_mix_wave(rng: np.random.Generator, length: int, sample_rate: int) -> np.ndarray:
    """Sum of 1 to 3 sinusoids, frequencies log-uniform in 100-2000 Hz with
    random phases, component amplitudes summing to 0.5."""
    components = int(rng.integers(1, 4))
    freqs = np.exp(rng.uniform(*np.log(SINE_MIX_FREQS), components))
    amps = rng.uniform(0.3, 1.0, components)
    amps *= SYNTH_AMPLITUDE / amps.sum()
    phases = rng.uniform(0.0, 2 * np.pi, components)
    t = np.arange(length, dtype=np.float64) / sample_rate
    wave = sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in zip(amps, freqs, phases))
    return wave.astype(np.float32)


def random_walk_wave(rng: np.random.Generator, length: int, sample_rate: int) -> np.ndarray:
    """Leaky-integrated Gaussian steps (a browning-noise drone), scaled to
    peak 0.5.  The leak keeps the walk mean-reverting so long sequences stay
    in range instead of drifting off scale."""
    steps = rng.standard_normal(length)
    wave = np.empty(length, dtype=np.float64)
    level = 0.0
    for i in range(length):
        level = 0.995 * level + steps[i]
        wave[i] = level
    wave *= SYNTH_AMPLITUDE / max(np.abs(wave).max(), 1e-9)
    return wave.astype(np.float32)


def chirp_burst_wave(rng: np.random.Generator, length: int, sample_rate: int) -> np.ndarray:
    """Short frequency-sweeping bursts over near-silence, a crude stand-in
    for spoken-digit audio: 1-3 enveloped chirps at random offsets, peak 0.5."""
    wave = np.zeros(length, dtype=np.float64)
    for _ in range(int(rng.integers(1, 4))):
        dur = int(rng.uniform(0.05, 0.2) * sample_rate)
        dur = max(8, min(dur, length))
        at = int(rng.integers(0, max(length - dur, 1)))
        f0, f1 = np.exp(rng.uniform(*np.log(SINE_MIX_FREQS), 2))
        t = np.arange(dur, dtype=np.float64) / sample_rate
        sweep = f0 * (f1 / f0) ** (np.arange(dur) / max(dur - 1, 1))
        phase = 2 * np.pi * np.cumsum(sweep) / sample_rate
        envelope = np.sin(np.pi * np.arange(dur) / max(dur - 1, 1)) ** 2
        wave[at:at + dur] += envelope * np.sin(phase + rng.uniform(0, 2 * np.pi))
    wave *= SYNTH_AMPLITUDE / max(np.abs(wave).max(), 1e-9)
    return wave.astype(np.float32)


_SYNTH_KINDS = {
    "sine_mix": sine_mix_wave,
    "random_walk": random_walk_wave,
    "digit_like_chirps": chirp_burst_wave,
}


def synth_generate(kind: str, count: int, seq_len: int, seed: int = 0,
                   sample_rate: int = 16000, encoding: str = MULAW) -> QuantizedDataset:
    """Deterministic synthetic dataset; every sequence is a fresh draw of the
    chosen kind from one seeded generator."""
    waveform = _SYNTH_KINDS.get(kind.replace("-", "_"))
    if waveform is None:
        raise ValueError(f"unknown synthetic kind {kind!r}, "
                         f"expected one of {sorted(_SYNTH_KINDS)}")
    if count < 1:
        raise ValueError("no sequences: count must be positive")
    rng = np.random.default_rng(seed)
    seqs = np.empty((count, seq_len), dtype=np.uint8)
    for i in range(count):
        seqs[i] = encode(waveform(rng, seq_len, sample_rate), encoding)
    return QuantizedDataset(encoding, sample_rate, seq_len, seed, seqs)
