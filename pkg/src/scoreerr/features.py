"""Per-segment log-mel spectrograms and 16x16 patch tokenization.

A segment is 2.145 s of audio. Its log-mel matrix has 128 mel bands and
exactly 1024 frames, so 16x16 patches tile it into an 8 x 64 grid of 512
patches.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .synth import DEFAULT_SR, AudioBuffer

SEGMENT_SECONDS = 2.145
N_MELS = 128
N_FRAMES = 1024
N_FFT = 512
PATCH = 16
N_PATCHES = (N_MELS // PATCH) * (N_FRAMES // PATCH)
FMIN = 30.0
LOG_FLOOR = 1e-5
CACHE_MAGIC = b"SEGF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SegmentFeatures:
    segment_index: int
    logmel: np.ndarray
    patches: np.ndarray


def segment_samples(sample_rate: int = DEFAULT_SR) -> int:
    return int(round(SEGMENT_SECONDS * sample_rate))


def segment_audio(audio: AudioBuffer, n_segments: int | None = None) -> list[AudioBuffer]:
    """Cut into consecutive non-overlapping segments, zero-padding the last one.

    ``n_segments`` pads (or truncates) to a fixed count, used to line up score
    and performance audio of different lengths.
    """
    seg = segment_samples(audio.sample_rate)
    n = len(audio.samples)
    count = -(-n // seg) if n_segments is None else n_segments
    padded = np.zeros(count * seg)
    keep = min(n, count * seg)
    padded[:keep] = audio.samples[:keep]
    return [AudioBuffer(padded[i * seg:(i + 1) * seg], audio.sample_rate) for i in range(count)]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = DEFAULT_SR, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = FMIN) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_centers(sample_rate: int = DEFAULT_SR, n_mels: int = N_MELS, fmin: float = FMIN) -> np.ndarray:
    return _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def frame_centers(n_samples: int, n_frames: int = N_FRAMES) -> np.ndarray:
    return ((np.arange(n_frames) + 0.5) * n_samples / n_frames).astype(np.int64)


def logmel(segment: AudioBuffer) -> np.ndarray:
    seg = segment_samples(segment.sample_rate)
    x = np.asarray(segment.samples, dtype=float)
    if len(x) != seg:
        raise ValueError(f"segment must have {seg} samples, got {len(x)}")
    half = N_FFT // 2
    padded = np.pad(x, (half, half))
    starts = frame_centers(seg)  # window [c - half, c + half) in padded coords starts at c
    idx = starts[:, None] + np.arange(N_FFT)[None, :]
    frames = padded[idx] * np.hanning(N_FFT + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames, axis=1))
    mel = mel_filterbank(segment.sample_rate) @ mag.T
    return np.log(np.maximum(mel, LOG_FLOOR))


def patchify(matrix: np.ndarray) -> np.ndarray:
    """(128, 1024) -> (512, 256); patch order is mel-block major."""
    if matrix.shape != (N_MELS, N_FRAMES):
        raise ValueError(f"expected shape {(N_MELS, N_FRAMES)}, got {matrix.shape}")
    g_m, g_t = N_MELS // PATCH, N_FRAMES // PATCH
    return matrix.reshape(g_m, PATCH, g_t, PATCH).transpose(0, 2, 1, 3).reshape(g_m * g_t, PATCH * PATCH)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    g_m, g_t = N_MELS // PATCH, N_FRAMES // PATCH
    if patches.shape != (g_m * g_t, PATCH * PATCH):
        raise ValueError(f"expected shape {(g_m * g_t, PATCH * PATCH)}, got {patches.shape}")
    return patches.reshape(g_m, g_t, PATCH, PATCH).transpose(0, 2, 1, 3).reshape(N_MELS, N_FRAMES)


def extract(audio: AudioBuffer, n_segments: int | None = None) -> list[SegmentFeatures]:
    out = []
    for i, seg in enumerate(segment_audio(audio, n_segments)):
        m = logmel(seg)
        out.append(SegmentFeatures(i, m, patchify(m)))
    return out


def write_cache(matrix: np.ndarray, path: str | Path) -> None:
    data = np.ascontiguousarray(matrix, dtype="<f4")
    header = CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    Path(path).write_bytes(header + data.tobytes())


def read_cache(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    version, ndim = struct.unpack("<II", buf[4:12])
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    shape = struct.unpack(f"<{ndim}I", buf[12:12 + 4 * ndim])
    return np.frombuffer(buf[12 + 4 * ndim:], dtype="<f4").reshape(shape).copy()
