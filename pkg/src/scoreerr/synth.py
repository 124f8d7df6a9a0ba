"""Additive harmonic synthesis of note tracks and 16-bit WAV I/O."""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .midi_core import NoteEvent, NoteTrack

DEFAULT_SR = 16_000
PEAK_TARGET = 0.9
NOTE_GAIN = 0.25


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class InstrumentProfile:
    name: str
    harmonic_amplitudes: tuple[float, ...] = (1.0,)
    attack: float = 0.01
    decay: float = 0.1
    sustain_level: float = 0.7
    release: float = 0.05

    def __post_init__(self):
        amps = self.harmonic_amplitudes
        if not amps or amps[0] <= 0 or any(a < 0 for a in amps):
            raise ValueError("harmonic amplitudes must be non-negative with a positive fundamental")
        if min(self.attack, self.decay, self.release) < 0 or not 0 <= self.sustain_level <= 1:
            raise ValueError("invalid ADSR parameters")


PROFILES = {
    "piano": InstrumentProfile("piano", (1.0, 0.5, 0.3, 0.15, 0.08, 0.04), 0.005, 0.3, 0.4, 0.08),
    "flute": InstrumentProfile("flute", (1.0, 0.2, 0.05), 0.04, 0.05, 0.9, 0.06),
    "clarinet": InstrumentProfile("clarinet", (1.0, 0.0, 0.5, 0.0, 0.3, 0.0, 0.15), 0.02, 0.05, 0.85, 0.05),
    "violin": InstrumentProfile("violin", (1.0, 0.7, 0.5, 0.35, 0.25, 0.18, 0.12, 0.08), 0.05, 0.1, 0.8, 0.08),
    "sine": InstrumentProfile("sine", (1.0,), 0.005, 0.0, 1.0, 0.02),
}


def get_profile(name: str) -> InstrumentProfile:
    return PROFILES.get(name.lower(), PROFILES["piano"])


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12)


def _envelope(n_on: int, n_total: int, profile: InstrumentProfile, sr: int) -> np.ndarray:
    t = np.arange(n_total) / sr
    a, d, s = profile.attack, profile.decay, profile.sustain_level
    env = np.full(n_total, s)
    if a > 0:
        env = np.where(t < a, t / a, env)
    if d > 0:
        in_decay = (t >= a) & (t < a + d)
        env = np.where(in_decay, 1.0 - (1.0 - s) * (t - a) / d, env)
    elif a > 0:
        env = np.where(t >= a, s, env)
    if n_on < n_total:
        level = env[n_on - 1] if n_on > 0 else 0.0
        rel = np.arange(n_total - n_on) / sr
        tail = level * (1.0 - rel / profile.release) if profile.release > 0 else np.zeros_like(rel)
        env[n_on:] = np.maximum(tail, 0.0)
    return env


def render_note(note: NoteEvent, profile: InstrumentProfile, sr: int) -> tuple[int, np.ndarray]:
    """Return (start sample, samples) for one note, release tail included."""
    start = int(round(note.onset * sr))
    n_on = max(int(round(note.offset * sr)) - start, 1)
    n_total = n_on + int(math.ceil(profile.release * sr))
    t = np.arange(n_total) / sr
    f0 = midi_to_hz(note.pitch)
    amps = np.asarray(profile.harmonic_amplitudes, dtype=float)
    amps = amps / amps.sum()
    wave_ = np.zeros(n_total)
    for k, amp in enumerate(amps, start=1):
        if amp == 0 or k * f0 >= sr / 2:
            continue
        wave_ += amp * np.sin(2 * np.pi * k * f0 * t)
    gain = NOTE_GAIN * note.velocity / 127
    return start, gain * wave_ * _envelope(n_on, n_total, profile, sr)


def buffer_length(track: NoteTrack, profile: InstrumentProfile, sr: int) -> int:
    return int(math.ceil((track.end_time + profile.release) * sr))


def mix(track: NoteTrack, profile: InstrumentProfile, sample_rate: int = DEFAULT_SR) -> np.ndarray:
    """Linear sum of all rendered notes, no mastering."""
    out = np.zeros(buffer_length(track, profile, sample_rate))
    for note in track.notes:
        start, samples = render_note(note, profile, sample_rate)
        end = min(start + len(samples), len(out))
        out[start:end] += samples[: end - start]
    return out


def render(track: NoteTrack, profile: InstrumentProfile | None = None, sample_rate: int = DEFAULT_SR) -> AudioBuffer:
    profile = profile or get_profile(track.instrument)
    out = mix(track, profile, sample_rate)
    peak = float(np.max(np.abs(out))) if len(out) else 0.0
    if peak > 1.0:
        out = out * (PEAK_TARGET / peak)
    return AudioBuffer(out, sample_rate)


def write_wav(audio: AudioBuffer, path: str | Path) -> None:
    pcm = np.round(np.clip(audio.samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> AudioBuffer:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        frames = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        channels, sr = w.getnchannels(), w.getframerate()
    samples = frames.reshape(-1, channels).mean(axis=1) / 32767
    return AudioBuffer(samples.astype(float), sr)
