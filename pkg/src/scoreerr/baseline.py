"""Alignment baseline: transcription, note-level DTW, then matched/unmatched labeling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .midi_core import LabeledScore, NoteEvent, NoteTrack, read_track


@dataclass(frozen=True)
class BaselineConfig:
    onset_tolerance: float = 0.05
    pitch_cost: float = 1.0
    time_cost: float = 10.0
    transcriber: str = "oracle"

    def __post_init__(self):
        if self.pitch_cost < 0 or self.time_cost < 0:
            raise ValueError("costs must be non-negative")
        if self.transcriber not in ("oracle", "external"):
            raise ValueError(f"unknown transcriber {self.transcriber!r}")


@dataclass(frozen=True)
class TranscriptionNoise:
    onset_jitter: float = 0.0
    drop_rate: float = 0.0
    insert_rate: float = 0.0
    seed: int = 0


def transcribe(ground_truth: Optional[NoteTrack] = None, noise: TranscriptionNoise = TranscriptionNoise(),
               external_path: Optional[str | Path] = None) -> NoteTrack:
    """Oracle transcription (ground truth plus optional noise) or an external note file."""
    if external_path is not None:
        path = Path(external_path)
        if not path.exists():
            raise FileNotFoundError(f"external transcription {path} not found")
        return read_track(path)
    if ground_truth is None:
        raise ValueError("oracle transcription needs the ground-truth performance notes")
    if noise == TranscriptionNoise(seed=noise.seed):
        return ground_truth
    rng = np.random.default_rng(noise.seed)
    notes = []
    for n in ground_truth.notes:
        if rng.random() < noise.drop_rate:
            continue
        dt = float(rng.normal(0.0, noise.onset_jitter)) if noise.onset_jitter > 0 else 0.0
        dt = max(dt, -n.onset)
        notes.append(n.shifted(dt))
    n_insert = int(rng.binomial(len(ground_truth), noise.insert_rate)) if noise.insert_rate > 0 else 0
    span = max(ground_truth.end_time, 1e-3)
    for _ in range(n_insert):
        onset = float(rng.uniform(0.0, span))
        pitch = int(rng.integers(21, 109))
        notes.append(NoteEvent(pitch, onset, onset + float(rng.uniform(0.05, 0.4))))
    return ground_truth.with_notes(notes)


@dataclass(frozen=True)
class AlignmentPath:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    def is_valid(self, n: int, m: int) -> bool:
        p = self.pairs
        if not p or p[0] != (0, 0) or p[-1] != (n - 1, m - 1):
            return False
        return all((b[0] - a[0], b[1] - a[1]) in ((1, 0), (0, 1), (1, 1)) for a, b in zip(p, p[1:]))


def cost_matrix(perf: NoteTrack, ref: NoteTrack, config: BaselineConfig) -> np.ndarray:
    po = np.array([n.onset for n in perf.notes])
    pp = np.array([n.pitch for n in perf.notes], dtype=float)
    ro = np.array([n.onset for n in ref.notes])
    rp = np.array([n.pitch for n in ref.notes], dtype=float)
    return config.time_cost * np.abs(po[:, None] - ro[None, :]) + config.pitch_cost * np.abs(pp[:, None] - rp[None, :])


def dtw_align(perf: NoteTrack, ref: NoteTrack, config: BaselineConfig = BaselineConfig()) -> AlignmentPath:
    """Minimum total-cost monotone path; ties prefer the diagonal, then (1, 0)."""
    if len(perf) == 0 or len(ref) == 0:
        raise ValueError("DTW needs two non-empty tracks")
    c = cost_matrix(perf, ref, config)
    n, m = c.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = c[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = c[i, j] + best
    i, j = n - 1, m - 1
    pairs = [(i, j)]
    while (i, j) != (0, 0):
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            d, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if d <= up and d <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        pairs.append((i, j))
    return AlignmentPath(tuple(reversed(pairs)), float(acc[-1, -1]))


def path_cost(pairs, c: np.ndarray) -> float:
    return float(sum(c[i, j] for i, j in pairs))


def classify(path: AlignmentPath, perf: NoteTrack, ref: NoteTrack, config: BaselineConfig = BaselineConfig()) -> LabeledScore:
    perf_done = [False] * len(perf)
    ref_done = [False] * len(ref)
    correct = []
    for i, j in path.pairs:
        if perf_done[i] or ref_done[j]:
            continue
        a, b = perf.notes[i], ref.notes[j]
        if a.pitch == b.pitch and abs(a.onset - b.onset) <= config.onset_tolerance:
            perf_done[i] = ref_done[j] = True
            correct.append(a)
    missed = [n for n, d in zip(ref.notes, ref_done) if not d]
    extra = [n for n, d in zip(perf.notes, perf_done) if not d]
    return LabeledScore(perf.with_notes(correct), ref.with_notes(missed), perf.with_notes(extra))


def detect(score_track: NoteTrack, performance: NoteTrack, config: BaselineConfig = BaselineConfig(),
           noise: TranscriptionNoise = TranscriptionNoise(), external_path=None) -> LabeledScore:
    """Baseline error detection for one track pair.

    ``performance`` is the ground-truth performance for the oracle
    transcriber; with ``external_path`` it is ignored in favour of that file.
    """
    if config.transcriber == "external" and external_path is None:
        raise ValueError("external transcriber needs a note file path")
    perf = transcribe(performance, noise, external_path if config.transcriber == "external" else None)
    if len(perf) == 0 or len(score_track) == 0:
        return LabeledScore(perf.with_notes(()), score_track, perf)
    path = dtw_align(perf, score_track, config)
    return classify(path, perf, score_track, config)
