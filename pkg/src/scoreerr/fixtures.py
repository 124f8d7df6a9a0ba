"""Small synthetic note material for experiments and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .error_gen import MANIFEST_NAME, ROLES, DatasetManifest, ErrorConfig, ManifestEntry, inject_errors
from .midi_core import LabeledScore, NoteEvent, NoteTrack, merge, write_track


def random_melody(source_id: str, n_notes: int, seed: int, instrument: str = "piano", low: int = 48,
                  high: int = 84, min_gap: float = 0.05) -> NoteTrack:
    rng = np.random.default_rng(seed)
    notes = []
    t = 0.05
    for _ in range(n_notes):
        dur = float(rng.uniform(0.08, 0.5))
        notes.append(NoteEvent(int(rng.integers(low, high + 1)), round(t, 6), round(t + dur, 6)))
        t += float(rng.uniform(min_gap, 0.4))
    return NoteTrack(tuple(notes), instrument, source_id)


def chord_progression(source_id: str, n_chords: int, seed: int, instrument: str = "piano", chord_size: int = 3,
                      spacing: float = 0.4, duration: float = 0.3, start: float = 0.1) -> NoteTrack:
    """Block chords of ``chord_size`` distinct pitches, one every ``spacing`` seconds."""
    rng = np.random.default_rng(seed)
    notes = []
    for c in range(n_chords):
        root = int(rng.integers(48, 67))
        shape = sorted(rng.choice(np.arange(1, 12), chord_size - 1, replace=False).tolist())
        onset = round(start + c * spacing, 6)
        for p in [root] + [root + s for s in shape]:
            notes.append(NoteEvent(p, onset, round(onset + duration, 6)))
    return NoteTrack(tuple(notes), instrument, source_id)


def humanize(labels: LabeledScore, seed: int, spread: float = 0.03) -> LabeledScore:
    """Jitter Correct and Extra onsets (offsets move along) by at most ``spread``.

    Correct notes stay Correct: the spread is kept below the scoring tolerance.
    """
    rng = np.random.default_rng(seed)

    def jitter(track: NoteTrack) -> NoteTrack:
        return track.with_notes(n.shifted(float(rng.uniform(-spread, spread))) if n.onset > spread else n
                                for n in track.notes)

    return LabeledScore(jitter(labels.correct), labels.missed, jitter(labels.extra))


def chordal_error_example(source_id: str, seed: int, n_chords: int = 4, lam: float = 0.25, spread: float = 0.03,
                          instrument: str = "piano"):
    """Chords with miss/extra errors and sub-tolerance asynchrony on played notes.

    Returns ``(reference, performance, labels)``.
    """
    ref, perf, labels, _ = _chordal(source_id, seed, n_chords, lam, spread, instrument)
    return ref, perf, labels


def _chordal(source_id, seed, n_chords, lam, spread, instrument):
    ref = chord_progression(source_id, n_chords, seed, instrument)
    cfg = ErrorConfig(lambda_range=(lam, lam), error_type_weights=(1.0, 0.0, 0.0, 1.0), seed=seed)
    _, labels, log, lam = inject_errors(ref, cfg)
    labels = humanize(labels, seed + 1, spread)
    return ref, merge([labels.correct, labels.extra]), labels, (log, lam)


def write_chordal_dataset(out_dir: str | Path, n_tracks: int = 8, seed: int = 100, **kw) -> DatasetManifest:
    """Write chordal examples in the same layout as ``generate_dataset``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_tracks):
        sid = f"chord{i:02d}"
        ref, perf, labels, (log, lam) = _chordal(sid, seed + i, kw.get("n_chords", 4), kw.get("lam", 0.25),
                                                 kw.get("spread", 0.03), kw.get("instrument", "piano"))
        tracks = {"reference": ref, "performance": perf, **labels.tracks()}
        files = {}
        for role in ROLES:
            files[role] = f"{sid}.{role}.notes"
            write_track(tracks[role], out_dir / files[role])
        counts = {k: sum(r.kind == k for r in log) for k in ("miss", "PC", "TS", "EN")}
        entries.append(ManifestEntry(sid, ref.instrument, files, lam, counts, seed + i, len(ref)))
    manifest = DatasetManifest(entries, out_dir, {"fixture": "chordal", "seed": seed, **kw})
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest
