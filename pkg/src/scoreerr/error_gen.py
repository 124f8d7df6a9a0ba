"""Synthetic performance-error injection and labeled dataset generation.

Each reference note is selected with probability ``lam`` (drawn once per
track) and mutated by one of four error kinds: ``miss`` removes it, ``PC``
changes its pitch, ``TS`` shifts it in time and ``EN`` adds a neighbouring
extra note. Labels follow from the bookkeeping, so a wrong pitch becomes one
Missed plus one Extra note.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .midi_core import DISJOINT_TOL, LabeledScore, NoteEvent, NoteTrack, merge, write_track

KINDS = ("miss", "PC", "TS", "EN")
MANIFEST_HEADER = "#polytune-manifest v1"
_MAX_TRIES = 32


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorConfig:
    lambda_range: tuple[float, float] = (0.1, 0.4)
    pitch_sigma: float = 1.0
    time_sigma: float = 0.02
    pitch_truncation: float = 3.0
    time_truncation: float = 0.06
    error_type_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    match_tolerance: float = 0.05

    def validate(self) -> None:
        low, high = self.lambda_range
        # lambda == 0 is allowed as the no-error fixed point
        if not 0 <= low <= high <= 1:
            raise ConfigError(f"lambda_range must satisfy 0 <= low <= high <= 1, got {self.lambda_range}")
        if self.pitch_sigma <= 0 or self.time_sigma <= 0:
            raise ConfigError("sigmas must be positive")
        if self.pitch_truncation <= 0 or self.time_truncation <= 0:
            raise ConfigError("truncation bounds must be positive")
        w = self.error_type_weights
        if len(w) != 4 or any(x < 0 for x in w) or sum(w) == 0:
            raise ConfigError("error_type_weights needs 4 non-negative values, not all zero")
        if w[KINDS.index("PC")] > 0 or w[KINDS.index("EN")] > 0:
            if self.pitch_truncation < 1.0:
                raise ConfigError("pitch_truncation below one semitone cannot produce pitch errors")

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorConfig":
        d = dict(d)
        for key in ("lambda_range", "error_type_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ErrorRecord:
    kind: str
    original_note: Optional[NoteEvent]
    injected_note: Optional[NoteEvent]
    eps_p: int = 0
    eps_t: float = 0.0


def sample_truncated_normal(sigma: float, bound: float, rng: np.random.Generator) -> float:
    """Draw from N(0, sigma^2) conditioned on [-bound, bound] by rejection."""
    if sigma <= 0 or bound <= 0:
        raise ValueError("sigma and bound must be positive")
    while True:
        x = rng.normal(0.0, sigma)
        if -bound <= x <= bound:
            return float(x)


def _pitch_offset(config: ErrorConfig, rng: np.random.Generator) -> int:
    x = sample_truncated_normal(config.pitch_sigma, config.pitch_truncation, rng)
    r = int(round(x))
    if r == 0:
        r = 1 if x >= 0 else -1
    return r


class _Occupancy:
    """(pitch, onset) slots already used, to keep label tracks disjoint."""

    def __init__(self, notes: Sequence[NoteEvent]):
        self.by_pitch: dict[int, list[float]] = {}
        for n in notes:
            self.add(n)

    def add(self, n: NoteEvent) -> None:
        self.by_pitch.setdefault(n.pitch, []).append(n.onset)

    def free(self, pitch: int, onset: float, ignore: Optional[NoteEvent] = None) -> bool:
        for t in self.by_pitch.get(pitch, ()):
            if abs(t - onset) <= DISJOINT_TOL:
                if ignore is not None and ignore.pitch == pitch and t == ignore.onset:
                    continue
                return False
        return True


def inject_errors(reference: NoteTrack, config: ErrorConfig):
    """Apply random errors to ``reference``.

    Returns ``(performance, labels, log, lam)``. Mutations whose result would
    collide with another note (same pitch, onset within 1 ms) or leave the
    valid pitch/time range are re-drawn; after repeated failures the note is
    left untouched.
    """
    config.validate()
    if len(reference) == 0:
        raise ValueError("reference track is empty")
    rng = np.random.default_rng(config.seed)
    low, high = config.lambda_range
    lam = float(rng.uniform(low, high)) if high > low else float(low)
    selected = rng.random(len(reference)) < lam
    weights = np.asarray(config.error_type_weights, dtype=float)
    weights = weights / weights.sum()

    occupied = _Occupancy(reference.notes)
    correct, missed, extra = [], [], []
    log: list[ErrorRecord] = []
    for note, sel in zip(reference.notes, selected):
        if not sel:
            correct.append(note)
            continue
        kind = KINDS[int(rng.choice(4, p=weights))]
        record = _mutate(note, kind, config, rng, occupied)
        if record is None:
            correct.append(note)
            continue
        log.append(record)
        new = record.injected_note
        if kind == "miss":
            missed.append(note)
        elif kind == "PC":
            missed.append(note)
            extra.append(new)
        elif kind == "EN":
            correct.append(note)
            extra.append(new)
        elif abs(record.eps_t) > config.match_tolerance:
            missed.append(note)
            extra.append(new)
        else:
            correct.append(new)

    meta = dict(instrument=reference.instrument, source_id=reference.source_id)
    labels = LabeledScore(
        NoteTrack(tuple(correct), **meta),
        NoteTrack(tuple(missed), **meta),
        NoteTrack(tuple(extra), **meta),
    )
    performance = merge([labels.correct, labels.extra])
    return performance, labels, log, lam


def _mutate(note, kind, config, rng, occupied) -> Optional[ErrorRecord]:
    if kind == "miss":
        return ErrorRecord("miss", note, None)
    for _ in range(_MAX_TRIES):
        dp, dt = 0, 0.0
        if kind in ("PC", "EN"):
            dp = _pitch_offset(config, rng)
        if kind in ("TS", "EN"):
            dt = sample_truncated_normal(config.time_sigma, config.time_truncation, rng)
        pitch = min(max(note.pitch + dp, 0), 127)
        dp = pitch - note.pitch
        onset = note.onset + dt
        if (kind != "TS" and dp == 0) or onset < 0:
            continue
        ignore = note if kind == "TS" else None
        if not occupied.free(pitch, onset, ignore=ignore):
            continue
        new = note.shifted(dt, dp)
        occupied.add(new)
        return ErrorRecord(kind, None if kind == "EN" else note, new, dp, dt)
    return None


def reference_from_labels(labels: LabeledScore, log: Sequence[ErrorRecord], tolerance: float) -> NoteTrack:
    """Rebuild the reference from labels, undoing sub-tolerance timing shifts.

    A small timing shift leaves the note Correct at its performed time, so
    ``merge(correct, missed)`` differs from the reference exactly at those
    notes; the log says which.
    """
    undo = {r.injected_note: r.original_note for r in log if r.kind == "TS" and abs(r.eps_t) <= tolerance}
    correct = [undo.get(n, n) for n in labels.correct.notes]
    return merge([labels.correct.with_notes(correct), labels.missed])


def track_seed(master_seed: int, source_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{source_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class ManifestEntry:
    source_id: str
    instrument: str
    files: dict
    lam: float
    error_counts: dict
    seed: int
    n_reference_notes: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path
    config: dict = field(default_factory=dict)

    def path_of(self, entry: ManifestEntry, role: str) -> Path:
        return self.root / entry.files[role]

    def dumps(self) -> str:
        lines = [MANIFEST_HEADER, json.dumps({"config": self.config}, sort_keys=True)]
        lines += [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> None:
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ValueError(f"{path}: missing manifest header")
        config: dict = {}
        entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "config" in obj and "source_id" not in obj:
                config = obj["config"]
            else:
                entries.append(ManifestEntry(**obj))
        return cls(entries, path.parent, config)


ROLES = ("reference", "performance", "correct", "missed", "extra")
MANIFEST_NAME = "manifest.jsonl"


def _generate_one(ref: NoteTrack, config: ErrorConfig, out_dir: Path, suffix: str) -> ManifestEntry:
    seed = track_seed(config.seed, ref.source_id)
    cfg = ErrorConfig(**{**asdict(config), "seed": seed})
    performance, labels, log, lam = inject_errors(ref, cfg)
    tracks = {"reference": ref, "performance": performance, **labels.tracks()}
    files = {}
    for role in ROLES:
        name = f"{ref.source_id}.{role}{suffix}"
        write_track(tracks[role], out_dir / name)
        files[role] = name
    counts = Counter(r.kind for r in log)
    return ManifestEntry(
        source_id=ref.source_id,
        instrument=ref.instrument,
        files=files,
        lam=lam,
        error_counts={k: counts.get(k, 0) for k in KINDS},
        seed=seed,
        n_reference_notes=len(ref),
    )


def generate_dataset(
    references: Sequence[NoteTrack],
    config: ErrorConfig,
    out_dir: str | Path,
    threads: int = 1,
    suffix: str = ".notes",
) -> DatasetManifest:
    """Inject errors into every reference and write five note files per track plus a manifest."""
    if not references:
        raise ValueError("no reference tracks given")
    config.validate()
    ids = [r.source_id for r in references]
    dupes = sorted({s for s in ids if ids.count(s) > 1})
    if dupes:
        raise ValueError(f"duplicate source_id(s): {dupes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(lambda r: _generate_one(r, config, out_dir, suffix), references))
    else:
        entries = [_generate_one(r, config, out_dir, suffix) for r in references]
    cfg = asdict(config)
    manifest = DatasetManifest(entries, out_dir, {"error_config": cfg})
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest
