"""Labeled note events <-> per-segment token ids.

Vocabulary layout (341 ids)::

    0 SOS | 1 EOS | 2 EndTie | 3..207 Time(0..204) | 208..210 Label(C, M, E)
    211 On | 212 Off | 213..340 Note(0..127)

A segment is ``SOS, tie section, EndTie, body, EOS``. The tie section names
every (label, pitch) still sounding at the segment start. The body groups
events by time bin: ``Time(b)`` followed by ``Label, On|Off, Note`` triples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .features import SEGMENT_SECONDS
from .midi_core import LabeledScore, NoteEvent, NoteTrack

SOS, EOS, END_TIE = 0, 1, 2
TIME_OFFSET, N_TIME = 3, 205
LABEL_OFFSET = TIME_OFFSET + N_TIME
LABELS = ("correct", "missed", "extra")
ON = LABEL_OFFSET + len(LABELS)
OFF = ON + 1
NOTE_OFFSET = OFF + 1
N_PITCH = 128
VOCAB_SIZE = NOTE_OFFSET + N_PITCH
DELTA = SEGMENT_SECONDS / N_TIME
ERROR_LABEL_IDS = frozenset({LABEL_OFFSET + 1, LABEL_OFFSET + 2})

VOCAB_RANGES = {
    "SOS": range(SOS, SOS + 1),
    "EOS": range(EOS, EOS + 1),
    "EndTie": range(END_TIE, END_TIE + 1),
    "Time": range(TIME_OFFSET, TIME_OFFSET + N_TIME),
    "Label": range(LABEL_OFFSET, LABEL_OFFSET + len(LABELS)),
    "OnOff": range(ON, OFF + 1),
    "Note": range(NOTE_OFFSET, NOTE_OFFSET + N_PITCH),
}


def time_token(b: int) -> int:
    return TIME_OFFSET + b


def label_token(label: str) -> int:
    return LABEL_OFFSET + LABELS.index(label)


def note_token(pitch: int) -> int:
    return NOTE_OFFSET + pitch


def token_name(tok: int) -> str:
    if tok == SOS:
        return "SOS"
    if tok == EOS:
        return "EOS"
    if tok == END_TIE:
        return "EndTie"
    if tok in VOCAB_RANGES["Time"]:
        return f"Time({tok - TIME_OFFSET})"
    if tok in VOCAB_RANGES["Label"]:
        return f"Label({LABELS[tok - LABEL_OFFSET].capitalize()})"
    if tok == ON:
        return "On"
    if tok == OFF:
        return "Off"
    if tok in VOCAB_RANGES["Note"]:
        return f"Note({tok - NOTE_OFFSET})"
    raise ValueError(f"token id {tok} outside vocabulary")


def dump_tokens(tokens: Iterable[int]) -> str:
    return "".join(f"{token_name(t)}={t}\n" for t in tokens)


@dataclass(frozen=True)
class TokenSegment:
    segment_index: int
    tokens: tuple[int, ...]


def segment_start(index: int) -> float:
    return index * SEGMENT_SECONDS


def segment_of(t: float) -> int:
    return max(int(math.floor(t / SEGMENT_SECONDS)), 0)


def time_bin(t: float, index: int) -> int:
    local = t - segment_start(index)
    if local < -1e-9 or local >= SEGMENT_SECONDS + 1e-9:
        raise RuntimeError(f"time {t} outside segment {index}")
    return min(max(int(math.floor(local / DELTA)), 0), N_TIME - 1)


def n_segments_for(labels: LabeledScore) -> int:
    return segment_of(labels.end_time) + 1


def _labeled_notes(labels: LabeledScore):
    for label, track in zip(LABELS, (labels.correct, labels.missed, labels.extra)):
        for n in track.notes:
            yield label, n


def encode(labels: LabeledScore, segment_index: int) -> TokenSegment:
    ties = []
    events = []  # (bin, is_on, label_idx, pitch)
    for label, n in _labeled_notes(labels):
        li = LABELS.index(label)
        if segment_of(n.onset) == segment_index:
            events.append((time_bin(n.onset, segment_index), 1, li, n.pitch))
        elif segment_of(n.onset) < segment_index <= segment_of(n.offset):
            ties.append((li, n.pitch))
        if segment_of(n.offset) == segment_index:
            events.append((time_bin(n.offset, segment_index), 0, li, n.pitch))
    toks = [SOS]
    for li, p in sorted(set(ties)):
        toks += [LABEL_OFFSET + li, note_token(p)]
    toks.append(END_TIE)
    current = None
    for b, is_on, li, p in sorted(events):
        if b != current:
            toks.append(time_token(b))
            current = b
        toks += [LABEL_OFFSET + li, ON if is_on else OFF, note_token(p)]
    toks.append(EOS)
    return TokenSegment(segment_index, tuple(toks))


def encode_all(labels: LabeledScore, n_segments: Optional[int] = None) -> list[TokenSegment]:
    n = n_segments if n_segments is not None else n_segments_for(labels)
    return [encode(labels, i) for i in range(n)]


@dataclass
class Diagnostics:
    skipped_tokens: int = 0
    unmatched_offs: int = 0
    auto_closed: int = 0
    spurious_ties: int = 0
    dropped_ties: int = 0
    unclosed_at_end: int = 0
    truncated: int = 0

    def add(self, other: "Diagnostics") -> None:
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))

    def total(self) -> int:
        return sum(vars(self).values())


@dataclass(frozen=True)
class NotePiece:
    """Part of a note inside one segment; ``None`` times continue across a boundary."""

    label: str
    pitch: int
    onset: Optional[float]
    offset: Optional[float]


@dataclass
class DecodedSegment:
    segment_index: int
    pieces: list[NotePiece]
    open_at_end: set
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def decode(tokens: TokenSegment | Sequence[int], prior_ties: Optional[set] = None, segment_index: int = 0) -> DecodedSegment:
    """Tolerant left-to-right parse; bad tokens are counted, never fatal.

    Times are segment-local seconds at time-bin centers. ``prior_ties`` is the
    set of (label, pitch) left open by the previous segment; declared ties
    outside it are dropped as spurious. ``None`` accepts every declared tie.
    """
    if isinstance(tokens, TokenSegment):
        segment_index = tokens.segment_index
        tokens = tokens.tokens
    diag = Diagnostics()
    open_notes: dict[tuple[str, int], Optional[float]] = {}
    pieces: list[NotePiece] = []
    in_ties = True
    time: Optional[float] = None
    label: Optional[str] = None
    onoff: Optional[int] = None
    for pos, tok in enumerate(tokens):
        tok = int(tok)
        if tok == SOS:
            if pos != 0:
                diag.skipped_tokens += 1
            continue
        if tok == EOS:
            break
        if tok == END_TIE:
            if not in_ties:
                diag.skipped_tokens += 1
            in_ties = False
            label = onoff = None
            continue
        if TIME_OFFSET <= tok < LABEL_OFFSET:
            if in_ties:
                in_ties = False
                diag.skipped_tokens += 1  # missing EndTie
            t = (tok - TIME_OFFSET + 0.5) * DELTA
            if time is not None and t < time:
                diag.skipped_tokens += 1
                continue
            time = t
            label = onoff = None
        elif LABEL_OFFSET <= tok < ON:
            if label is not None:
                diag.skipped_tokens += 1
            label = LABELS[tok - LABEL_OFFSET]
        elif tok in (ON, OFF):
            if in_ties or label is None or onoff is not None:
                diag.skipped_tokens += 1
                continue
            onoff = tok
        elif NOTE_OFFSET <= tok < VOCAB_SIZE:
            pitch = tok - NOTE_OFFSET
            if in_ties:
                if label is None:
                    diag.skipped_tokens += 1
                    continue
                key = (label, pitch)
                if prior_ties is not None and key not in prior_ties:
                    diag.spurious_ties += 1
                elif key in open_notes:
                    diag.skipped_tokens += 1
                else:
                    open_notes[key] = None
                label = None
                continue
            if time is None or label is None or onoff is None:
                diag.skipped_tokens += 1
                label = onoff = None
                continue
            key = (label, pitch)
            if onoff == ON:
                if key in open_notes:
                    diag.auto_closed += 1
                    pieces.append(NotePiece(label, pitch, open_notes.pop(key), time))
                open_notes[key] = time
            elif key in open_notes:
                pieces.append(NotePiece(label, pitch, open_notes.pop(key), time))
            else:
                diag.unmatched_offs += 1
            label = onoff = None
        else:
            diag.skipped_tokens += 1
    if prior_ties is not None:
        declared = {k for k, v in open_notes.items() if v is None} | {(p.label, p.pitch) for p in pieces if p.onset is None}
        diag.dropped_ties += len(set(prior_ties) - declared)
    for key, onset in open_notes.items():
        pieces.append(NotePiece(key[0], key[1], onset, None))
    return DecodedSegment(segment_index, pieces, set(open_notes), diag)


def decode_all(segments: Sequence[TokenSegment]) -> list[DecodedSegment]:
    out = []
    prior: set = set()
    for seg in segments:
        d = decode(seg, prior_ties=prior)
        out.append(d)
        prior = d.open_at_end
    return out


def stitch(segments: Sequence[DecodedSegment], instrument: str = "", source_id: str = "", end_time: Optional[float] = None):
    """Join segment pieces into global notes. Returns ``(LabeledScore, Diagnostics)``.

    A tie that is not continued by the next segment closes at that segment's
    start; notes still open after the last segment close at ``end_time``
    (default: end of the last segment).
    """
    diag = Diagnostics()
    for s in segments:
        diag.add(s.diagnostics)
    notes = {label: [] for label in LABELS}
    open_notes: dict[tuple[str, int], float] = {}

    def close(key, onset, offset):
        offset = max(offset, onset + DELTA / 2)
        notes[key[0]].append(NoteEvent(key[1], onset, offset))

    prev_index = None
    for seg in sorted(segments, key=lambda s: s.segment_index):
        if prev_index is not None and seg.segment_index != prev_index + 1:
            raise ValueError("segments must have consecutive indices")
        prev_index = seg.segment_index
        start = segment_start(seg.segment_index)
        continued = {(p.label, p.pitch) for p in seg.pieces if p.onset is None}
        for key in list(open_notes):
            if key not in continued:
                close(key, open_notes.pop(key), start)
        for p in seg.pieces:
            key = (p.label, p.pitch)
            if p.onset is None:
                if key not in open_notes:
                    # tie with nothing to continue: treat as starting here
                    diag.spurious_ties += 1
                    onset = start
                else:
                    onset = open_notes.pop(key)
            else:
                onset = start + p.onset
            if p.offset is None:
                open_notes[key] = onset
            else:
                close(key, onset, start + p.offset)
    if segments:
        final = end_time if end_time is not None else segment_start(prev_index + 1)
        for key, onset in open_notes.items():
            diag.unclosed_at_end += 1
            close(key, onset, max(final, onset + DELTA))
    meta = dict(instrument=instrument, source_id=source_id)
    score = LabeledScore(*(NoteTrack(tuple(notes[label]), **meta) for label in LABELS))
    return score, diag


def roundtrip(labels: LabeledScore, n_segments: Optional[int] = None) -> LabeledScore:
    score, _ = stitch(decode_all(encode_all(labels, n_segments)), labels.correct.instrument, labels.correct.source_id)
    return score
