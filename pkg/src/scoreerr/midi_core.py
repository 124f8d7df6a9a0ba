"""Symbolic note representation plus Standard MIDI File / text note-file I/O.

Times are absolute seconds everywhere. SMF files are written as format 0 at
480 ticks per quarter and a fixed 120 BPM, so one tick is 1/960 s.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_VELOCITY = 96
TICKS_PER_QUARTER = 480
WRITE_TEMPO_US = 500_000  # 120 BPM
TEXT_HEADER = "#polytune-notes v1"
DISJOINT_TOL = 1e-3


class ParseError(ValueError):
    """Malformed note file. ``offset`` is the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedFeatureError(ValueError):
    pass


@dataclass(frozen=True, order=False)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: int = DEFAULT_VELOCITY

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must exceed onset {self.onset}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [1, 127]")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def sort_key(self) -> tuple[float, int, float]:
        return (self.onset, self.pitch, self.offset)

    def shifted(self, dt: float = 0.0, dp: int = 0) -> "NoteEvent":
        return NoteEvent(self.pitch + dp, self.onset + dt, self.offset + dt, self.velocity)


def canonicalize(notes: Iterable[NoteEvent]) -> tuple[NoteEvent, ...]:
    """Sort by (onset, pitch, offset); for equal (onset, pitch) keep the longest
    note, then the loudest, so the result does not depend on input order."""
    ordered = sorted(notes, key=lambda n: (n.onset, n.pitch, n.offset, n.velocity))
    out: list[NoteEvent] = []
    for n in ordered:
        if out and out[-1].onset == n.onset and out[-1].pitch == n.pitch:
            # later entry has the larger offset because of the sort
            out[-1] = n
        else:
            out.append(n)
    return tuple(out)


@dataclass(frozen=True)
class NoteTrack:
    notes: tuple[NoteEvent, ...] = ()
    instrument: str = ""
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "notes", canonicalize(self.notes))

    def __len__(self) -> int:
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    def with_notes(self, notes: Iterable[NoteEvent]) -> "NoteTrack":
        return NoteTrack(tuple(notes), self.instrument, self.source_id)

    @property
    def end_time(self) -> float:
        return max((n.offset for n in self.notes), default=0.0)


@dataclass(frozen=True)
class LabeledScore:
    correct: NoteTrack = field(default_factory=NoteTrack)
    missed: NoteTrack = field(default_factory=NoteTrack)
    extra: NoteTrack = field(default_factory=NoteTrack)

    def performance(self) -> NoteTrack:
        return merge([self.correct, self.extra])

    def reference(self) -> NoteTrack:
        return merge([self.correct, self.missed])

    def tracks(self) -> dict[str, NoteTrack]:
        return {"correct": self.correct, "missed": self.missed, "extra": self.extra}

    @property
    def end_time(self) -> float:
        return max(t.end_time for t in self.tracks().values())


def merge(tracks: Sequence[NoteTrack]) -> NoteTrack:
    """Union of notes; metadata comes from the first non-empty-metadata track."""
    instrument = next((t.instrument for t in tracks if t.instrument), "")
    source_id = next((t.source_id for t in tracks if t.source_id), "")
    return NoteTrack(tuple(n for t in tracks for n in t.notes), instrument, source_id)


def overlapping_pairs(a: NoteTrack, b: NoteTrack, tol: float = DISJOINT_TOL) -> list[tuple[NoteEvent, NoteEvent]]:
    """Pairs sharing a pitch with onsets within ``tol``."""
    by_pitch: dict[int, list[NoteEvent]] = {}
    for n in b.notes:
        by_pitch.setdefault(n.pitch, []).append(n)
    return [(x, y) for x in a.notes for y in by_pitch.get(x.pitch, ()) if abs(x.onset - y.onset) <= tol]


# ---------------------------------------------------------------------------
# text format


def dumps_text(track: NoteTrack) -> str:
    lines = [TEXT_HEADER]
    if track.instrument:
        lines.append(f"#instrument\t{track.instrument}")
    if track.source_id:
        lines.append(f"#source_id\t{track.source_id}")
    for n in track.notes:
        lines.append(f"{n.onset:.6f}\t{n.offset:.6f}\t{n.pitch}\t{n.velocity}")
    return "\n".join(lines) + "\n"


def loads_text(data: bytes, default_source: str = "") -> NoteTrack:
    pos = 0
    notes = []
    meta = {"instrument": "", "source_id": default_source}
    for lineno, raw in enumerate(data.split(b"\n")):
        start = pos
        pos += len(raw) + 1
        try:
            line = raw.decode("utf-8").rstrip("\r")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8 on line {lineno + 1}", start + exc.start) from None
        if lineno == 0:
            if line.strip() != TEXT_HEADER:
                raise ParseError("missing note-file header", start)
            continue
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("\t")
            if key in meta:
                meta[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"expected 4 tab-separated fields on line {lineno + 1}", start)
        try:
            onset, offset = float(parts[0]), float(parts[1])
            notes.append(NoteEvent(int(parts[2]), onset, offset, int(parts[3])))
        except ValueError as exc:
            raise ParseError(f"bad note on line {lineno + 1}: {exc}", start) from None
    return NoteTrack(tuple(notes), meta["instrument"], meta["source_id"])


# ---------------------------------------------------------------------------
# Standard MIDI File


def _read_vlq(buf: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(buf):
            raise ParseError("truncated variable-length quantity", pos)
        b = buf[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise ParseError("variable-length quantity longer than 4 bytes", pos)


def _write_vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(buf: bytes, start: int, end: int):
    """Yield (tick, kind, payload) with kind in {'on', 'off', 'tempo', 'name'}."""
    pos = start
    tick = 0
    status = None
    events = []
    while pos < end:
        delta, pos = _read_vlq(buf, pos)
        tick += delta
        if pos >= end:
            raise ParseError("event truncated after delta time", pos)
        b = buf[pos]
        if b == 0xFF:
            if pos + 2 > end:
                raise ParseError("truncated meta event", pos)
            mtype = buf[pos + 1]
            length, dpos = _read_vlq(buf, pos + 2)
            data = buf[dpos:dpos + length]
            if dpos + length > end:
                raise ParseError("meta event overruns track", pos)
            if mtype == 0x51:
                if length != 3:
                    raise ParseError("tempo meta event must have length 3", pos)
                events.append((tick, "tempo", int.from_bytes(data, "big")))
            elif mtype == 0x03:
                events.append((tick, "name", data.decode("latin-1")))
            elif mtype == 0x2F:
                return events
            pos = dpos + length
            status = None
        elif b in (0xF0, 0xF7):
            length, dpos = _read_vlq(buf, pos + 1)
            if dpos + length > end:
                raise ParseError("sysex event overruns track", pos)
            pos = dpos + length
            status = None
        else:
            if b & 0x80:
                if b >= 0xF1:
                    raise UnsupportedFeatureError(f"system message 0x{b:02X} at byte {pos} in SMF track")
                status = b
                pos += 1
            elif status is None:
                raise ParseError("running status without prior status byte", pos)
            n = _DATA_LEN[status & 0xF0]
            if pos + n > end:
                raise ParseError("channel event truncated", pos)
            data = buf[pos:pos + n]
            if any(d & 0x80 for d in data):
                raise ParseError("data byte with high bit set", pos)
            pos += n
            kind = status & 0xF0
            chan = status & 0x0F
            if kind == 0x90 and data[1] > 0:
                events.append((tick, "on", (chan, data[0], data[1])))
            elif kind in (0x80, 0x90):
                events.append((tick, "off", (chan, data[0])))
    return events


def _tick_to_seconds(tempo_map: list[tuple[int, int]], tpq: int):
    """Return a function mapping absolute ticks to seconds under ``tempo_map``."""
    # segments: (start_tick, start_seconds, us_per_quarter)
    segs = [(0, 0.0, 500_000)]
    for tick, tempo in sorted(tempo_map, key=lambda x: x[0]):
        t0, s0, tempo0 = segs[-1]
        if tick == t0:
            segs[-1] = (t0, s0, tempo)
        else:
            segs.append((tick, s0 + (tick - t0) * tempo0 / (tpq * 1e6), tempo))

    def convert(tick: int) -> float:
        for t0, s0, tempo in reversed(segs):
            if tick >= t0:
                return s0 + (tick - t0) * tempo / (tpq * 1e6)
        return 0.0

    return convert


def loads_smf(buf: bytes, default_source: str = "") -> NoteTrack:
    if buf[:4] != b"MThd":
        raise ParseError("missing MThd chunk", 0)
    if len(buf) < 14:
        raise ParseError("truncated header chunk", len(buf))
    hlen, fmt, ntrks, division = struct.unpack(">IHHH", buf[4:14])
    if hlen < 6:
        raise ParseError("header chunk too short", 4)
    if fmt not in (0, 1):
        raise UnsupportedFeatureError(f"SMF format {fmt} is not supported")
    if division & 0x8000:
        raise UnsupportedFeatureError("SMPTE time division is not supported")
    tpq = division
    if tpq == 0:
        raise ParseError("zero ticks per quarter", 12)
    pos = 8 + hlen
    tracks = []
    for _ in range(ntrks):
        if pos + 8 > len(buf):
            raise ParseError("truncated track chunk header", pos)
        ctype = buf[pos:pos + 4]
        (clen,) = struct.unpack(">I", buf[pos + 4:pos + 8])
        body = pos + 8
        if body + clen > len(buf):
            raise ParseError("track chunk overruns file", pos)
        if ctype == b"MTrk":
            tracks.append(_parse_track(buf, body, body + clen))
        pos = body + clen

    tempo_map = [(t, v) for ev in tracks for (t, k, v) in ev if k == "tempo"]
    to_sec = _tick_to_seconds(tempo_map, tpq)
    chosen = next((ev for ev in tracks if any(k == "on" for _, k, _ in ev)), [])
    name = next((v for ev in ([chosen] + tracks) for (_, k, v) in ev if k == "name"), "")

    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    notes = []
    for tick, kind, payload in chosen:
        if kind == "on":
            chan, pitch, vel = payload
            open_notes.setdefault((chan, pitch), []).append((tick, vel))
        elif kind == "off":
            stack = open_notes.get(payload)
            if stack:
                on_tick, vel = stack.pop(0)
                onset, offset = to_sec(on_tick), to_sec(tick)
                if offset > onset:
                    notes.append(NoteEvent(payload[1], onset, offset, vel))
    return NoteTrack(tuple(notes), name, default_source)


def dumps_smf(track: NoteTrack) -> bytes:
    """Format-0 SMF bytes. Overlapping notes of one pitch cannot be paired
    unambiguously on read-back (note-offs are matched first-in, first-out)."""
    ticks_per_sec = TICKS_PER_QUARTER * 1e6 / WRITE_TEMPO_US
    events = []  # (tick, order, bytes); offs sort before ons at the same tick
    for n in track.notes:
        on = int(round(n.onset * ticks_per_sec))
        off = max(int(round(n.offset * ticks_per_sec)), on + 1)
        events.append((on, 1, n.pitch, bytes([0x90, n.pitch, n.velocity])))
        events.append((off, 0, n.pitch, bytes([0x80, n.pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    body = io.BytesIO()
    body.write(b"\x00\xFF\x51\x03" + WRITE_TEMPO_US.to_bytes(3, "big"))
    if track.instrument:
        name = track.instrument.encode("latin-1", "replace")
        body.write(b"\x00\xFF\x03" + _write_vlq(len(name)) + name)
    last = 0
    for tick, _, _, msg in events:
        body.write(_write_vlq(tick - last) + msg)
        last = tick
    body.write(b"\x00\xFF\x2F\x00")
    data = body.getvalue()
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER)
    return header + b"MTrk" + struct.pack(">I", len(data)) + data


def read_track(path: str | Path) -> NoteTrack:
    path = Path(path)
    buf = path.read_bytes()
    if buf.startswith(b"MThd"):
        return loads_smf(buf, default_source=path.stem)
    if buf.startswith(b"#"):
        return loads_text(buf, default_source=path.stem.split(".")[0])
    raise ParseError("unrecognized note file (neither SMF nor note text)", 0)


def write_track(track: NoteTrack, path: str | Path) -> None:
    """Write SMF for ``.mid``/``.midi`` suffixes, the text note format otherwise."""
    path = Path(path)
    if path.suffix.lower() in (".mid", ".midi"):
        path.write_bytes(dumps_smf(track))
    else:
        path.write_bytes(dumps_text(track).encode("utf-8"))
