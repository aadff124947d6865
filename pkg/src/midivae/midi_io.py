"""Standard MIDI File (format 0/1) reader and writer.

Only the event types the roll codec needs are interpreted: note on/off,
program change, set-tempo and time-signature. Everything else is skipped
by length so the parser stays total over arbitrary input.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field

DRUM_CHANNEL = 9
DEFAULT_TEMPO_BPM = 120.0
MAX_VARINT_BYTES = 4


class MidiError(ValueError):
    """Raised for any unreadable MIDI input; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MalformedHeader(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class BadVarint(MidiError):
    pass


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset_ticks: int
    duration_ticks: int
    pitch: int
    velocity: int
    channel: int = 0

    def __post_init__(self) -> None:
        if self.onset_ticks < 0:
            raise ValueError(f"negative onset {self.onset_ticks}")
        if self.duration_ticks < 1:
            raise ValueError(f"duration must be >= 1 tick, got {self.duration_ticks}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside 0..127")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1..127")
        if not 0 <= self.channel <= 15:
            raise ValueError(f"channel {self.channel} outside 0..15")

    @property
    def offset_ticks(self) -> int:
        return self.onset_ticks + self.duration_ticks


@dataclass
class Track:
    program: int = 0
    is_drum: bool = False
    events: list[NoteEvent] = field(default_factory=list)


@dataclass
class MidiDocument:
    ticks_per_quarter: int = 480
    tempo_bpm: float = DEFAULT_TEMPO_BPM
    tracks: list[Track] = field(default_factory=list)
    time_signatures: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def n_notes(self) -> int:
        return sum(len(t.events) for t in self.tracks)

    def validate(self) -> None:
        if self.ticks_per_quarter < 1 or self.ticks_per_quarter > 0x7FFF:
            raise ValueError(f"ticks_per_quarter {self.ticks_per_quarter} outside 1..32767")
        if not self.tempo_bpm > 0:
            raise ValueError(f"tempo must be positive, got {self.tempo_bpm}")
        for num, den, tick in self.time_signatures:
            if num < 1 or num > 255 or den < 1 or den & (den - 1) or tick < 0:
                raise ValueError(f"bad time signature {(num, den, tick)}")
        for i, track in enumerate(self.tracks):
            if not 0 <= track.program <= 127:
                raise ValueError(f"track {i}: program {track.program} outside 0..127")
            channels = {ev.channel for ev in track.events}
            if len(channels) > 1:
                raise ValueError(f"track {i}: events span several channels {sorted(channels)}")
            if channels and (channels.pop() == DRUM_CHANNEL) != track.is_drum:
                raise ValueError(f"track {i}: is_drum must be set iff channel is {DRUM_CHANNEL}")
            if any(a.onset_ticks > b.onset_ticks for a, b in zip(track.events, track.events[1:])):
                raise ValueError(f"track {i}: events not sorted by onset")


def normalize(doc: MidiDocument) -> MidiDocument:
    """Canonical form used for round-trip comparison.

    Drops tracks without notes, sorts events, and snaps the tempo to the
    microsecond-per-quarter resolution MIDI can store.
    """
    tracks = [
        Track(t.program, t.is_drum, sorted(t.events)) for t in doc.tracks if t.events
    ]
    return MidiDocument(
        ticks_per_quarter=doc.ticks_per_quarter,
        tempo_bpm=60e6 / _tempo_to_usec(doc.tempo_bpm),
        tracks=tracks,
        time_signatures=sorted(doc.time_signatures, key=lambda ts: ts[2]),
    )


# --------------------------------------------------------------------------- reading


class _Reader:
    def __init__(self, data: bytes, start: int, end: int) -> None:
        self.data = data
        self.pos = start
        self.end = end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise TruncatedChunk("unexpected end of chunk", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedChunk(f"need {n} bytes, chunk has {self.end - self.pos}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def varint(self) -> int:
        start = self.pos
        value = 0
        for _ in range(MAX_VARINT_BYTES):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise BadVarint("variable-length quantity longer than 4 bytes", start)


def parse_midi(data: bytes) -> MidiDocument:
    """Parse SMF 0/1 bytes into a :class:`MidiDocument`.

    Each (MTrk chunk, channel) pair with at least one note becomes one
    :class:`Track`. A note-on hitting an already sounding pitch on the same
    channel closes the earlier note; notes still open at end of track are
    closed there.
    """
    data = bytes(data)
    if len(data) < 8 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd magic", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6:
        raise MalformedHeader(f"header length {hlen} < 6", 4)
    if 8 + hlen > len(data):
        raise TruncatedChunk("header chunk runs past end of file", 8)
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 is not supported", 8)
    if fmt > 2:
        raise MalformedHeader(f"unknown SMF format {fmt}", 8)
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported", 12)
    if division == 0:
        raise MalformedHeader("ticks per quarter is zero", 12)

    doc = MidiDocument(ticks_per_quarter=division, tempo_bpm=DEFAULT_TEMPO_BPM)
    tempo_tick: int | None = None
    pos = 8 + hlen
    chunk_index = 0
    while pos < len(data) and chunk_index < ntrks:
        if pos + 8 > len(data):
            raise TruncatedChunk("chunk header runs past end of file", pos)
        kind = data[pos : pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4 : pos + 8])
        body = pos + 8
        if body + clen > len(data):
            raise TruncatedChunk(f"chunk of {clen} bytes runs past end of file", pos + 4)
        if kind == b"MTrk":
            tracks, tempos, sigs = _parse_track(_Reader(data, body, body + clen))
            doc.tracks.extend(tracks)
            doc.time_signatures.extend(sigs)
            for tick, usec in tempos:
                if tempo_tick is None or tick < tempo_tick:
                    tempo_tick = tick
                    doc.tempo_bpm = 60e6 / usec
            chunk_index += 1
        pos = body + clen
    doc.time_signatures.sort(key=lambda ts: ts[2])
    return doc


def _parse_track(r: _Reader):
    tick = 0
    status: int | None = None
    programs: dict[int, int] = {}
    first_program: dict[int, int] = {}
    open_notes: dict[tuple[int, int], tuple[int, int]] = {}
    notes: dict[int, list[NoteEvent]] = defaultdict(list)
    tempos: list[tuple[int, int]] = []
    sigs: list[tuple[int, int, int]] = []

    def close(ch: int, pitch: int, at: int) -> None:
        onset, vel = open_notes.pop((ch, pitch))
        if at > onset:
            notes[ch].append(NoteEvent(onset, at - onset, pitch, vel, ch))

    while r.pos < r.end:
        tick += r.varint()
        at = r.pos
        b = r.byte()
        if b & 0x80:
            if b < 0xF0:
                status = b
        elif status is None:
            raise MidiError("running status without a preceding status byte", at)
        else:
            r.pos -= 1
            b = status

        if b == 0xFF:
            mtype = r.byte()
            payload = r.take(r.varint())
            if mtype == 0x2F:
                break
            if mtype == 0x51 and len(payload) == 3:
                usec = int.from_bytes(payload, "big")
                if usec > 0:
                    tempos.append((tick, usec))
            elif mtype == 0x58 and len(payload) >= 2:
                if payload[1] > 7:
                    raise MidiError(f"time signature denominator 2^{payload[1]} too large", at)
                sigs.append((payload[0], 1 << payload[1], tick))
            continue
        if b in (0xF0, 0xF7):
            r.take(r.varint())
            continue
        if b >= 0xF0:
            raise MidiError(f"status byte 0x{b:02X} not allowed in a track", at)

        kind, ch = b & 0xF0, b & 0x0F
        d1 = r.byte()
        d2 = r.byte() if kind not in (0xC0, 0xD0) else 0
        if d1 > 0x7F or d2 > 0x7F:
            raise MidiError("data byte with high bit set", at)
        if kind == 0x90 and d2 > 0:
            if (ch, d1) in open_notes:
                close(ch, d1, tick)
            open_notes[(ch, d1)] = (tick, d2)
            if ch not in first_program:
                first_program[ch] = programs.get(ch, 0)
        elif kind == 0x80 or kind == 0x90:
            if (ch, d1) in open_notes:
                close(ch, d1, tick)
        elif kind == 0xC0:
            programs[ch] = d1

    for ch, pitch in sorted(open_notes):
        close(ch, pitch, tick)

    tracks = []
    for ch in sorted(notes):
        events = sorted(notes[ch])
        if events:
            tracks.append(Track(first_program.get(ch, 0), ch == DRUM_CHANNEL, events))
    return tracks, tempos, sigs


# --------------------------------------------------------------------------- writing


def _tempo_to_usec(bpm: float) -> int:
    return max(1, min(0xFFFFFF, int(round(60e6 / bpm))))


def _varint(value: int) -> bytes:
    if value < 0 or value > 0x0FFFFFFF:
        raise ValueError(f"delta time {value} not encodable")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _chunk(kind: bytes, body: bytes) -> bytes:
    return kind + struct.pack(">I", len(body)) + body


def _encode_events(timed: list[tuple[int, int, bytes]]) -> bytes:
    """``timed`` holds (tick, order, raw message); sorted then delta-encoded."""
    out = bytearray()
    last = 0
    for tick, _, msg in sorted(timed, key=lambda e: (e[0], e[1])):
        out += _varint(tick - last) + msg
        last = tick
    return bytes(out)


def write_midi(doc: MidiDocument) -> bytes:
    """Serialize ``doc`` as SMF format 1: a conductor track plus one MTrk per track."""
    doc.validate()
    conductor: list[tuple[int, int, bytes]] = [
        (0, 0, b"\xff\x51\x03" + _tempo_to_usec(doc.tempo_bpm).to_bytes(3, "big"))
    ]
    for num, den, tick in doc.time_signatures:
        conductor.append((tick, 1, bytes([0xFF, 0x58, 0x04, num, den.bit_length() - 1, 24, 8])))
    end = max((ev.offset_ticks for t in doc.tracks for ev in t.events), default=0)
    end = max([end] + [ts[2] for ts in doc.time_signatures])
    chunks = [_chunk(b"MTrk", _encode_events(conductor) + _varint(end - max(
        (e[0] for e in conductor), default=0)) + b"\xff\x2f\x00")]

    for track in doc.tracks:
        ch = track.events[0].channel if track.events else (DRUM_CHANNEL if track.is_drum else 0)
        timed: list[tuple[int, int, bytes]] = [(0, 0, bytes([0xC0 | ch, track.program]))]
        for ev in track.events:
            # note-offs sort before note-ons at the same tick so re-struck pitches survive
            timed.append((ev.offset_ticks, 1, bytes([0x80 | ev.channel, ev.pitch, 0])))
            timed.append((ev.onset_ticks, 2, bytes([0x90 | ev.channel, ev.pitch, ev.velocity])))
        last = max(e[0] for e in timed)
        chunks.append(_chunk(b"MTrk", _encode_events(timed) + _varint(end - last) + b"\xff\x2f\x00"))

    header = _chunk(b"MThd", struct.pack(">HHH", 1, len(chunks), doc.ticks_per_quarter))
    return header + b"".join(chunks)


def read_midi_file(path) -> MidiDocument:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


def write_midi_file(doc: MidiDocument, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_midi(doc))
