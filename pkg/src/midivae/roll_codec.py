"""Pitch / velocity / instrument roll representation.

A song becomes a sequence of one-bar :class:`BarSample` grids of shape
``(n_steps, n_tracks)`` plus one global program per track. Velocity cells
encode three states: an onset (> 0.5, loudness mapped from MIDI velocity),
a held continuation (:data:`HOLD_VALUE`) and silence (0.0).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from midivae.midi_io import MidiDocument, NoteEvent, Track

HOLD_VALUE = 0.25
SILENT_VALUE = 0.0
ONSET_THRESHOLD = 0.5
# onset velocity for a decoded note whose first step was not flagged as an onset
IMPLIED_ONSET_VELOCITY = 64


class NoPlayableTracks(ValueError):
    pass


@dataclass(frozen=True)
class RollConfig:
    n_pitches: int = 60
    pitch_lo: int = 24
    n_steps: int = 16
    n_tracks: int = 4
    n_instruments: int = 128

    def __post_init__(self) -> None:
        if min(self.n_pitches, self.n_steps, self.n_tracks, self.n_instruments) < 1:
            raise ValueError("all RollConfig counts must be positive")
        if self.pitch_lo < 0 or self.pitch_hi > 128:
            raise ValueError(f"pitch range [{self.pitch_lo}, {self.pitch_hi}) outside MIDI")

    @property
    def pitch_hi(self) -> int:
        return self.pitch_lo + self.n_pitches

    @property
    def silence(self) -> int:
        return self.n_pitches

    @property
    def vocab(self) -> int:
        return self.n_pitches + 1

    @property
    def n_frames(self) -> int:
        return self.n_steps * self.n_tracks


@dataclass(frozen=True)
class StyleLabel:
    index: int
    name: str


@dataclass
class BarSample:
    pitch: np.ndarray  # (n_steps, n_tracks) int, silence token = n_pitches
    velocity: np.ndarray  # (n_steps, n_tracks) float32 in [0, 1]
    bar_index: int = 0
    song_id: str = ""


@dataclass
class SongRecord:
    bars: list[BarSample]
    instruments: tuple[int, ...]
    style: StyleLabel
    source_path: str = ""
    # per-bar program override, only set by medleys whose bridge changes instrumentation
    bar_instruments: list[tuple[int, ...]] | None = None

    @property
    def song_id(self) -> str:
        return self.bars[0].song_id if self.bars else self.source_path

    def pitch_grid(self) -> np.ndarray:
        """All bars stacked: ``(n_bars, n_steps, n_tracks)``."""
        return np.stack([b.pitch for b in self.bars])

    def velocity_grid(self) -> np.ndarray:
        return np.stack([b.velocity for b in self.bars])


@dataclass(frozen=True)
class QuantizedNote:
    start: int
    length: int
    pitch: int
    velocity: int


# --------------------------------------------------------------------------- velocity


def velocity_to_unit(v: int) -> float:
    if not 0 <= v <= 127:
        raise ValueError(f"MIDI velocity {v} outside 0..127")
    return 0.5 + 0.5 * (v + 1) / 128


def unit_to_velocity(u: float) -> int | None:
    """Inverse of :func:`velocity_to_unit`; ``None`` means "no onset"."""
    if not u > ONSET_THRESHOLD:
        return None
    return int(min(127, max(0, round(u * 256 - 129))))


# --------------------------------------------------------------------------- voices


def _voice_at_depth(events: Sequence[NoteEvent], depth: int) -> list[NoteEvent]:
    """The ``depth``-th highest sounding note at every instant, merged into notes."""
    bounds = sorted({e.onset_ticks for e in events} | {e.offset_ticks for e in events})
    pending = sorted(events, key=lambda e: e.onset_ticks)
    nxt = 0
    active: list[NoteEvent] = []
    out: list[NoteEvent] = []
    current: tuple[int, NoteEvent] | None = None  # (segment start, source note)
    for t0 in bounds[:-1]:
        while nxt < len(pending) and pending[nxt].onset_ticks <= t0:
            active.append(pending[nxt])
            nxt += 1
        active = [e for e in active if e.offset_ticks > t0]
        sounding = sorted(active, key=lambda e: (-e.pitch, e.onset_ticks))
        pick = sounding[depth] if depth < len(sounding) else None
        if current is not None and pick is current[1]:
            continue
        if current is not None:
            start, note = current
            out.append(NoteEvent(start, t0 - start, note.pitch, note.velocity, note.channel))
        current = (t0, pick) if pick is not None else None
    if current is not None:
        start, note = current
        out.append(NoteEvent(start, bounds[-1] - start, note.pitch, note.velocity, note.channel))
    return out


def select_voices(doc: MidiDocument, cfg: RollConfig) -> list[tuple[int, list[NoteEvent]]]:
    """Pick ``cfg.n_tracks`` monophonic voices, busiest tracks first.

    The highest voice of every ranked track is taken first; if that yields
    fewer than ``n_tracks`` voices, second-highest voices follow, then third
    and so on. Missing voices are padded as empty (program 0).
    """
    playable = [t for t in doc.tracks if not t.is_drum and t.events]
    if not playable:
        raise NoPlayableTracks("no non-drum track with notes")
    ranked = sorted(playable, key=lambda t: -len(t.events))[: cfg.n_tracks]
    voices: list[tuple[int, list[NoteEvent]]] = []
    depth = 0
    while len(voices) < cfg.n_tracks:
        found = False
        for track in ranked:
            voice = _voice_at_depth(track.events, depth)
            if voice:
                found = True
                voices.append((track.program, voice))
                if len(voices) == cfg.n_tracks:
                    break
        if not found:
            break
        depth += 1
    while len(voices) < cfg.n_tracks:
        voices.append((0, []))
    return voices


# --------------------------------------------------------------------------- quantization


def _nearest_step(tick: int, tpq: int) -> int:
    # round(tick * 4 / tpq) with halves rounding up, in exact integer arithmetic
    return (8 * tick + tpq) // (2 * tpq)


def quantize(events: Sequence[NoteEvent], doc: MidiDocument) -> list[QuantizedNote]:
    """Snap a monophonic note list to the 16th-note grid.

    Notes that collapse to zero length keep one step; a later onset on the
    same step replaces an earlier note, and overlaps left by rounding are
    resolved by cutting the earlier note short.
    """
    tpq = doc.ticks_per_quarter
    notes: list[QuantizedNote] = []
    for ev in sorted(events, key=lambda e: e.onset_ticks):
        start = _nearest_step(ev.onset_ticks, tpq)
        end = max(start + 1, _nearest_step(ev.offset_ticks, tpq))
        if notes and notes[-1].start >= start:
            notes.pop()
        if notes and notes[-1].start + notes[-1].length > start:
            prev = notes.pop()
            notes.append(QuantizedNote(prev.start, start - prev.start, prev.pitch, prev.velocity))
        notes.append(QuantizedNote(start, end - start, ev.pitch, ev.velocity))
    return notes


def fold_pitch(pitch: int, cfg: RollConfig) -> int | None:
    """Octave-transpose into ``[pitch_lo, pitch_hi)``; ``None`` if no octave fits."""
    while pitch < cfg.pitch_lo:
        pitch += 12
    while pitch >= cfg.pitch_hi:
        pitch -= 12
    return pitch if cfg.pitch_lo <= pitch < cfg.pitch_hi else None


# --------------------------------------------------------------------------- songs


def encode_song(
    doc: MidiDocument, style: StyleLabel, cfg: RollConfig = RollConfig(), song_id: str = ""
) -> SongRecord:
    voices = select_voices(doc, cfg)
    quantized = [quantize(notes, doc) for _, notes in voices]
    total = max((n.start + n.length for q in quantized for n in q), default=0)
    n_bars = max(1, -(-total // cfg.n_steps))
    pitch = np.full((n_bars * cfg.n_steps, cfg.n_tracks), cfg.silence, dtype=np.int64)
    vel = np.zeros((n_bars * cfg.n_steps, cfg.n_tracks), dtype=np.float32)
    for t, notes in enumerate(quantized):
        for n in notes:
            p = fold_pitch(n.pitch, cfg)
            if p is None:
                continue
            pitch[n.start : n.start + n.length, t] = p - cfg.pitch_lo
            vel[n.start, t] = velocity_to_unit(n.velocity)
            vel[n.start + 1 : n.start + n.length, t] = HOLD_VALUE
    bars = [
        BarSample(
            pitch[b * cfg.n_steps : (b + 1) * cfg.n_steps].copy(),
            vel[b * cfg.n_steps : (b + 1) * cfg.n_steps].copy(),
            bar_index=b,
            song_id=song_id,
        )
        for b in range(n_bars)
    ]
    return SongRecord(bars, tuple(p for p, _ in voices), style, source_path=song_id)


def _track_notes(pitch: np.ndarray, vel: np.ndarray, cfg: RollConfig) -> list[QuantizedNote]:
    """Turn one track's step columns back into notes (step units)."""
    notes: list[QuantizedNote] = []
    start = None
    cur_pitch = cur_vel = 0
    for s, (p, v) in enumerate(zip(pitch.tolist(), vel.tolist())):
        onset = unit_to_velocity(v)
        if start is not None and (p != cur_pitch or onset is not None):
            notes.append(QuantizedNote(start, s - start, cur_pitch, cur_vel))
            start = None
        if p != cfg.silence and start is None:
            start, cur_pitch = s, p
            cur_vel = onset if onset is not None else IMPLIED_ONSET_VELOCITY
    if start is not None:
        notes.append(QuantizedNote(start, len(pitch) - start, cur_pitch, cur_vel))
    return notes


def decode_song(
    rec: SongRecord, cfg: RollConfig = RollConfig(), tempo_bpm: float = 120.0, tpq: int = 480
) -> MidiDocument:
    """Render a SongRecord as a MIDI document, one channel per track.

    With ``rec.bar_instruments`` set, a voice whose program changes between
    bars is split into one MIDI track per program.
    """
    if not rec.bars:
        return MidiDocument(ticks_per_quarter=tpq, tempo_bpm=tempo_bpm)
    step_ticks = tpq // 4
    pitch = rec.pitch_grid().reshape(-1, cfg.n_tracks)
    vel = rec.velocity_grid().reshape(-1, cfg.n_tracks)
    per_bar = rec.bar_instruments or [rec.instruments] * len(rec.bars)
    tracks: list[Track] = []
    for t in range(cfg.n_tracks):
        channel = t if t < 9 else t + 1
        by_program: dict[int, list[NoteEvent]] = {}
        for n in _track_notes(pitch[:, t], vel[:, t], cfg):
            program = per_bar[n.start // cfg.n_steps][t]
            by_program.setdefault(program, []).append(
                NoteEvent(
                    n.start * step_ticks,
                    n.length * step_ticks,
                    n.pitch + cfg.pitch_lo,
                    max(1, n.velocity),
                    channel,
                )
            )
        if not by_program:
            tracks.append(Track(rec.instruments[t], False, []))
        for program, events in by_program.items():
            tracks.append(Track(program, False, events))
    return MidiDocument(ticks_per_quarter=tpq, tempo_bpm=tempo_bpm, tracks=tracks)


def validate_song(rec: SongRecord, cfg: RollConfig = RollConfig()) -> None:
    """Check the invariants that make ``encode_song(decode_song(rec)) == rec``.

    Beyond the per-cell rules this demands the canonical track order that
    voice selection produces (busiest track first, silent tracks last with
    program 0), onset velocities of at least MIDI level 1 (a level-0 note-on
    is a note-off) and a sounding last bar, since MIDI has no way to mark
    trailing silence.
    """
    if len(rec.instruments) != cfg.n_tracks:
        raise ValueError("instrument vector length != n_tracks")
    if any(not 0 <= p < cfg.n_instruments for p in rec.instruments):
        raise ValueError("program outside instrument vocabulary")
    for i, bar in enumerate(rec.bars):
        if bar.bar_index != i:
            raise ValueError(f"bar {i} has bar_index {bar.bar_index}")
        if bar.pitch.shape != (cfg.n_steps, cfg.n_tracks):
            raise ValueError(f"bar {i} has shape {bar.pitch.shape}")
    pitch = rec.pitch_grid().reshape(-1, cfg.n_tracks)
    vel = rec.velocity_grid().reshape(-1, cfg.n_tracks)
    if pitch.min() < 0 or pitch.max() > cfg.silence:
        raise ValueError("pitch index outside vocabulary")
    counts = []
    for t in range(cfg.n_tracks):
        prev = cfg.silence
        n_onsets = 0
        for s in range(len(pitch)):
            p, v = pitch[s, t], float(vel[s, t])
            if p == cfg.silence:
                if v != SILENT_VALUE:
                    raise ValueError(f"step {s} track {t}: silent cell with velocity {v}")
            elif v > ONSET_THRESHOLD:
                level = unit_to_velocity(v)
                if velocity_to_unit(level) != v:
                    raise ValueError(f"step {s} track {t}: velocity {v} off the 128-level grid")
                if level == 0:
                    raise ValueError(f"step {s} track {t}: velocity level 0 cannot be written as a note-on")
                n_onsets += 1
            elif v != HOLD_VALUE or prev != p:
                raise ValueError(f"step {s} track {t}: hold without a sounding note")
            prev = p
        counts.append(n_onsets)
    if rec.bars and np.all(pitch[-cfg.n_steps :] == cfg.silence):
        raise ValueError("last bar is silent")
    if counts != sorted(counts, reverse=True):
        raise ValueError(f"tracks not ordered by note count: {counts}")
    for t, c in enumerate(counts):
        if c == 0 and rec.instruments[t] != 0:
            raise ValueError(f"silent track {t} must carry program 0")


# --------------------------------------------------------------------------- frames


def unroll(bar: BarSample, cfg: RollConfig = RollConfig()):
    """Flatten a bar to ``n_steps * n_tracks`` frames, step-major.

    Returns ``(pitch_onehot, velocity, track_index)`` arrays of shapes
    ``(F, vocab)``, ``(F,)`` and ``(F,)``.
    """
    flat_pitch = np.asarray(bar.pitch).reshape(-1)
    onehot = np.zeros((flat_pitch.size, cfg.vocab), dtype=np.float32)
    onehot[np.arange(flat_pitch.size), flat_pitch] = 1.0
    track = np.tile(np.arange(cfg.n_tracks), cfg.n_steps)
    return onehot, np.asarray(bar.velocity, dtype=np.float32).reshape(-1), track


def reroll(onehot: np.ndarray, velocity: np.ndarray, cfg: RollConfig = RollConfig(), **meta) -> BarSample:
    pitch = np.argmax(onehot, axis=-1).reshape(cfg.n_steps, cfg.n_tracks)
    return BarSample(pitch, np.asarray(velocity, np.float32).reshape(cfg.n_steps, cfg.n_tracks), **meta)


def split_dataset(
    songs: Sequence[SongRecord], ratio: float = 0.9, seed: int = 0, stratify: bool = False
) -> tuple[list[SongRecord], list[SongRecord]]:
    """Song-level train/test split, deterministic under ``seed``.

    With ``stratify`` each style is split separately so both partitions see
    every style.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    groups = [list(songs)]
    if stratify:
        by_style: dict[int, list[SongRecord]] = {}
        for s in songs:
            by_style.setdefault(s.style.index, []).append(s)
        groups = [by_style[k] for k in sorted(by_style)]
    train: list[SongRecord] = []
    test: list[SongRecord] = []
    for group in groups:
        if len(group) < 2:
            raise ValueError(f"need at least 2 songs per partition group, got {len(group)}")
        order = rng.permutation(len(group))
        n_train = min(len(group) - 1, max(1, int(round(ratio * len(group)))))
        train += [group[i] for i in order[:n_train]]
        test += [group[i] for i in order[n_train:]]
    return train, test


def style_counts(songs: Sequence[SongRecord]) -> Counter:
    return Counter(s.style.name for s in songs)
