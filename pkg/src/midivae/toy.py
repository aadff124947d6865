"""Synthetic two-style MIDI corpus for desk-scale experiments.

Both styles draw their musical content from the same distribution: a
repeating four-chord progression, a bass line, a half-note pad, a
quarter-note arpeggio and a melody. Each bar draws its melody rhythm,
melodic contour and arpeggio pattern from small fixed sets, so a few
dozen training songs cover the bar vocabulary. Style decides only the
pitch register, the program of each track and the velocity band, so the
three style cues are disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from midivae.midi_io import MidiDocument, NoteEvent, Track, write_midi

MAJOR = (0, 2, 4, 5, 7, 9, 11)
CHORD_ROOTS = (0, 3, 4, 5)  # I IV V vi as scale degrees
# melody rhythms in 16th steps; negative lengths are rests
RHYTHMS = (
    (2, 2, 2, 2, 4, 4),
    (4, 2, 2, 4, 2, 2),
    (2, 2, 4, 2, 2, -4),
)
ARPEGGIOS = ((0, 2, 4, 2), (0, 4, 2, 4), (4, 2, 0, 2))
CHORD_TONES = (0, 2, 4, 7)
# melodic contours as indices into CHORD_TONES, truncated to the rhythm's note count
CONTOURS = ((0, 1, 2, 1, 0, 2), (2, 1, 0, 1, 2, 0), (0, 0, 1, 1, 2, 2), (0, 2, 1, 3, 2, 0))


@dataclass
class ToyCorpusSpec:
    songs_per_style: int = 40
    bars_per_song: int = 16
    style_names: tuple[str, str] = ("toy_a", "toy_b")
    registers: tuple[tuple[int, int], tuple[int, int]] = ((24, 48), (60, 84))
    # per-track programs, busiest track first; GM families are disjoint across styles
    programs: tuple[tuple[int, ...], tuple[int, ...]] = ((0, 16, 32, 48), (24, 56, 64, 72))
    velocity_bands: tuple[tuple[int, int], tuple[int, int]] = ((40, 70), (90, 120))
    seed: int = 0
    ticks_per_quarter: int = 480
    tempo_bpm: float = 120.0

    def __post_init__(self) -> None:
        (a_lo, a_hi), (b_lo, b_hi) = self.registers
        if a_hi > b_lo and b_hi > a_lo:
            raise ValueError("style registers must be disjoint")
        if min(a_hi - a_lo, b_hi - b_lo) < 24:
            raise ValueError("each register must span at least two octaves")
        if {p // 8 for p in self.programs[0]} & {p // 8 for p in self.programs[1]}:
            raise ValueError("program families must be disjoint across styles")
        (va, vb), (wa, wb) = self.velocity_bands
        if vb >= wa and wb >= va:
            raise ValueError("velocity bands must be disjoint")

    def family_pairs(self) -> dict[int, int]:
        """GM family of each style-A track mapped to the family of the same track in style B."""
        return {a // 8: b // 8 for a, b in zip(*self.programs)}


def _degree_pitch(lo: int, key: int, degree: int) -> int:
    return lo + key + MAJOR[degree % 7] + 12 * (degree // 7)


def make_song(spec: ToyCorpusSpec, style: int, rng: np.random.Generator) -> MidiDocument:
    lo, _ = spec.registers[style]
    vlo, vhi = spec.velocity_bands[style]
    step = spec.ticks_per_quarter // 4
    key = int(rng.integers(0, 3))
    progression = [CHORD_ROOTS[i] for i in rng.permutation(len(CHORD_ROOTS))]

    tracks: list[list[NoteEvent]] = [[] for _ in range(4)]

    def note(track: int, start: int, length: int, degree: int) -> None:
        vel = int(rng.integers(vlo, vhi + 1))
        tracks[track].append(
            NoteEvent(start * step, length * step, _degree_pitch(lo, key, degree), vel, track)
        )

    for bar in range(spec.bars_per_song):
        root = progression[bar % len(progression)]
        rhythm = RHYTHMS[int(rng.integers(len(RHYTHMS)))]
        contour = CONTOURS[int(rng.integers(len(CONTOURS)))]
        arpeggio = ARPEGGIOS[int(rng.integers(len(ARPEGGIOS)))]
        t0 = bar * 16
        pos = t0
        for length, tone in zip(rhythm, contour):
            if length > 0:
                note(0, pos, length, root + CHORD_TONES[tone])
            pos += abs(length)
        for i, offset in enumerate(arpeggio):
            note(1, t0 + 4 * i, 4, root + offset)
        note(2, t0, 8, root + 2)
        note(2, t0 + 8, 8, root + 4)
        note(3, t0, 16, root)

    return MidiDocument(
        ticks_per_quarter=spec.ticks_per_quarter,
        tempo_bpm=spec.tempo_bpm,
        tracks=[Track(spec.programs[style][t], False, tracks[t]) for t in range(4)],
        time_signatures=[(4, 4, 0)],
    )


def make_toy_corpus(spec: ToyCorpusSpec, root: str | Path) -> list[Path]:
    """Write ``<root>/<style_name>/song_NNN.mid`` for both styles; returns the paths."""
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    paths = []
    for style, name in enumerate(spec.style_names):
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(spec.songs_per_style):
            path = folder / f"song_{i:03d}.mid"
            path.write_bytes(write_midi(make_song(spec, style, rng)))
            paths.append(path)
    return paths
