import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, random_song
from midivae.midi_io import MidiDocument, NoteEvent, Track, parse_midi, write_midi
from midivae.roll_codec import (
    HOLD_VALUE,
    NoPlayableTracks,
    RollConfig,
    StyleLabel,
    decode_song,
    encode_song,
    fold_pitch,
    quantize,
    reroll,
    select_voices,
    split_dataset,
    unit_to_velocity,
    unroll,
    validate_song,
    velocity_to_unit,
)

CFG = RollConfig()
STYLE = StyleLabel(0, "a")


def _doc(*tracks, tpq=480):
    return MidiDocument(ticks_per_quarter=tpq, tracks=list(tracks))


def test_config_derived_sizes():
    assert (CFG.pitch_hi, CFG.silence, CFG.vocab, CFG.n_frames) == (84, 60, 61, 64)
    with pytest.raises(ValueError):
        RollConfig(n_steps=0)


@pytest.mark.parametrize("v, u", [(127, 1.0), (63, 0.75), (0, 0.50390625)])
def test_velocity_to_unit_examples(v, u):
    assert velocity_to_unit(v) == u


def test_velocity_map_is_exactly_invertible_on_all_levels():
    for v in range(128):
        u = velocity_to_unit(v)
        assert u > 0.5
        assert unit_to_velocity(u) == v


def test_unit_to_velocity_no_onset_and_clamp():
    assert unit_to_velocity(0.5) is None
    assert unit_to_velocity(HOLD_VALUE) is None
    assert unit_to_velocity(0.0) is None
    assert unit_to_velocity(1.7) == 127
    with pytest.raises(ValueError):
        velocity_to_unit(128)


def test_quantize_examples():
    doc = _doc(tpq=480)
    q = quantize([NoteEvent(0, 480, 60, 90)], doc)
    assert [(n.start, n.length) for n in q] == [(0, 4)]
    assert quantize([NoteEvent(70, 240, 60, 90)], doc)[0].start == 1  # 70 ticks rounds to step 1
    assert quantize([NoteEvent(60, 240, 60, 90)], doc)[0].start == 1  # exact half rounds up
    assert [(n.start, n.length) for n in quantize([NoteEvent(0, 10, 60, 90)], doc)] == [(0, 1)]


def test_quantize_resolves_collisions():
    doc = _doc(tpq=480)
    q = quantize([NoteEvent(0, 480, 60, 90), NoteEvent(10, 480, 62, 80)], doc)
    assert [(n.start, n.pitch) for n in q] == [(0, 62)]  # same step: later onset wins
    q = quantize([NoteEvent(0, 500, 60, 90), NoteEvent(480, 120, 62, 80)], doc)
    assert [(n.start, n.length, n.pitch) for n in q] == [(0, 4, 60), (4, 1, 62)]


def test_select_voices_orders_tracks_by_note_count_and_skips_drums():
    busy = Track(10, False, [NoteEvent(i * 120, 120, 60, 64, 0) for i in range(5)])
    quiet = Track(20, False, [NoteEvent(0, 120, 50, 64, 1)])
    drums = Track(0, True, [NoteEvent(i * 60, 60, 36, 64, 9) for i in range(20)])
    voices = select_voices(_doc(quiet, drums, busy), CFG)
    assert [p for p, _ in voices] == [10, 20, 0, 0]
    assert [len(v) for _, v in voices] == [5, 1, 0, 0]


def test_select_voices_splits_chords_top_then_bottom():
    chords = Track(3, False, [NoteEvent(0, 480, 60, 64), NoteEvent(0, 480, 64, 64), NoteEvent(480, 480, 62, 64), NoteEvent(480, 480, 67, 64)])
    voices = select_voices(_doc(chords), CFG)
    assert [[n.pitch for n in v] for _, v in voices] == [[64, 67], [60, 62], [], []]
    assert [p for p, _ in voices] == [3, 3, 0, 0]


def _brute_force_voice(events, depth, horizon):
    """Per-tick oracle: the depth-th highest sounding pitch at each tick."""
    out = []
    for t in range(horizon):
        sounding = sorted({e.pitch for e in events if e.onset_ticks <= t < e.offset_ticks}, reverse=True)
        out.append(sounding[depth] if depth < len(sounding) else None)
    return out


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.integers(1, 20), st.integers(30, 90)), min_size=1, max_size=10))
def test_voice_extraction_matches_brute_force(raw):
    events = [NoteEvent(on, d, p, 64) for on, d, p in raw]
    # distinct pitches at equal instants keep the oracle unambiguous
    if len({(e.pitch, t) for e in events for t in range(e.onset_ticks, e.offset_ticks)}) != sum(e.duration_ticks for e in events):
        return
    voices = select_voices(_doc(Track(0, False, events)), RollConfig(n_tracks=3))
    horizon = max(e.offset_ticks for e in events)
    for depth, (_, voice) in enumerate(voices):
        got = [None] * horizon
        for n in voice:
            for t in range(n.onset_ticks, n.offset_ticks):
                assert got[t] is None
                got[t] = n.pitch
        assert got == _brute_force_voice(events, depth, horizon)


def test_no_playable_tracks():
    with pytest.raises(NoPlayableTracks):
        select_voices(_doc(Track(0, True, [NoteEvent(0, 10, 36, 64, 9)])), CFG)
    with pytest.raises(NoPlayableTracks):
        select_voices(_doc(Track(0, False, [])), CFG)


def test_fold_pitch_moves_by_octaves():
    assert fold_pitch(12, CFG) == 24
    assert fold_pitch(1, CFG) == 25
    assert fold_pitch(100, CFG) == 76
    assert fold_pitch(24, CFG) == 24 and fold_pitch(83, CFG) == 83
    assert fold_pitch(67, RollConfig(n_pitches=6, pitch_lo=60)) is None


def test_encode_song_layout():
    doc = _doc(Track(42, False, [NoteEvent(0, 480, 60, 127), NoteEvent(480 * 4, 240, 61, 63)]))
    rec = encode_song(doc, STYLE, CFG, song_id="x")
    assert len(rec.bars) == 2
    assert rec.instruments == (42, 0, 0, 0)
    p, v = rec.bars[0].pitch[:, 0], rec.bars[0].velocity[:, 0]
    assert list(p[:5]) == [36, 36, 36, 36, 60]
    assert list(v[:5]) == [1.0, HOLD_VALUE, HOLD_VALUE, HOLD_VALUE, 0.0]
    assert rec.bars[1].pitch[0, 0] == 37 and rec.bars[1].velocity[0, 0] == 0.75
    assert (rec.bars[0].pitch[:, 1:] == CFG.silence).all()
    validate_song(rec)


def test_decode_splits_per_bar_programs_into_tracks():
    rec = random_song(np.random.default_rng(3), max_bars=1)
    rec.bars.append(rec.bars[0])
    rec.bars[1] = type(rec.bars[0])(rec.bars[0].pitch, rec.bars[0].velocity, 1, "rand")
    rec.bar_instruments = [rec.instruments, (99,) + rec.instruments[1:]]
    doc = decode_song(rec)
    progs = [t.program for t in doc.tracks]
    assert 99 in progs and rec.instruments[0] in progs


def test_codec_round_trip_on_random_songs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        song = random_song(rng)
        back = encode_song(parse_midi(write_midi(decode_song(song))), song.style, song_id="rand")
        assert np.array_equal(back.pitch_grid(), song.pitch_grid())
        assert np.array_equal(back.velocity_grid(), song.velocity_grid())
        assert back.instruments == song.instruments


def test_codec_round_trip_at_another_resolution():
    rng = np.random.default_rng(8)
    for _ in range(30):
        song = random_song(rng, TINY)
        back = encode_song(parse_midi(write_midi(decode_song(song, TINY, tpq=96))), song.style, TINY)
        assert np.array_equal(back.pitch_grid(), song.pitch_grid())
        assert np.array_equal(back.velocity_grid(), song.velocity_grid())


def test_validate_song_rejects_broken_records():
    song = random_song(np.random.default_rng(9))
    s, t = np.argwhere(song.bars[0].velocity > 0.5)[0]
    song.bars[0].velocity[s, t] = 0.6001
    with pytest.raises(ValueError, match="grid"):
        validate_song(song)
    song.bars[0].velocity[s, t] = velocity_to_unit(0)
    with pytest.raises(ValueError, match="level 0"):
        validate_song(song)
    silent = random_song(np.random.default_rng(10))
    silent.bars[-1].pitch[...] = CFG.silence
    silent.bars[-1].velocity[...] = 0
    with pytest.raises(ValueError):
        validate_song(silent)


def test_unroll_is_step_major_and_reroll_inverts_it():
    song = random_song(np.random.default_rng(11))
    bar = song.bars[0]
    onehot, vel, track = unroll(bar)
    assert onehot.shape == (64, 61) and vel.shape == (64,)
    assert (onehot.sum(axis=1) == 1).all()
    assert list(track[:8]) == [0, 1, 2, 3, 0, 1, 2, 3]
    assert onehot[5].argmax() == bar.pitch[1, 1]
    back = reroll(onehot, vel, bar_index=bar.bar_index)
    assert np.array_equal(back.pitch, bar.pitch) and np.array_equal(back.velocity, bar.velocity)


def test_split_is_deterministic_and_stratified():
    songs = [random_song(np.random.default_rng(i), style=i % 2, max_bars=1) for i in range(20)]
    a = split_dataset(songs, 0.9, seed=3, stratify=True)
    b = split_dataset(songs, 0.9, seed=3, stratify=True)
    assert [id(s) for s in a[0]] == [id(s) for s in b[0]]
    assert {s.style.index for s in a[1]} == {0, 1}
    assert len(a[0]) + len(a[1]) == 20
    with pytest.raises(ValueError):
        split_dataset(songs, 1.0)
