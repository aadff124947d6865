import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY, random_song
from midivae import style_ops as so
from midivae.midi_io import parse_midi, write_midi
from midivae.roll_codec import decode_song
from midivae.vae_model import HyperParams, MidiVae, classify_style

finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@pytest.fixture(scope="module")
def model():
    return MidiVae(HyperParams(latent_dim=6, gru_state=5, fc_size=7, k=2, seed=2), TINY)


@pytest.fixture(scope="module")
def songs():
    rng = np.random.default_rng(4)
    return [random_song(rng, TINY, max_bars=5, style=i % 2) for i in range(6)]


def _same(a, b):
    return np.array_equal(a.pitch_grid(), b.pitch_grid()) and np.array_equal(a.velocity_grid(), b.velocity_grid()) and a.instruments == b.instruments


@settings(max_examples=100)
@given(arrays(np.float32, 6, elements=finite), st.sampled_from([(0, 1), (1, 0), (0, 3), (2, 5)]))
def test_swap_is_an_exact_involution(z, ij):
    i, j = ij
    once = so.swap_style(z, i, j)
    assert once[i] == z[j] and once[j] == z[i]
    others = [d for d in range(6) if d not in ij]
    assert np.array_equal(once[others], z[others])
    assert np.array_equal(so.swap_style(once, i, j), z)


def test_swap_fixed_point_and_errors():
    z = np.array([0.5, 0.5, 1.0], np.float32)
    assert np.array_equal(so.swap_style(z, 0, 1), z)
    with pytest.raises(ValueError):
        so.swap_style(z, 0, 0)
    with pytest.raises(IndexError):
        so.swap_style(z, 0, 2, k=2)
    with pytest.raises(ValueError):
        so.TransferSpec(1, 1).check(2)


def test_swap_leaves_input_untouched_and_works_on_batches():
    z = np.arange(12, dtype=np.float32).reshape(2, 6)
    out = so.swap_style(z, 0, 1)
    assert z[0, 0] == 0 and out[0, 0] == 1 and out[1, 1] == 6


@settings(max_examples=100)
@given(arrays(np.float32, 6, elements=finite), arrays(np.float32, 6, elements=finite))
def test_lerp_endpoints_are_exact(a, b):
    assert np.array_equal(so.lerp(a, b, 0.0), a)
    assert np.array_equal(so.lerp(a, b, 1.0), b)
    assert np.array_equal(so.lerp(a, a, 0.37), a)


def test_interpolate_path():
    a, b = np.zeros(3), np.ones(3)
    path = so.interpolate(a, b, 5)
    assert len(path) == 5 and np.array_equal(path[0], a) and np.array_equal(path[-1], b)
    np.testing.assert_allclose(path[2], 0.5)
    with pytest.raises(ValueError):
        so.interpolate(a, b, 1)


def test_transfer_twice_equals_autoencode(model, songs):
    for song in songs:
        there = so.TransferSpec(song.style.index, 1 - song.style.index)
        z = so.song_latents(model, song)
        twice = so.decode_song_latents(model, so.swap_style(so.swap_style(z, 0, 1), 0, 1), song.style)
        assert _same(twice, so.autoencode(model, song))
        moved = so.transfer_song(model, song, there, ["a", "b"])
        assert moved.style.name == "ab"[there.target_style]
        assert len(moved.bars) == len(song.bars)


def test_transfer_swaps_the_style_head_prediction(model, songs):
    z = so.song_latents(model, songs[0])
    p, q = classify_style(z, 2), classify_style(so.swap_style(z, 0, 1), 2)
    np.testing.assert_allclose(p[:, ::-1], q)


def test_interpolation_endpoints_reproduce_reconstructions(model, songs):
    za = so.song_latents(model, songs[0])[0]
    zb = so.song_latents(model, songs[1])[-1]
    path = np.stack(so.interpolate(za, zb, 4))
    bars = so.bars_from_output(model, so.decode_latents(model, path))
    rec_a = so.autoencode(model, songs[0]).bars[0]
    rec_b = so.autoencode(model, songs[1]).bars[-1]
    assert np.array_equal(bars[0].pitch, rec_a.pitch) and np.array_equal(bars[0].velocity, rec_a.velocity)
    assert np.array_equal(bars[-1].pitch, rec_b.pitch) and np.array_equal(bars[-1].velocity, rec_b.velocity)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_mixture_of_a_song_with_itself_is_its_autoencoding(model, songs, alpha):
    a = songs[2]
    assert _same(so.mixture(model, a, a, alpha), so.autoencode(model, a))


def test_mixture_endpoints_and_length(model, songs):
    a, b = songs[0], songs[1]
    n = min(len(a.bars), len(b.bars))
    zero = so.mixture(model, a, b, 0.0)
    ref = so.decode_song_latents(model, so.song_latents(model, a)[:n], a.style)
    assert _same(zero, ref)
    assert len(so.mixture(model, a, b, 0.3).bars) == n
    with pytest.raises(ValueError):
        so.mixture(model, a, b, 1.5)


@pytest.mark.parametrize("bridge", [1, 2, 3])
def test_medley_structure(model, songs, bridge):
    a, b = songs[0], songs[1]
    m = so.medley(model, a, b, bridge)
    assert len(m.bars) == len(a.bars) + bridge + len(b.bars)
    assert [x.bar_index for x in m.bars] == list(range(len(m.bars)))
    assert np.array_equal(m.bars[0].pitch, a.bars[0].pitch)
    assert np.array_equal(m.bars[-1].pitch, b.bars[-1].pitch)
    assert m.bar_instruments[0] == a.instruments and m.bar_instruments[-1] == b.instruments
    with pytest.raises(ValueError):
        so.medley(model, a, b, 0)


def test_decoded_songs_can_be_written_as_midi(model, songs):
    for s in songs:
        out = so.autoencode(model, s)
        assert len(out.bars) == len(s.bars)
        assert out.pitch_grid().shape == s.pitch_grid().shape
        parse_midi(write_midi(decode_song(out, TINY)))


def test_empirical_stats_and_prior(model, songs):
    stats = so.empirical_latent_stats(model, songs)
    z = np.concatenate(so.encode_songs(model, songs))
    assert stats.sample_count == len(z)
    np.testing.assert_allclose(stats.mu_hat, z.mean(0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(stats.sigma_hat, z.std(0), rtol=1e-4)
    assert stats.style_means.shape == (2, 2)
    draws = np.stack([so.sample_prior(stats, np.random.default_rng(i)) for i in range(4000)])
    np.testing.assert_allclose(draws.std(0), stats.sigma_hat, rtol=0.08)
    styled = so.sample_prior(stats, np.random.default_rng(0), style=1)
    assert np.array_equal(styled[:2], stats.style_means[1])
    with pytest.raises(ValueError):
        so.sample_prior(stats, np.random.default_rng(0), style=2)


def test_degenerate_stats(model, songs):
    one_bar = songs[0].__class__(songs[0].bars[:1], songs[0].instruments, songs[0].style)
    with pytest.raises(so.DegenerateStats):
        so.empirical_latent_stats(model, [one_bar])
