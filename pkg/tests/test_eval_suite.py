import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from midivae import eval_suite as ev
from midivae.checkpoint import LatentStats
from midivae.midi_io import parse_midi, write_midi
from midivae.roll_codec import RollConfig, StyleLabel, encode_song
from midivae.toy import ToyCorpusSpec, make_song
from midivae.vae_model import HyperParams, MidiVae

CFG = RollConfig()
FAST = ev.ClassifierParams(state=8, layers=1, epochs=2, batch_size=32)
TRAINED = ev.ClassifierParams(state=16, layers=1, epochs=25, batch_size=8, lr=3e-3)


@pytest.fixture(scope="module")
def toy_songs():
    spec = ToyCorpusSpec(bars_per_song=4)
    rng = np.random.default_rng(0)
    out = []
    for i in range(12):
        doc = make_song(spec, i % 2, rng)
        out.append(encode_song(parse_midi(write_midi(doc)), StyleLabel(i % 2, spec.style_names[i % 2]), song_id=f"s{i}"))
    return out


@pytest.fixture(scope="module")
def clfs(toy_songs):
    return ev.train_classifiers(toy_songs, 2, TRAINED)


@pytest.fixture(scope="module")
def model():
    return MidiVae(HyperParams(latent_dim=8, gru_state=6, fc_size=8, k=2, seed=1))


def test_vote_is_majority_with_probability_tie_break():
    a = np.array([[0.9, 0.1], [0.2, 0.8]])
    b = np.array([[0.6, 0.4], [0.4, 0.6]])
    c = np.array([[0.1, 0.9], [0.9, 0.1]])
    assert list(ev.ensemble_vote([a, b, c])) == [0, 1]
    # three classes, three different votes: highest mean probability wins
    x = np.array([[0.5, 0.3, 0.2]])
    y = np.array([[0.1, 0.6, 0.3]])
    z = np.array([[0.3, 0.3, 0.4]])
    assert ev.ensemble_vote([x, y, z])[0] == 1


@settings(max_examples=200)
@given(arrays(np.float64, (3, 5), elements=st.floats(0, 1)))
def test_two_class_vote_equals_the_majority_label(p0):
    probs = [np.stack([row, 1 - row], axis=1) for row in p0]
    labels = np.stack([p.argmax(-1) for p in probs])
    majority = (labels.sum(0) >= 2).astype(int)
    assert np.array_equal(ev.ensemble_vote(probs), majority)


def test_classifier_inputs_have_documented_widths(toy_songs):
    bars = ev.BarArrays.from_songs(toy_songs[:2])
    widths = {f: ev.StyleClassifier(f, 2, CFG, FAST).inputs(bars).shape for f in ev.FEATURES}
    assert widths["pitch"] == (64, 8, 65)
    assert widths["velocity"] == (64, 8, 7)
    assert widths["instrument"] == (4, 8, 128)


def test_classifier_gradients():
    rng = np.random.default_rng(0)
    cfg = RollConfig(n_pitches=4, pitch_lo=60, n_steps=3, n_tracks=2, n_instruments=5)
    clf = ev.StyleClassifier("pitch", 2, cfg, ev.ClassifierParams(state=3, layers=2))
    clf.store = clf.store.astype(np.float64)
    bars = ev.BarArrays(rng.integers(0, cfg.vocab, (4, 3, 2)), rng.uniform(0, 1, (4, 3, 2)), rng.integers(0, 5, (4, 2)))
    labels = np.array([0, 1, 1, 0])

    def f(p):
        clf.store.params = p
        return clf.loss_and_grads(bars, labels)

    from midivae.nn_core import grad_check

    assert grad_check(f, clf.store.params).max_rel_error < 1e-5


def test_classifiers_learn_the_toy_cues(toy_songs, clfs):
    acc = ev.classifier_accuracy(toy_songs, clfs)
    assert acc["instrument"] >= 0.99
    assert acc["pitch"] >= 0.9
    assert set(acc) == {"pitch", "velocity", "instrument", "ensemble"}


def test_classifiers_share_no_parameters_with_the_model(clfs, model):
    ids = {id(a) for a in model.store.params.values()}
    assert not any(id(a) in ids for c in clfs for a in c.store.params.values())


def test_ensemble_requires_all_three_in_order(clfs):
    with pytest.raises(ev.EvalError):
        ev._check_ensemble(clfs[::-1])
    with pytest.raises(ev.EvalError):
        ev.train_style_classifier("pitch", [s for s in [] if s])


def test_identity_transfer_gives_zero_diff(monkeypatch, model, clfs, toy_songs):
    monkeypatch.setattr(ev, "transfer_song", lambda m, song, spec, names=None: song)
    report = ev.before_after_report(model, clfs, {"test": toy_songs[:4]})
    assert len(report.rows) == 8
    assert all(r.diff == 0.0 for r in report.rows)
    assert report.get("test", "ensemble").before == report.get("test", "ensemble").after
    switch = ev.instrument_switch_matrix(model, toy_songs[:4])
    obs = switch.observed
    assert np.array_equal(switch.matrix[obs][:, obs], np.eye(obs.sum()))


def test_report_rows_and_switch_matrix_rows(model, clfs, toy_songs):
    report = ev.before_after_report(model, clfs, {"a": toy_songs[:2], "b": toy_songs[2:4]})
    for r in report.rows:
        assert r.diff == r.before - r.after
        assert 0 <= r.before <= 1 and 0 <= r.after <= 1
    assert report.to_csv_rows()[0] == ["split", "classifier", "measure", "before", "after", "diff"]
    assert len(report.to_table().splitlines()) == 17
    m = ev.instrument_switch_matrix(model, toy_songs).matrix
    assert m.shape == (16, 16)
    sums = m.sum(1)
    np.testing.assert_allclose(sums[sums > 0], 1.0, atol=1e-6)
    assert set(np.flatnonzero(sums)) == {0, 2, 4, 6, 3, 7, 8, 9}


def test_metric_names():
    names = ev.metric_names()
    assert len(names) == 27 == len(set(names))
    assert names[0] == "onsets" and names[-1] == "ensemble_style0_prob"


def test_bar_metrics_on_a_hand_built_bar():
    pitch = np.full((1, 16, 4), CFG.silence)
    vel = np.zeros((1, 16, 4))
    pitch[0, 0:4, 0] = 36  # MIDI 60 held for 4 steps
    vel[0, 0, 0], vel[0, 1:4, 0] = 1.0, 0.25
    pitch[0, 0, 1] = 12  # MIDI 36, one step
    vel[0, 0, 1] = 0.75
    m = dict(zip(ev.metric_names(), ev.bar_metrics(ev.BarArrays(pitch, vel, np.zeros((1, 4), int)), CFG)[0]))
    assert m["onsets"] == 2 and m["held_steps"] == 3
    assert m["pitch_max_all"] == 60 and m["pitch_min_all"] == 36 and m["pitch_range_all"] == 24
    assert m["pitch_mean_track0"] == 60 and m["pitch_mean_track2"] == 0
    assert m["velocity_max"] == 127 and m["velocity_min"] == 63


def test_pearson_guard():
    x = np.linspace(-1, 1, 7)
    assert ev.pearson(x, np.full(7, 3.0)) == 0.0
    assert ev.pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert ev.pearson(x, -x) == pytest.approx(-1.0)
    assert ev.pearson(x, 1e-6 * x, tol=1e-3) == 0.0
    assert ev.pearson(np.zeros(7), x) == 0.0


def test_sweep_table_covers_every_dimension_and_metric():
    model = MidiVae(HyperParams(gru_state=4, fc_size=8, k=2, seed=0))
    stats = LatentStats(np.zeros(256, np.float32), np.ones(256, np.float32), 10)
    z = np.random.default_rng(0).normal(size=(2, 256)).astype(np.float32)
    table = ev.latent_sweep(model, z, stats, points=3)
    assert table.correlation.shape == (256, 27)
    assert np.all(np.abs(table.correlation) <= 1 + 1e-9)
    assert np.all(table.correlation[:, -1] == 0)  # no classifiers: constant metric
    assert len(table.top_dims("onsets", 5)) == 5


def test_export_rows_columns_and_determinism(tmp_path, model, clfs, toy_songs):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    n = ev.export_latents(model, toy_songs[:3], p1, clfs)
    ev.export_latents(model, toy_songs[:3], p2, clfs)
    lines = p1.read_text().splitlines()
    assert n == len(lines) - 1 == sum(len(s.bars) for s in toy_songs[:3])
    assert all(len(l.split(",")) == 4 + 8 for l in lines)
    assert p1.read_bytes() == p2.read_bytes()
    with pytest.raises(ev.EvalError):
        ev.export_latents(model, toy_songs[:1], tmp_path / "missing" / "x.csv")
