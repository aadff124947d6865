import csv
import json

import pytest

from midivae import cli
from midivae import style_ops as so
from midivae.midi_io import read_midi_file
from midivae.roll_codec import StyleLabel, encode_song

TINY_RUN = """
dataset_root = {root}
output_dir = {out}
styles = toy_a, toy_b
seed = 3
test_ratio = 0.25
toy_songs_per_style = 4
toy_bars_per_song = 3
latent_dim = 8
gru_state = 4
fc_size = 8
batch_size = 4
epochs = 2
classifier_state = 4
classifier_epochs = 1
sweep_bars = 2
sweep_points = 3
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    conf = base / "run.conf"
    conf.write_text(TINY_RUN.format(root=base / "corpus", out=base / "out"))
    c = ["--config", str(conf)]
    for verb in (["make-toy"], ["prepare"], ["train"], ["eval"], ["sweep"], ["export-latents"]):
        assert cli.main(c + verb) == 0, verb
    return base, c


def _err(capsys):
    return capsys.readouterr().err


@pytest.mark.parametrize(
    "text, needle",
    [
        ("nope = 1", "unknown key"),
        ("seed = 1\nseed = 2", "duplicate key"),
        ("just a line", "key = value"),
        ("styles = a", "two distinct"),
        ("styles = a, a", "two distinct"),
        ("k = 3", "exactly 2"),
        ("beta = -1", "bad-config"),
        ("test_ratio = 1.5", "test_ratio"),
        ("gru_state = many", "bad-config"),
    ],
)
def test_config_errors(text, needle):
    with pytest.raises(cli.CliError) as info:
        cli.parse_config_text(text)
    assert info.value.code == "bad-config"
    assert needle in f"{info.value.code} {info.value}"


def test_config_values_reach_hyperparams_and_classifier():
    cfg = cli.parse_config_text("gru_state = 32\nclassifier_state = 7\nlambda_v = 0.1 # comment\n")
    assert cfg.hp.gru_state == 32 and cfg.hp.lambda_v == 0.1
    assert cfg.classifier.state == 7


def test_missing_config_exit_code(capsys, tmp_path):
    assert cli.main(["--config", str(tmp_path / "none.conf"), "prepare"]) == 2
    assert "midivae-error missing-config" in _err(capsys)


def test_pipeline_outputs(run):
    base, _ = run
    out = base / "out"
    assert len(list((base / "corpus" / "toy_a").glob("*.mid"))) == 4
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("epoch,") and len(metrics) == 3
    summary = json.loads((out / "eval.json").read_text())
    assert set(summary["reconstruction"]) == {"train", "test"}
    assert len(summary["instrument_switch"]["matrix"]) == 16
    rows = list(csv.reader((out / "sweep.csv").open()))
    assert len(rows) == 1 + 8 and len(rows[0]) == 1 + 27
    latents = list(csv.reader((out / "latents.csv").open()))
    assert len(latents) == 1 + 8 * 3 and len(latents[0]) == 4 + 8


def test_prepare_reports_bar_counts(run, capsys):
    _, c = run
    assert cli.main(c + ["prepare"]) == 0
    text = capsys.readouterr().out
    assert "toy_a" in text and "12" in text


def test_empty_style_is_reported(tmp_path, capsys):
    (tmp_path / "corpus" / "toy_a").mkdir(parents=True)
    conf = tmp_path / "c.conf"
    conf.write_text(f"dataset_root = {tmp_path / 'corpus'}\noutput_dir = {tmp_path / 'out'}\nstyles = toy_a, toy_b\n")
    assert cli.main(["--config", str(conf), "prepare"]) == 2
    assert "empty-style" in _err(capsys)


def test_transfer_rejects_identical_styles(run, capsys):
    base, c = run
    song = sorted((base / "corpus" / "toy_a").glob("*.mid"))[0]
    assert cli.main(c + ["transfer", str(song), str(base / "x.mid"), "--source", "toy_a", "--target", "toy_a"]) == 2
    assert "same-style" in _err(capsys)


def test_missing_checkpoint(run, capsys, tmp_path):
    base, c = run
    song = sorted((base / "corpus" / "toy_a").glob("*.mid"))[0]
    argv = c + ["transfer", str(song), str(tmp_path / "x.mid"), "--source", "toy_a", "--target", "toy_b", "--checkpoint", str(tmp_path / "none.mvae")]
    assert cli.main(argv) == 2
    assert "missing-checkpoint" in _err(capsys)


def test_generation_verbs_and_mix_at_zero(run, tmp_path):
    base, c = run
    a, b = sorted((base / "corpus" / "toy_a").glob("*.mid"))[:2]
    assert cli.main(c + ["transfer", str(a), str(tmp_path / "t.mid"), "--source", "toy_a", "--target", "toy_b"]) == 0
    assert cli.main(c + ["interpolate", str(a), str(b), str(tmp_path / "i.mid"), "--steps", "3"]) == 0
    assert cli.main(c + ["medley", str(a), str(b), str(tmp_path / "m.mid"), "--bridge-bars", "1"]) == 0
    assert cli.main(c + ["mix", str(a), str(a), str(tmp_path / "x.mid"), "--alpha", "0"]) == 0
    assert cli.main(c + ["interpolate", str(a), str(b), str(tmp_path / "bad.mid"), "--bar-a", "99"]) == 2
    model, styles, _ = cli.load_model(base / "out" / cli.MODEL_FILE)
    doc = read_midi_file(a)
    song = encode_song(doc, StyleLabel(0, styles[0]), song_id=a.name)
    cli._write_song(so.autoencode(model, song), model, str(tmp_path / "ae.mid"), doc.tempo_bpm, doc.ticks_per_quarter)
    assert (tmp_path / "x.mid").read_bytes() == (tmp_path / "ae.mid").read_bytes()


def test_training_is_deterministic(run, tmp_path):
    base, _ = run
    conf = tmp_path / "again.conf"
    conf.write_text(TINY_RUN.format(root=base / "corpus", out=tmp_path / "out"))
    assert cli.main(["--config", str(conf), "train"]) == 0
    assert (tmp_path / "out" / cli.MODEL_FILE).read_bytes() == (base / "out" / cli.MODEL_FILE).read_bytes()
    assert (tmp_path / "out" / "metrics.csv").read_bytes() == (base / "out" / "metrics.csv").read_bytes()
