"""Command line front end: ``midivae <verb> [options]``.

Configuration is a flat ``key = value`` file (``#`` starts a comment).
Precedence is built-in defaults, then the config file, then ``--seed`` and
``--out``. Failures print a single ``midivae-error <code>: <message>`` line
on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from midivae import checkpoint as ckpt
from midivae import eval_suite as ev
from midivae import style_ops as so
from midivae.midi_io import MidiError, read_midi_file, write_midi_file
from midivae.roll_codec import BarSample, RollConfig, SongRecord, StyleLabel, decode_song, encode_song, split_dataset
from midivae.toy import ToyCorpusSpec, make_toy_corpus
from midivae.training import METRIC_COLUMNS, format_metrics_row, train
from midivae.vae_model import HyperParams, MidiVae, reconstruction_metrics

log = logging.getLogger("midivae")

CACHE_ENV = "MIDIVAE_CACHE"
MODEL_FILE = "model.mvae"
CLASSIFIER_FILE = "classifiers.mvae"
METRICS_FILE = "metrics.csv"


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- config


@dataclass
class RunConfig:
    dataset_root: Path | None = None
    styles: tuple[str, str] = ("toy_a", "toy_b")
    output_dir: Path = Path("runs/default")
    seed: int = 0
    test_ratio: float = 0.1
    hp: HyperParams = field(default_factory=HyperParams)
    classifier: ev.ClassifierParams = field(default_factory=ev.ClassifierParams)
    sweep_bars: int = 16
    sweep_points: int = 7
    sweep_span: float = 3.0
    toy_songs_per_style: int = 40
    toy_bars_per_song: int = 16
    toy_seed: int = 0

    def toy_spec(self) -> ToyCorpusSpec:
        return ToyCorpusSpec(
            songs_per_style=self.toy_songs_per_style,
            bars_per_song=self.toy_bars_per_song,
            style_names=tuple(self.styles),
            seed=self.toy_seed,
        )

    def hyperparams(self) -> HyperParams:
        return replace(self.hp, seed=self.seed)

    def classifier_params(self) -> ev.ClassifierParams:
        return replace(self.classifier, seed=self.seed)


_RUN_KEYS = {"dataset_root", "styles", "output_dir", "seed", "test_ratio", "sweep_bars", "sweep_points", "sweep_span", "toy_songs_per_style", "toy_bars_per_song", "toy_seed"}
_HP_KEYS = {f.name for f in fields(HyperParams)} - {"seed"}
_CLF_KEYS = {f"classifier_{f.name}": f.name for f in fields(ev.ClassifierParams) if f.name != "seed"}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise CliError("bad-config", f"{source}:{n}: expected 'key = value'")
        if key in values:
            raise CliError("bad-config", f"{source}:{n}: duplicate key {key!r}")
        if key not in _RUN_KEYS | _HP_KEYS | set(_CLF_KEYS):
            raise CliError("bad-config", f"{source}:{n}: unknown key {key!r}")
        values[key] = value
    cfg = RunConfig()
    hp, clf = asdict(cfg.hp), asdict(cfg.classifier)
    try:
        for key, value in values.items():
            if key == "styles":
                names = tuple(s.strip() for s in value.split(","))
                if len(names) != 2 or not all(names) or names[0] == names[1]:
                    raise CliError("bad-config", f"{source}: styles must be two distinct comma-separated names")
                cfg.styles = names
            elif key in ("dataset_root", "output_dir"):
                setattr(cfg, key, Path(value))
            elif key in _RUN_KEYS:
                setattr(cfg, key, _coerce(value, getattr(cfg, key)))
            elif key in _HP_KEYS:
                hp[key] = _coerce(value, hp[key])
            else:
                clf[_CLF_KEYS[key]] = _coerce(value, clf[_CLF_KEYS[key]])
        cfg.hp = HyperParams(**hp)
        cfg.classifier = ev.ClassifierParams(**clf)
    except ValueError as e:
        raise CliError("bad-config", f"{source}: {e}") from e
    if cfg.hp.k != 2:
        raise CliError("bad-config", f"{source}: a run covers exactly 2 styles, got k={cfg.hp.k}")
    if not 0 < cfg.test_ratio < 1:
        raise CliError("bad-config", f"{source}: test_ratio must be in (0, 1)")
    return cfg


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise CliError("missing-config", f"config file {p} not found")
        cfg = parse_config_text(p.read_text(), str(p))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_dir = Path(out)
    return cfg


# --------------------------------------------------------------------------- dataset cache


def cache_dir(cfg: RunConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else cfg.output_dir / "cache"


def _dataset_files(cfg: RunConfig) -> dict[str, list[Path]]:
    if cfg.dataset_root is None:
        raise CliError("bad-config", "dataset_root is not set")
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise CliError("missing-dataset", f"dataset root {root} does not exist")
    files = {}
    for name in cfg.styles:
        folder = root / name
        found = sorted(folder.glob("*.mid")) + sorted(folder.glob("*.midi")) if folder.is_dir() else []
        if not found:
            raise CliError("empty-style", f"style {name!r} has no MIDI files under {folder}")
        files[name] = found
    return files


def _cache_key(files: dict[str, list[Path]], roll: RollConfig) -> str:
    h = hashlib.sha256(repr(asdict(roll)).encode())
    for name, paths in files.items():
        h.update(name.encode())
        for p in paths:
            st = p.stat()
            h.update(f"{p.resolve()}|{st.st_size}|{st.st_mtime_ns}".encode())
    return h.hexdigest()[:16]


def _save_songs(path: Path, songs: Sequence[SongRecord], styles: Sequence[str]) -> None:
    np.savez(
        path,
        pitch=np.concatenate([s.pitch_grid() for s in songs]).astype(np.int16),
        velocity=np.concatenate([s.velocity_grid() for s in songs]).astype(np.float32),
        n_bars=np.array([len(s.bars) for s in songs], dtype=np.int64),
        style=np.array([s.style.index for s in songs], dtype=np.int64),
        instruments=np.array([s.instruments for s in songs], dtype=np.int64),
        song_id=np.array([s.song_id for s in songs], dtype=str),
        styles=np.array(styles, dtype=str),
    )


def _load_songs(path: Path) -> list[SongRecord]:
    with np.load(path, allow_pickle=False) as d:
        styles = [str(s) for s in d["styles"]]
        songs, at = [], 0
        for n, style, inst, sid in zip(d["n_bars"], d["style"], d["instruments"], d["song_id"]):
            sid = str(sid)
            bars = [BarSample(d["pitch"][at + b].astype(np.int64), d["velocity"][at + b], b, sid) for b in range(n)]
            songs.append(SongRecord(bars, tuple(int(i) for i in inst), StyleLabel(int(style), styles[style]), sid))
            at += int(n)
    return songs


def prepare_dataset(cfg: RunConfig, roll: RollConfig = RollConfig()) -> tuple[list[SongRecord], Path]:
    """Parse and encode the corpus, or load it from the cache if the files are unchanged."""
    files = _dataset_files(cfg)
    out = cache_dir(cfg) / f"dataset-{_cache_key(files, roll)}.npz"
    if out.exists():
        return _load_songs(out), out
    songs = []
    for index, name in enumerate(cfg.styles):
        n_before = len(songs)
        for path in files[name]:
            try:
                doc = read_midi_file(path)
                songs.append(encode_song(doc, StyleLabel(index, name), roll, song_id=str(path.relative_to(cfg.dataset_root))))
            except (MidiError, ValueError) as e:
                log.warning("skipping %s: %s", path, e)
        if len(songs) == n_before:
            raise CliError("empty-style", f"style {name!r} has no parseable songs")
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_songs(out, songs, cfg.styles)
    return songs, out


def dataset_summary(songs: Sequence[SongRecord], styles: Sequence[str]) -> str:
    lines = [f"{'style':<16}{'songs':>8}{'bars':>10}"]
    for i, name in enumerate(styles):
        mine = [s for s in songs if s.style.index == i]
        lines.append(f"{name:<16}{len(mine):>8}{sum(len(s.bars) for s in mine):>10}")
    lines.append(f"{'total':<16}{len(songs):>8}{sum(len(s.bars) for s in songs):>10}")
    return "\n".join(lines)


def dataset_splits(cfg: RunConfig) -> tuple[list[SongRecord], list[SongRecord]]:
    songs, _ = prepare_dataset(cfg)
    return split_dataset(songs, 1.0 - cfg.test_ratio, cfg.seed, stratify=True)


# --------------------------------------------------------------------------- checkpoints


def save_model(path: Path, model: MidiVae, styles: Sequence[str], stats: ckpt.LatentStats | None) -> None:
    meta = {"kind": "midivae", "hyperparams": model.hp.to_dict(), "styles": list(styles)}
    ckpt.save(path, ckpt.Checkpoint(dict(model.store.params), model.cfg, stats, meta))


def load_model(path: Path) -> tuple[MidiVae, list[str], ckpt.LatentStats | None]:
    if not Path(path).is_file():
        raise CliError("missing-checkpoint", f"checkpoint {path} not found")
    c = ckpt.load(path)
    if c.meta.get("kind") != "midivae":
        raise CliError("bad-checkpoint", f"{path} is not a model checkpoint")
    hp = HyperParams(**c.meta["hyperparams"])
    return MidiVae(hp, c.cfg, ckpt.store_from_tensors(c.tensors)), list(c.meta["styles"]), c.stats


def save_classifiers(path: Path, classifiers: Sequence[ev.StyleClassifier], styles: Sequence[str]) -> None:
    tensors = {f"{c.feature}/{name}": t for c in classifiers for name, t in c.store.params.items()}
    meta = {"kind": "classifiers", "styles": list(styles), "params": asdict(classifiers[0].params), "k": classifiers[0].k}
    ckpt.save(path, ckpt.Checkpoint(tensors, classifiers[0].cfg, None, meta))


def load_classifiers(path: Path) -> tuple[list[ev.StyleClassifier], list[str]]:
    c = ckpt.load(path)
    if c.meta.get("kind") != "classifiers":
        raise CliError("bad-checkpoint", f"{path} is not a classifier checkpoint")
    params = ev.ClassifierParams(**c.meta["params"])
    out = []
    for feature in ev.FEATURES:
        prefix = f"{feature}/"
        tensors = {k[len(prefix) :]: v for k, v in c.tensors.items() if k.startswith(prefix)}
        out.append(ev.StyleClassifier(feature, c.meta["k"], c.cfg, params, ckpt.store_from_tensors(tensors)))
    return out, list(c.meta["styles"])


def _model_path(cfg: RunConfig, given: str | None) -> Path:
    return Path(given) if given else cfg.output_dir / MODEL_FILE


def _classifiers(cfg: RunConfig, styles: Sequence[str], train_songs: Sequence[SongRecord] | None = None) -> list[ev.StyleClassifier]:
    """Load the run's classifiers, training and saving them on first use."""
    path = cfg.output_dir / CLASSIFIER_FILE
    if path.is_file():
        clfs, saved = load_classifiers(path)
        if saved != list(styles):
            raise CliError("style-mismatch", f"classifiers cover {saved}, model covers {list(styles)}")
        return clfs
    if train_songs is None:
        train_songs, _ = dataset_splits(cfg)
    clfs = ev.train_classifiers(train_songs, 2, cfg.classifier_params())
    save_classifiers(path, clfs, styles)
    return clfs


def _check_styles(cfg: RunConfig, model_styles: Sequence[str]) -> None:
    if list(cfg.styles) != list(model_styles):
        raise CliError("style-mismatch", f"config styles {list(cfg.styles)} differ from checkpoint styles {list(model_styles)}")


def _style_index(name: str, styles: Sequence[str]) -> int:
    if name not in styles:
        raise CliError("style-mismatch", f"style {name!r} not in checkpoint styles {list(styles)}")
    return list(styles).index(name)


def _read_song(path: str, styles: Sequence[str], style: str | None = None) -> tuple[SongRecord, float, int]:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", f"MIDI file {p} not found")
    doc = read_midi_file(p)
    index = _style_index(style, styles) if style else 0
    return encode_song(doc, StyleLabel(index, styles[index]), song_id=p.name), doc.tempo_bpm, doc.ticks_per_quarter


def _write_song(song: SongRecord, model: MidiVae, path: str, tempo: float, tpq: int) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_midi_file(decode_song(song, model.cfg, tempo, tpq), out)


def _write_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


# --------------------------------------------------------------------------- commands


def cmd_make_toy(cfg: RunConfig, args) -> int:
    root = Path(args.root) if args.root else cfg.dataset_root
    if root is None:
        raise CliError("bad-config", "make-toy needs --root or dataset_root")
    paths = make_toy_corpus(cfg.toy_spec(), root)
    print(f"wrote {len(paths)} songs under {root}")
    return 0


def cmd_prepare(cfg: RunConfig, args) -> int:
    songs, path = prepare_dataset(cfg)
    print(dataset_summary(songs, cfg.styles))
    print(f"cache: {path}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    train_songs, test_songs = dataset_splits(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = cfg.output_dir / METRICS_FILE
    with metrics_path.open("w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")

        def write_row(row):
            fh.write(format_metrics_row(row) + "\n")
            fh.flush()
            print(f"epoch {int(row['epoch'])}: test pitch acc {row.get('test_pitch_acc', float('nan')):.4f}", flush=True)

        result = train(train_songs, test_songs, cfg.hyperparams(), callbacks=[write_row])
    stats = so.empirical_latent_stats(result.model, train_songs)
    save_model(cfg.output_dir / MODEL_FILE, result.model, cfg.styles, stats)
    print(f"checkpoint: {cfg.output_dir / MODEL_FILE}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model, styles, _ = load_model(_model_path(cfg, args.checkpoint))
    _check_styles(cfg, styles)
    train_songs, test_songs = dataset_splits(cfg)
    splits = {"train": train_songs, "test": test_songs}
    clfs = _classifiers(cfg, styles, train_songs)
    out = cfg.output_dir
    summary: dict = {"reconstruction": {}, "classifiers": {}}
    lines = [f"{'split':<8}{'pitch_acc':>11}{'inst_acc':>10}{'style_acc':>11}{'vel_mse':>10}"]
    for name, songs in splits.items():
        m = reconstruction_metrics(model, songs)
        summary["reconstruction"][name] = m
        lines.append(f"{name:<8}{m['pitch_acc']:>11.4f}{m['instrument_acc']:>10.4f}{m['style_acc']:>11.4f}{m['velocity_mse']:>10.5f}")
        summary["classifiers"][name] = ev.classifier_accuracy(songs, clfs)
    recon = "\n".join(lines)
    report = ev.before_after_report(model, clfs, splits)
    switch = ev.instrument_switch_matrix(model, test_songs)
    summary["transfer"] = [asdict(r) | {"diff": r.diff} for r in report.rows]
    summary["instrument_switch"] = {"matrix": switch.matrix.tolist(), "observed": switch.observed.tolist()}
    (out / "reconstruction.txt").write_text(recon + "\n")
    (out / "transfer.txt").write_text(report.to_table() + "\n")
    _write_csv(out / "transfer.csv", report.to_csv_rows())
    fam_rows = [["family"] + [str(j) for j in range(ev.N_FAMILIES)] + ["observed"]]
    for i, row in enumerate(switch.matrix):
        fam_rows.append([str(i)] + [f"{v:.6f}" for v in row] + [str(int(switch.observed[i]))])
    _write_csv(out / "instrument_switch.csv", fam_rows)
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(recon)
    print()
    print(report.to_table())
    return 0


def cmd_transfer(cfg: RunConfig, args) -> int:
    if args.source == args.target:
        raise CliError("same-style", "source and target style must differ")
    model, styles, _ = load_model(_model_path(cfg, args.checkpoint))
    spec = so.TransferSpec(_style_index(args.source, styles), _style_index(args.target, styles))
    song, tempo, tpq = _read_song(args.input, styles, args.source)
    _write_song(so.transfer_song(model, song, spec, styles), model, args.output, tempo, tpq)
    return 0


def cmd_interpolate(cfg: RunConfig, args) -> int:
    model, styles, _ = load_model(_model_path(cfg, args.checkpoint))
    a, tempo, tpq = _read_song(args.input_a, styles)
    b, _, _ = _read_song(args.input_b, styles)
    za, zb = so.song_latents(model, a), so.song_latents(model, b)
    for song, z, bar in ((a, za, args.bar_a), (b, zb, args.bar_b)):
        if not 0 <= bar < len(z):
            raise CliError("bad-argument", f"{song.song_id} has {len(z)} bars, bar {bar} requested")
    path = np.stack(so.interpolate(za[args.bar_a], zb[args.bar_b], args.steps))
    _write_song(so.decode_song_latents(model, path, a.style), model, args.output, tempo, tpq)
    return 0


def cmd_medley(cfg: RunConfig, args) -> int:
    model, styles, _ = load_model(_model_path(cfg, args.checkpoint))
    a, tempo, tpq = _read_song(args.input_a, styles)
    b, _, _ = _read_song(args.input_b, styles)
    _write_song(so.medley(model, a, b, args.bridge_bars), model, args.output, tempo, tpq)
    return 0


def cmd_mix(cfg: RunConfig, args) -> int:
    model, styles, _ = load_model(_model_path(cfg, args.checkpoint))
    a, tempo, tpq = _read_song(args.input_a, styles)
    b, _, _ = _read_song(args.input_b, styles)
    _write_song(so.mixture(model, a, b, args.alpha), model, args.output, tempo, tpq)
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    model, styles, stats = load_model(_model_path(cfg, args.checkpoint))
    _check_styles(cfg, styles)
    if stats is None:
        raise CliError("bad-checkpoint", "checkpoint carries no latent statistics")
    train_songs, test_songs = dataset_splits(cfg)
    clfs = _classifiers(cfg, styles, train_songs)
    z = ev.sample_sweep_bars(model, test_songs, cfg.sweep_bars, np.random.default_rng(cfg.seed))
    table = ev.latent_sweep(model, z, stats, clfs, cfg.sweep_points, cfg.sweep_span)
    rows = [["dim"] + table.names]
    for d, row in enumerate(table.correlation):
        rows.append([str(d)] + [f"{v:.6f}" for v in row])
    path = Path(args.output) if args.output else cfg.output_dir / "sweep.csv"
    _write_csv(path, rows)
    style_metric = table.names[-1]
    print(f"top dims for {style_metric}: {table.top_dims(style_metric, 5)}")
    return 0


def cmd_export_latents(cfg: RunConfig, args) -> int:
    model, styles, _ = load_model(_model_path(cfg, args.checkpoint))
    _check_styles(cfg, styles)
    train_songs, test_songs = dataset_splits(cfg)
    clfs = _classifiers(cfg, styles, train_songs)
    path = Path(args.output) if args.output else cfg.output_dir / "latents.csv"
    n = ev.export_latents(model, train_songs + test_songs, path, clfs)
    print(f"wrote {n} rows to {path}")
    return 0


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midivae", description="Multi-task VAE for symbolic music style transfer.")
    parser.add_argument("--config", help="flat key = value run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="write the synthetic two-style corpus")
    p.add_argument("--root", help="target directory (default: dataset_root)")
    p.set_defaults(func=cmd_make_toy)
    sub.add_parser("prepare", help="encode and cache the dataset").set_defaults(func=cmd_prepare)

    for name, func, help_ in (
        ("train", cmd_train, "train a model"),
        ("eval", cmd_eval, "reconstruction, classifier and transfer reports"),
        ("sweep", cmd_sweep, "latent dimension sweep"),
        ("export-latents", cmd_export_latents, "write per-bar latents as CSV"),
    ):
        p = sub.add_parser(name, help=help_)
        if name != "train":
            p.add_argument("--checkpoint")
        if name in ("sweep", "export-latents"):
            p.add_argument("--output")
        p.set_defaults(func=func)

    p = sub.add_parser("transfer", help="swap the style of one song")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_transfer)

    def two_songs(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("input_a")
        p.add_argument("input_b")
        p.add_argument("output")
        p.add_argument("--checkpoint")
        p.set_defaults(func=func)
        return p

    p = two_songs("interpolate", cmd_interpolate, "decode a latent path between two bars")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--bar-a", type=int, default=0)
    p.add_argument("--bar-b", type=int, default=0)
    two_songs("medley", cmd_medley, "join two songs with an interpolated bridge").add_argument("--bridge-bars", type=int, default=2)
    two_songs("mix", cmd_mix, "decode a bar-wise latent blend").add_argument("--alpha", type=float, default=0.5)
    return parser


def _error_line(code: str, message: str) -> str:
    return f"midivae-error {code}: {' '.join(str(message).split())}"


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return args.func(cfg, args)
    except CliError as e:
        print(_error_line(e.code, e), file=sys.stderr)
    except ckpt.CheckpointError as e:
        print(_error_line("bad-checkpoint", e), file=sys.stderr)
    except MidiError as e:
        print(_error_line("bad-midi", e), file=sys.stderr)
    except (ev.EvalError, so.DegenerateStats, ValueError) as e:
        print(_error_line("invalid", e), file=sys.stderr)
    except OSError as e:
        print(_error_line("io", f"{e.filename or ''} {e.strerror or e}"), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
