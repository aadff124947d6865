"""Style-transfer evaluation that is independent of the generative model.

Three GRU classifiers predict a bar's style from its pitch roll, its
velocity roll and its program list respectively; a majority vote over the
three is the ensemble prediction. On top of those sit the before/after
transfer report, the GM-family instrument switch matrix, the latent sweep
and the latent CSV export.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from midivae import nn_core as nn
from midivae.checkpoint import LatentStats
from midivae.roll_codec import IMPLIED_ONSET_VELOCITY, ONSET_THRESHOLD, RollConfig, SongRecord
from midivae.style_ops import TransferSpec, song_latents, transfer_song
from midivae.vae_model import MidiVae, decode_latents, encode_songs

FEATURES = ("pitch", "velocity", "instrument")
N_FAMILIES = 16


class EvalError(ValueError):
    pass


# --------------------------------------------------------------------------- classifiers


@dataclass
class ClassifierParams:
    state: int = 256
    layers: int = 2
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0


@dataclass
class BarArrays:
    """A stack of bars: pitch ``(N, S, T)`` indices, velocity ``(N, S, T)``, programs ``(N, T)``."""

    pitch: np.ndarray
    velocity: np.ndarray
    instruments: np.ndarray

    def __len__(self) -> int:
        return len(self.pitch)

    def take(self, idx) -> "BarArrays":
        return BarArrays(self.pitch[idx], self.velocity[idx], self.instruments[idx])

    @classmethod
    def from_songs(cls, songs: Sequence[SongRecord]) -> "BarArrays":
        return cls(
            np.concatenate([s.pitch_grid() for s in songs]),
            np.concatenate([s.velocity_grid() for s in songs]),
            np.concatenate([np.tile(np.asarray(s.instruments, dtype=np.int64), (len(s.bars), 1)) for s in songs]),
        )


class StyleClassifier:
    """Stacked GRU over one feature of a bar, softmax over ``k`` styles from the last state."""

    def __init__(self, feature: str, k: int, cfg: RollConfig = RollConfig(), params: ClassifierParams = ClassifierParams(), store: nn.ParamStore | None = None):
        if feature not in FEATURES:
            raise EvalError(f"unknown classifier feature {feature!r}")
        if k < 2:
            raise EvalError("a style classifier needs at least 2 styles")
        self.feature, self.k, self.cfg, self.params = feature, k, cfg, params
        if store is None:
            rng = np.random.default_rng(params.seed)
            store = nn.ParamStore(np.float32)
            n_in = self.n_inputs
            for i in range(params.layers):
                nn.add_gru(store, f"gru.{i}", n_in if i == 0 else params.state, params.state, rng)
            nn.add_dense(store, "head", params.state, k, rng)
        self.store = store

    @property
    def n_inputs(self) -> int:
        cfg = self.cfg
        return {"pitch": cfg.vocab + cfg.n_tracks, "velocity": 3 + cfg.n_tracks, "instrument": cfg.n_instruments}[self.feature]

    def inputs(self, bars: BarArrays) -> np.ndarray:
        """Time-major feature sequence ``(T, N, n_inputs)``."""
        cfg = self.cfg
        N = len(bars)
        if self.feature == "instrument":
            return np.eye(cfg.n_instruments, dtype=np.float32)[bars.instruments.T]
        track = np.tile(np.eye(cfg.n_tracks, dtype=np.float32), (cfg.n_steps, 1))
        track = np.broadcast_to(track[:, None, :], (cfg.n_frames, N, cfg.n_tracks))
        if self.feature == "pitch":
            head = np.eye(cfg.vocab, dtype=np.float32)[bars.pitch.reshape(N, -1).T]
        else:
            v = bars.velocity.reshape(N, -1).T.astype(np.float32)
            onset = (v > ONSET_THRESHOLD).astype(np.float32)
            # onset loudness centred on the middle of the onset range, so loud and soft differ in sign
            head = np.stack([v, onset, onset * (v - 0.75) * 4.0], axis=-1)
        return np.concatenate([head, track], axis=-1)

    def _forward(self, xs: np.ndarray):
        p = self.store
        xs = xs.astype(p.dtype, copy=False)
        h0 = np.zeros((xs.shape[1], self.params.state), p.dtype)
        caches = []
        for i in range(self.params.layers):
            xs, c = nn.gru_forward(p[f"gru.{i}.W"], p[f"gru.{i}.U"], p[f"gru.{i}.b"], xs, h0)
            caches.append(c)
        logits, c_head = nn.dense_forward(p["head.W"], p["head.b"], xs[-1], "linear")
        return logits, (caches, c_head, xs.shape)

    def predict_proba(self, bars: BarArrays, chunk: int = 1024) -> np.ndarray:
        out = [nn.softmax(self._forward(self.inputs(bars.take(slice(i, i + chunk))))[0]) for i in range(0, len(bars), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.k))

    def loss_and_grads(self, bars: BarArrays, labels: np.ndarray):
        logits, (caches, c_head, shape) = self._forward(self.inputs(bars))
        loss, dlogits, _ = nn.softmax_cross_entropy(logits, labels)
        grads = self.store.zero_grads()
        dh, grads["head.W"], grads["head.b"] = nn.dense_backward(dlogits, c_head)
        dhs = np.zeros(shape, self.store.dtype)
        dhs[-1] = dh
        for i in range(self.params.layers - 1, -1, -1):
            dhs, dW, dU, db, _ = nn.gru_backward(dhs, caches[i])
            grads[f"gru.{i}.W"], grads[f"gru.{i}.U"], grads[f"gru.{i}.b"] = dW, dU, db
        return loss, grads

    def meta(self) -> dict:
        return {"kind": "style_classifier", "feature": self.feature, "k": self.k, "params": asdict(self.params)}


def _labels(songs: Sequence[SongRecord]) -> np.ndarray:
    return np.concatenate([np.full(len(s.bars), s.style.index, dtype=np.int64) for s in songs])


def train_style_classifier(feature: str, songs: Sequence[SongRecord], k: int = 2, params: ClassifierParams = ClassifierParams(), cfg: RollConfig = RollConfig()) -> StyleClassifier:
    """Per-bar cross-entropy training on bar-level style labels."""
    present = {s.style.index for s in songs if s.bars}
    missing = sorted(set(range(k)) - present)
    if missing:
        raise EvalError(f"no training songs for style(s) {missing}")
    clf = StyleClassifier(feature, k, cfg, params)
    bars, labels = BarArrays.from_songs(songs), _labels(songs)
    rng = np.random.default_rng(params.seed + 1)
    for _ in range(params.epochs):
        order = rng.permutation(len(bars))
        for lo in range(0, len(order), params.batch_size):
            idx = order[lo : lo + params.batch_size]
            _, grads = clf.loss_and_grads(bars.take(idx), labels[idx])
            nn.adam_step(clf.store, grads, params.lr)
    return clf


def train_classifiers(songs: Sequence[SongRecord], k: int = 2, params: ClassifierParams = ClassifierParams(), cfg: RollConfig = RollConfig()) -> list[StyleClassifier]:
    return [train_style_classifier(f, songs, k, params, cfg) for f in FEATURES]


def _check_ensemble(classifiers: Sequence[StyleClassifier]) -> int:
    if [c.feature for c in classifiers] != list(FEATURES):
        raise EvalError(f"ensemble needs classifiers for {FEATURES} in that order")
    ks = {c.k for c in classifiers}
    if len(ks) != 1:
        raise EvalError(f"classifiers disagree on the style count: {sorted(ks)}")
    return ks.pop()


def ensemble_vote(probs: Sequence[np.ndarray]) -> np.ndarray:
    """Majority vote of per-classifier argmaxes; ties go to the highest mean probability."""
    stacked = np.stack(probs)  # (3, N, k)
    votes = np.zeros(stacked.shape[1:])
    for p in stacked:
        votes[np.arange(len(p)), p.argmax(-1)] += 1
    tie_break = stacked.mean(axis=0) / 2.0  # below 1, so it never outweighs a vote
    return (votes + tie_break).argmax(-1)


@dataclass
class EnsembleOutput:
    per_classifier: dict[str, np.ndarray]  # feature -> (N, k) probabilities
    vote: np.ndarray  # (N,)

    @property
    def mean_proba(self) -> np.ndarray:
        return np.mean(list(self.per_classifier.values()), axis=0)


def ensemble_outputs(bars: BarArrays, classifiers: Sequence[StyleClassifier]) -> EnsembleOutput:
    _check_ensemble(classifiers)
    probs = {c.feature: c.predict_proba(bars) for c in classifiers}
    return EnsembleOutput(probs, ensemble_vote(list(probs.values())))


def ensemble_predict(bars: BarArrays, classifiers: Sequence[StyleClassifier]) -> np.ndarray:
    return ensemble_outputs(bars, classifiers).vote


def song_style_score(song: SongRecord, classifiers: Sequence[StyleClassifier]) -> float:
    """Fraction of the song's bars whose ensemble vote equals the song's style."""
    if not song.bars:
        raise EvalError("cannot score an empty song")
    return float(np.mean(ensemble_predict(BarArrays.from_songs([song]), classifiers) == song.style.index))


def classifier_accuracy(songs: Sequence[SongRecord], classifiers: Sequence[StyleClassifier]) -> dict[str, float]:
    out = ensemble_outputs(BarArrays.from_songs(songs), classifiers)
    labels = _labels(songs)
    acc = {f: float(np.mean(p.argmax(-1) == labels)) for f, p in out.per_classifier.items()}
    acc["ensemble"] = float(np.mean(out.vote == labels))
    return acc


# --------------------------------------------------------------------------- before/after


@dataclass(frozen=True)
class TransferRow:
    split: str
    classifier: str  # a feature name or "ensemble"
    measure: str  # "probability" or "accuracy"
    before: float
    after: float

    @property
    def diff(self) -> float:
        return self.before - self.after


@dataclass
class TransferReport:
    rows: list[TransferRow] = field(default_factory=list)

    def get(self, split: str, classifier: str, measure: str = "accuracy") -> TransferRow:
        for r in self.rows:
            if (r.split, r.classifier, r.measure) == (split, classifier, measure):
                return r
        raise KeyError((split, classifier, measure))

    def to_table(self) -> str:
        lines = [f"{'split':<8}{'classifier':<12}{'measure':<13}{'before':>8}{'after':>8}{'diff':>8}"]
        for r in self.rows:
            lines.append(f"{r.split:<8}{r.classifier:<12}{r.measure:<13}{r.before:>8.3f}{r.after:>8.3f}{r.diff:>8.3f}")
        return "\n".join(lines)

    def to_csv_rows(self) -> list[list]:
        head = [["split", "classifier", "measure", "before", "after", "diff"]]
        return head + [[r.split, r.classifier, r.measure, f"{r.before:.9g}", f"{r.after:.9g}", f"{r.diff:.9g}"] for r in self.rows]


def _source_scores(bars: BarArrays, source: int, classifiers) -> dict[tuple[str, str], float]:
    out = ensemble_outputs(bars, classifiers)
    scores = {}
    for f, p in out.per_classifier.items():
        scores[(f, "probability")] = float(p[:, source].mean())
        scores[(f, "accuracy")] = float(np.mean(p.argmax(-1) == source))
    scores[("ensemble", "probability")] = float(out.mean_proba[:, source].mean())
    scores[("ensemble", "accuracy")] = float(np.mean(out.vote == source))
    return scores


def transfer_targets(style: int, k: int) -> list[int]:
    return [t for t in range(k) if t != style]


def before_after_report(model: MidiVae, classifiers: Sequence[StyleClassifier], splits: dict[str, Sequence[SongRecord]]) -> TransferReport:
    """Score every song for its own style before and after transfer to each other style.

    Scores are per-song means over bars, then averaged over songs and
    transfer directions.
    """
    k = _check_ensemble(classifiers)
    report = TransferReport()
    for split, songs in splits.items():
        before, after = [], []
        for song in songs:
            if not song.bars:
                continue
            src = song.style.index
            for tgt in transfer_targets(src, k):
                moved = transfer_song(model, song, TransferSpec(src, tgt))
                before.append(_source_scores(BarArrays.from_songs([song]), src, classifiers))
                after.append(_source_scores(BarArrays.from_songs([moved]), src, classifiers))
        if not before:
            continue
        for key in before[0]:
            b = float(np.mean([s[key] for s in before]))
            a = float(np.mean([s[key] for s in after]))
            report.rows.append(TransferRow(split, key[0], key[1], b, a))
    return report


# --------------------------------------------------------------------------- instrument switches


@dataclass
class SwitchMatrix:
    counts: np.ndarray  # (16, 16) raw track counts

    @property
    def observed(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    @property
    def matrix(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros_like(self.counts, dtype=float), where=totals > 0)


def instrument_switch_matrix(model: MidiVae, songs: Sequence[SongRecord], k: int | None = None) -> SwitchMatrix:
    """Count GM family transitions of every sounding track under transfer to each other style."""
    k = k or model.hp.k
    silence = model.cfg.silence
    counts = np.zeros((N_FAMILIES, N_FAMILIES))
    for song in songs:
        if not song.bars:
            continue
        sounding = (song.pitch_grid() != silence).any(axis=(0, 1))
        for tgt in transfer_targets(song.style.index, k):
            moved = transfer_song(model, song, TransferSpec(song.style.index, tgt))
            for t in np.flatnonzero(sounding):
                counts[song.instruments[t] // 8, moved.instruments[t] // 8] += 1
    return SwitchMatrix(counts)


# --------------------------------------------------------------------------- latent sweep


def metric_names(n_tracks: int = 4) -> list[str]:
    names = ["onsets", "held_steps"]
    for scope in ["all"] + [f"track{t}" for t in range(n_tracks)]:
        names += [f"pitch_{stat}_{scope}" for stat in ("mean", "max", "min", "range")]
    names += [f"velocity_{stat}" for stat in ("mean", "max", "min", "range")]
    names.append("ensemble_style0_prob")
    return names


def _masked_stats(values: np.ndarray, mask: np.ndarray, axes) -> list[np.ndarray]:
    """Mean, max, min and range of ``values`` where ``mask``; zero when nothing is selected."""
    n = mask.sum(axis=axes)
    has = n > 0
    mean = np.where(has, np.where(mask, values, 0).sum(axis=axes) / np.maximum(n, 1), 0.0)
    hi = np.where(has, np.where(mask, values, -np.inf).max(axis=axes), 0.0)
    lo = np.where(has, np.where(mask, values, np.inf).min(axis=axes), 0.0)
    return [mean, hi, lo, hi - lo]


def bar_metrics(bars: BarArrays, cfg: RollConfig, classifiers: Sequence[StyleClassifier] | None = None) -> np.ndarray:
    """``(N, 27)`` bar metrics in :func:`metric_names` order.

    A sounding step is an onset when its velocity marks one, when it starts
    the bar or when its pitch differs from the previous step; otherwise it
    is held. Onsets without an explicit velocity count at the implied value.
    """
    pitch, vel = bars.pitch, bars.velocity.astype(np.float64)
    sounding = pitch != cfg.silence
    prev = np.concatenate([np.full_like(pitch[:, :1], -1), pitch[:, :-1]], axis=1)
    explicit = vel > ONSET_THRESHOLD
    onset = sounding & (explicit | (prev != pitch))
    held = sounding & ~onset
    midi_pitch = (pitch + cfg.pitch_lo).astype(np.float64)
    midi_vel = np.where(explicit, np.clip(np.round(vel * 256 - 129), 0, 127), IMPLIED_ONSET_VELOCITY)
    cols = [onset.sum(axis=(1, 2)).astype(float), held.sum(axis=(1, 2)).astype(float)]
    cols += _masked_stats(midi_pitch, sounding, (1, 2))
    for t in range(cfg.n_tracks):
        cols += _masked_stats(midi_pitch[:, :, t], sounding[:, :, t], 1)
    cols += _masked_stats(midi_vel, onset, (1, 2))
    if classifiers:
        cols.append(ensemble_outputs(bars, classifiers).mean_proba[:, 0])
    else:
        cols.append(np.zeros(len(bars)))
    return np.stack(cols, axis=1)


def pearson(x: np.ndarray, y: np.ndarray, tol: float = 0.0) -> float:
    """Pearson correlation, 0 when either side is constant.

    ``y`` counts as constant when its range is at most ``tol``; the sweep
    uses this so that float-level wiggle in a saturated probability does
    not read as a perfect correlation.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.ptp(x) == 0 or np.ptp(y) <= tol:
        return 0.0
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    return float((x * y).sum() / den) if den > 0 else 0.0


@dataclass
class SweepTable:
    names: list[str]
    correlation: np.ndarray  # (latent_dim, n_metrics)

    def top_dims(self, metric: str, n: int = 2) -> list[int]:
        col = np.abs(self.correlation[:, self.names.index(metric)])
        return [int(i) for i in np.argsort(-col, kind="stable")[:n]]


def latent_sweep(
    model: MidiVae,
    z_bars: np.ndarray,
    stats: LatentStats,
    classifiers: Sequence[StyleClassifier] | None = None,
    points: int = 7,
    span: float = 3.0,
    dims: Iterable[int] | None = None,
    tol: float = 1e-3,
) -> SweepTable:
    """Set one latent dimension at a time to ``points`` values in ``[-span, span] * sigma_hat``.

    Each swept latent is decoded and measured; the reported value per
    (dimension, metric) is the signed Pearson correlation between the swept
    value and the metric, averaged over the sample bars. Metrics moving
    by no more than ``tol`` over the sweep count as constant.
    """
    if points < 2:
        raise ValueError("a sweep needs at least 2 points")
    z_bars = np.asarray(z_bars, dtype=model.store.dtype)
    n, L = z_bars.shape
    cfg = model.cfg
    names = metric_names(cfg.n_tracks)
    grid = np.linspace(-span, span, points)
    dims = list(range(L)) if dims is None else list(dims)
    corr = np.zeros((L, len(names)))
    for d in dims:
        values = grid * float(stats.sigma_hat[d])
        z = np.repeat(z_bars[:, None, :], points, axis=1)
        z[:, :, d] = values
        out = decode_latents(model, z.reshape(n * points, L))
        bars = BarArrays(
            out.pitch_logits.argmax(-1).reshape(-1, cfg.n_steps, cfg.n_tracks),
            out.velocity.reshape(-1, cfg.n_steps, cfg.n_tracks),
            out.instrument_logits.argmax(-1),
        )
        m = bar_metrics(bars, cfg, classifiers).reshape(n, points, len(names))
        for j in range(len(names)):
            corr[d, j] = np.mean([pearson(values, m[b, :, j], tol) for b in range(n)])
    return SweepTable(names, corr)


def sample_sweep_bars(model: MidiVae, songs: Sequence[SongRecord], n: int, rng: np.random.Generator) -> np.ndarray:
    z = np.concatenate(encode_songs(model, songs))
    if n > len(z):
        raise EvalError(f"asked for {n} sweep bars, dataset has {len(z)}")
    return z[np.sort(rng.choice(len(z), size=n, replace=False))]


# --------------------------------------------------------------------------- export


def export_latents(model: MidiVae, songs: Sequence[SongRecord], path: str | Path, classifiers: Sequence[StyleClassifier] | None = None) -> int:
    """Write one CSV row per bar: song id, bar index, style, ensemble source-style probability, latents.

    Without classifiers the probability column is empty. Returns the row count.
    """
    mus = encode_songs(model, songs)
    path = Path(path)
    try:
        fh = path.open("w", newline="")
    except OSError as e:
        raise EvalError(f"cannot write {path}: {e.strerror}") from e
    rows = 0
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["song_id", "bar_index", "style", "source_style_prob"] + [f"z{i}" for i in range(model.hp.latent_dim)])
        for song, mu in zip(songs, mus):
            if classifiers:
                prob = ensemble_outputs(BarArrays.from_songs([song]), classifiers).mean_proba[:, song.style.index]
            for i, z in enumerate(mu):
                p = f"{prob[i]:.9g}" if classifiers else ""
                w.writerow([song.song_id, i, song.style.name, p] + [f"{v:.9g}" for v in z])
                rows += 1
    return rows


def autoencode_bars(model: MidiVae, song: SongRecord) -> BarArrays:
    out = decode_latents(model, song_latents(model, song))
    cfg = model.cfg
    return BarArrays(
        out.pitch_logits.argmax(-1).reshape(-1, cfg.n_steps, cfg.n_tracks),
        out.velocity.reshape(-1, cfg.n_steps, cfg.n_tracks),
        out.instrument_logits.argmax(-1),
    )
