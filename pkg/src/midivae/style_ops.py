"""Latent-space manipulations at inference time.

All operations encode with ``mu_z`` directly (no sampling noise), so every
result is a deterministic function of the model and its inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from midivae.checkpoint import LatentStats
from midivae.roll_codec import BarSample, SongRecord, StyleLabel
from midivae.vae_model import DecoderOutput, MidiVae, decode_latents, encode_songs


class DegenerateStats(ValueError):
    pass


@dataclass(frozen=True)
class TransferSpec:
    source_style: int
    target_style: int

    def check(self, k: int) -> None:
        if self.source_style == self.target_style:
            raise ValueError("source and target style must differ")
        for s in (self.source_style, self.target_style):
            if not 0 <= s < k:
                raise ValueError(f"style index {s} outside [0, {k})")


def swap_style(z: np.ndarray, i: int, j: int, k: int | None = None) -> np.ndarray:
    """Exchange latent coordinates ``i`` and ``j`` along the last axis."""
    z = np.array(z, copy=True)
    limit = z.shape[-1] if k is None else k
    if i == j:
        raise ValueError("swap needs two distinct style dimensions")
    if not (0 <= i < limit and 0 <= j < limit):
        raise IndexError(f"style dimensions ({i}, {j}) outside [0, {limit})")
    z[..., [i, j]] = z[..., [j, i]]
    return z


def lerp(z_a: np.ndarray, z_b: np.ndarray, alpha: float) -> np.ndarray:
    """``(1 - alpha) * z_a + alpha * z_b``, returning ``z_a`` exactly where the inputs agree."""
    z_a, z_b = np.asarray(z_a), np.asarray(z_b)
    mixed = ((1.0 - alpha) * z_a + alpha * z_b).astype(z_a.dtype, copy=False)
    return np.where(z_a == z_b, z_a, mixed)


def interpolate(z_a: np.ndarray, z_b: np.ndarray, steps: int) -> list[np.ndarray]:
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    if np.shape(z_a) != np.shape(z_b):
        raise ValueError(f"latent shapes differ: {np.shape(z_a)} vs {np.shape(z_b)}")
    return [lerp(z_a, z_b, t / (steps - 1)) for t in range(steps)]


# --------------------------------------------------------------------------- decoding to songs


def _majority(rows: Sequence[Sequence[int]]) -> tuple[int, ...]:
    """Per-track most frequent program; ties go to the lowest program number."""
    out = []
    for column in zip(*rows):
        counts = Counter(column)
        best = max(counts.values())
        out.append(min(p for p, c in counts.items() if c == best))
    return tuple(out)


def bars_from_output(model: MidiVae, out: DecoderOutput, song_id: str = "") -> list[BarSample]:
    cfg = model.cfg
    pitch = out.pitch_logits.argmax(-1).reshape(-1, cfg.n_steps, cfg.n_tracks)
    vel = out.velocity.reshape(-1, cfg.n_steps, cfg.n_tracks).astype(np.float32)
    return [BarSample(pitch[i], vel[i], bar_index=i, song_id=song_id) for i in range(len(pitch))]


def decode_song_latents(model: MidiVae, z: np.ndarray, style: StyleLabel, song_id: str = "") -> SongRecord:
    """Decode a ``(n_bars, latent_dim)`` latent progression into a song.

    The song's global programs are the per-track majority vote of the
    per-bar instrument predictions.
    """
    out = decode_latents(model, np.asarray(z, dtype=model.store.dtype))
    per_bar = [tuple(int(p) for p in row) for row in out.instrument_logits.argmax(-1)]
    return SongRecord(bars_from_output(model, out, song_id), _majority(per_bar), style, source_path=song_id)


def song_latents(model: MidiVae, song: SongRecord) -> np.ndarray:
    return encode_songs(model, [song])[0]


def autoencode(model: MidiVae, song: SongRecord) -> SongRecord:
    return decode_song_latents(model, song_latents(model, song), song.style, song.song_id)


def transfer_song(model: MidiVae, song: SongRecord, spec: TransferSpec, style_names: Sequence[str] | None = None) -> SongRecord:
    """Encode, swap the source and target style coordinates, decode."""
    spec.check(model.hp.k)
    z = swap_style(song_latents(model, song), spec.source_style, spec.target_style, model.hp.k)
    name = style_names[spec.target_style] if style_names else str(spec.target_style)
    return decode_song_latents(model, z, StyleLabel(spec.target_style, name), song.song_id)


def medley(model: MidiVae, song_a: SongRecord, song_b: SongRecord, bridge_bars: int) -> SongRecord:
    """Bars of A, then ``bridge_bars`` decoded along the latent line from A's last bar to B's first, then B.

    A single bridge bar is decoded from the midpoint.
    """
    if bridge_bars < 1:
        raise ValueError("bridge_bars must be >= 1")
    if not song_a.bars or not song_b.bars:
        raise ValueError("medley needs two non-empty songs")
    z_a = song_latents(model, song_a)[-1]
    z_b = song_latents(model, song_b)[0]
    path = [lerp(z_a, z_b, 0.5)] if bridge_bars == 1 else interpolate(z_a, z_b, bridge_bars)
    out = decode_latents(model, np.stack(path))
    bridge = bars_from_output(model, out)
    bridge_inst = [tuple(int(p) for p in row) for row in out.instrument_logits.argmax(-1)]
    bars, per_bar = [], []
    for bar in song_a.bars:
        bars.append(bar)
        per_bar.append(tuple(song_a.instruments))
    bars += bridge
    per_bar += bridge_inst
    for bar in song_b.bars:
        bars.append(bar)
        per_bar.append(tuple(song_b.instruments))
    song_id = f"{song_a.song_id}+{song_b.song_id}"
    bars = [BarSample(b.pitch, b.velocity, bar_index=i, song_id=song_id) for i, b in enumerate(bars)]
    return SongRecord(bars, tuple(song_a.instruments), song_a.style, source_path=song_id, bar_instruments=per_bar)


def mixture(model: MidiVae, song_a: SongRecord, song_b: SongRecord, alpha: float) -> SongRecord:
    """Decode the bar-wise blend ``(1 - alpha) z_a + alpha z_b`` over the shorter song's length."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    za, zb = encode_songs(model, [song_a, song_b])
    n = min(len(za), len(zb))
    z = lerp(za[:n], zb[:n], alpha)
    style = song_a.style if alpha <= 0.5 else song_b.style
    return decode_song_latents(model, z, style, f"mix({song_a.song_id},{song_b.song_id},{alpha})")


# --------------------------------------------------------------------------- prior


def empirical_latent_stats(model: MidiVae, songs: Sequence[SongRecord]) -> LatentStats:
    mus = encode_songs(model, songs)
    z = np.concatenate(mus).astype(np.float64)
    if len(z) < 2:
        raise DegenerateStats(f"need at least 2 bars, got {len(z)}")
    sigma = z.std(axis=0)
    if np.any(sigma <= 0):
        raise DegenerateStats(f"{int(np.sum(sigma <= 0))} latent dimensions have zero variance")
    k = model.hp.k
    labels = np.concatenate([[s.style.index] * len(m) for s, m in zip(songs, mus)])
    style_means = np.zeros((k, k))
    for c in range(k):
        if np.any(labels == c):
            style_means[c] = z[labels == c, :k].mean(axis=0)
    return LatentStats(z.mean(axis=0).astype(np.float32), sigma.astype(np.float32), len(z), style_means.astype(np.float32))


def sample_prior(stats: LatentStats, rng: np.random.Generator, style: int | None = None) -> np.ndarray:
    """Draw ``z ~ N(0, diag(sigma_hat^2))``.

    With ``style`` the first ``k`` coordinates are replaced by that style's
    mean style coordinates, an extrapolation of the latent style label.
    """
    z = (rng.standard_normal(len(stats.sigma_hat)) * stats.sigma_hat).astype(np.float32)
    if style is not None:
        if stats.style_means is None:
            raise ValueError("stats carry no per-style means")
        k = stats.style_means.shape[0]
        if not 0 <= style < k:
            raise ValueError(f"style {style} outside [0, {k})")
        z[:k] = stats.style_means[style]
    return z
