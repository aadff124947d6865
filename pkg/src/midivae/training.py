"""Training loop with per-song recurrent state carryover.

Each epoch shuffles the song order; every batch slot then streams one song
bar by bar, keeping its encoder states, and picks up the next song (with
fresh states) when its current one ends.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from midivae import nn_core as nn
from midivae.roll_codec import RollConfig, SongRecord
from midivae.vae_model import Batch, HyperParams, MidiVae, reconstruction_metrics

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "train_total",
    "train_pitch_ce",
    "train_instrument_ce",
    "train_velocity_mse",
    "train_style_ce",
    "train_kl",
    "test_pitch_acc",
    "test_instrument_acc",
    "test_style_acc",
    "test_velocity_mse",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: MidiVae
    history: list[dict[str, float]] = field(default_factory=list)
    stopped_early: bool = False


def iterate_batches(songs: Sequence[SongRecord], batch_size: int, rng: np.random.Generator):
    """Yield ``(batch, slot_ids, fresh_mask)`` for one epoch.

    ``slot_ids`` say which carry rows the batch rows belong to; ``fresh_mask``
    marks rows that start a new song and need zeroed state.
    """
    queue = deque(int(i) for i in rng.permutation(len(songs)))
    slots: list[list[int] | None] = [None] * batch_size  # [song index, next bar]
    while True:
        fresh = np.zeros(batch_size, dtype=bool)
        for s in range(batch_size):
            if slots[s] is None and queue:
                slots[s] = [queue.popleft(), 0]
                fresh[s] = True
        active = [s for s in range(batch_size) if slots[s] is not None]
        if not active:
            return
        bars, inst, style = [], [], []
        for s in active:
            song = songs[slots[s][0]]
            bars.append(song.bars[slots[s][1]])
            inst.append(song.instruments)
            style.append(song.style.index)
        yield Batch.from_bars(bars, inst, style), np.array(active), fresh[active]
        for s in active:
            slots[s][1] += 1
            if slots[s][1] >= len(songs[slots[s][0]].bars):
                slots[s] = None


def train_epoch(model: MidiVae, songs: Sequence[SongRecord], rng: np.random.Generator) -> dict[str, float]:
    hp = model.hp
    carry = model.init_carry(hp.batch_size)
    sums = dict.fromkeys(("total", "pitch_ce", "instrument_ce", "velocity_mse", "style_ce", "kl"), 0.0)
    n = 0
    for batch, slots, fresh in iterate_batches(songs, hp.batch_size, rng):
        sub = {}
        for name, h in carry.items():
            rows = h[slots]
            rows[fresh] = 0.0
            sub[name] = rows
        parts, grads, new_carry = model.loss(batch, rng, sub)
        if not np.isfinite(parts.total):
            raise TrainingDiverged(f"non-finite loss after {model.store.t} steps: {parts}")
        if hp.clip_norm > 0:
            nn.clip_global_norm(grads, hp.clip_norm)
        nn.adam_step(model.store, grads, hp.lr)
        for name in carry:
            carry[name][slots] = new_carry[name]
        for key in sums:
            sums[key] += getattr(parts, key) * len(batch)
        n += len(batch)
    return {f"train_{k}": v / n for k, v in sums.items()}


def train(
    train_songs: Sequence[SongRecord],
    test_songs: Sequence[SongRecord],
    hp: HyperParams,
    cfg: RollConfig = RollConfig(),
    model: MidiVae | None = None,
    callbacks: Sequence[Callable[[dict[str, float]], None]] = (),
) -> TrainResult:
    """Train until ``hp.epochs`` or until test pitch accuracy stalls for ``hp.patience`` epochs."""
    if not train_songs:
        raise ValueError("empty training set")
    styles = {s.style.index for s in train_songs}
    if any(not 0 <= s < hp.k for s in styles):
        raise ValueError(f"style indices {sorted(styles)} outside [0, {hp.k})")
    if len(styles) < hp.k:
        raise ValueError(f"training set covers styles {sorted(styles)}, need all {hp.k}")
    model = model or MidiVae(hp, cfg)
    rng = np.random.default_rng(hp.seed + 1)
    result = TrainResult(model)
    best, since_best = -1.0, 0
    for epoch in range(1, hp.epochs + 1):
        row = {"epoch": epoch, **train_epoch(model, train_songs, rng)}
        if test_songs:
            row.update({f"test_{k}": v for k, v in reconstruction_metrics(model, test_songs).items()})
        result.history.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items()})
        for cb in callbacks:
            cb(row)
        acc = row.get("test_pitch_acc", -row["train_total"])
        if acc > best:
            best, since_best = acc, 0
        else:
            since_best += 1
            if since_best >= hp.patience:
                result.stopped_early = True
                break
    return result


def format_metrics_row(row: dict[str, float]) -> str:
    out = []
    for col in METRIC_COLUMNS:
        v = row.get(col, float("nan"))
        out.append(str(int(v)) if col == "epoch" else format(v, ".9g"))
    return ",".join(out)
