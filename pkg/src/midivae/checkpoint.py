"""Binary ``MVAE`` checkpoint container.

Layout (all integers little-endian)::

    b"MVAE"                       magic
    u32 version                   currently 1
    u32 n_tensors
    n_tensors x {
        u32 name_len, name bytes (UTF-8)
        u32 rank, rank x u32 dims
        prod(dims) x f32 values (C order)
    }
    -- trailing section --
    u32 n_pitches, u32 pitch_lo, u32 n_steps, u32 n_tracks, u32 n_instruments
    u8  has_stats
    if has_stats:
        u64 sample_count, u32 latent_dim, u32 k
        latent_dim x f32 mu_hat, latent_dim x f32 sigma_hat, k*k x f32 style_means
    u32 meta_len, meta_len bytes of UTF-8 JSON {"hyperparams": {...}, "styles": [...], ...}

The same container stores the evaluation classifiers (no stats, meta
names the classifier features).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from midivae.nn_core import ParamStore
from midivae.roll_codec import RollConfig

MAGIC = b"MVAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class LatentStats:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    sample_count: int
    # mean of the k style coordinates over training bars of each style, (k, k)
    style_means: np.ndarray | None = None

    def __post_init__(self) -> None:
        if np.any(~(self.sigma_hat > 0)):
            raise ValueError("sigma_hat must be strictly positive")
        if self.sample_count < 2:
            raise ValueError("latent statistics need at least 2 encodings")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    cfg: RollConfig
    stats: LatentStats | None = None
    meta: dict = field(default_factory=dict)


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def dumps(ck: Checkpoint) -> bytes:
    out = bytearray(MAGIC + _u32(VERSION) + _u32(len(ck.tensors)))
    for name, t in ck.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t, dtype="<f4")
        out += _u32(len(raw)) + raw + _u32(arr.ndim)
        out += b"".join(_u32(d) for d in arr.shape)
        out += arr.tobytes()
    c = ck.cfg
    out += b"".join(_u32(v) for v in (c.n_pitches, c.pitch_lo, c.n_steps, c.n_tracks, c.n_instruments))
    if ck.stats is None:
        out += b"\x00"
    else:
        s = ck.stats
        k = 0 if s.style_means is None else s.style_means.shape[0]
        out += b"\x01" + struct.pack("<Q", s.sample_count) + _u32(len(s.mu_hat)) + _u32(k)
        out += np.asarray(s.mu_hat, "<f4").tobytes() + np.asarray(s.sigma_hat, "<f4").tobytes()
        if k:
            out += np.asarray(s.style_means, "<f4").tobytes()
    meta = json.dumps(ck.meta, sort_keys=True).encode("utf-8")
    out += _u32(len(meta)) + meta
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def loads(data: bytes) -> Checkpoint:
    cur = _Cursor(data)
    if cur.take(4) != MAGIC:
        raise CheckpointError("not an MVAE checkpoint")
    version = cur.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        shape = tuple(cur.u32() for _ in range(cur.u32()))
        tensors[name] = cur.f32(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    cfg = RollConfig(*(cur.u32() for _ in range(5)))
    stats = None
    if cur.take(1) == b"\x01":
        (count,) = struct.unpack("<Q", cur.take(8))
        dim, k = cur.u32(), cur.u32()
        mu, sigma = cur.f32(dim), cur.f32(dim)
        style_means = cur.f32(k * k).reshape(k, k) if k else None
        stats = LatentStats(mu, sigma, int(count), style_means)
    meta = json.loads(cur.take(cur.u32()).decode("utf-8"))
    if cur.pos != len(data):
        raise CheckpointError(f"{len(data) - cur.pos} trailing bytes after checkpoint")
    return Checkpoint(tensors, cfg, stats, meta)


def save(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return loads(path.read_bytes())


def store_from_tensors(tensors: dict[str, np.ndarray]) -> ParamStore:
    store = ParamStore(np.float32)
    for name, t in tensors.items():
        store.add(name, t)
    return store
