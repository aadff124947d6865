"""The MIDI-VAE: three GRU encoder/decoder pairs around one shared latent space.

Encoders read the unrolled pitch and velocity frames of a bar and the
per-track program sequence; their final states are concatenated and mapped
to ``(mu_z, log sigma_z^2)``. The first ``k`` latent coordinates double as
style logits. Decoders are non-autoregressive: each starts from a projection
of ``z`` and reads only positional inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from midivae import nn_core as nn
from midivae.roll_codec import BarSample, RollConfig, SongRecord


@dataclass
class HyperParams:
    lambda_p: float = 1.0
    lambda_i: float = 1.0
    lambda_v: float = 1.0
    lambda_s: float = 0.1
    beta: float = 0.1
    sigma_eps: float = 0.01
    latent_dim: int = 256
    gru_state: int = 256
    pitch_layers: int = 2
    other_layers: int = 1
    fc_size: int = 256
    fc_layers: int = 2
    lr: float = 0.0002
    clip_norm: float = 0.0  # global gradient norm limit, 0 disables
    batch_size: int = 32
    k: int = 2
    epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("lambda_p", "lambda_i", "lambda_v", "lambda_s", "beta", "sigma_eps", "lr", "clip_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 1 <= self.k <= self.latent_dim:
            raise ValueError(f"k={self.k} must be in [1, latent_dim={self.latent_dim}]")
        if min(self.gru_state, self.pitch_layers, self.other_layers, self.fc_layers, self.batch_size) < 1:
            raise ValueError("sizes and layer counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in d.items():
            if key not in known:
                raise KeyError(f"unknown hyperparameter {key!r}")
            out[key] = int(value) if known[key] == "int" else float(value)
        return cls(**out)


@dataclass
class LossBreakdown:
    pitch_ce: float
    instrument_ce: float
    velocity_mse: float
    style_ce: float
    kl: float
    total: float


@dataclass
class Batch:
    pitch: np.ndarray  # (B, n_steps, n_tracks) int
    velocity: np.ndarray  # (B, n_steps, n_tracks) float
    instruments: np.ndarray  # (B, n_tracks) int
    style: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return len(self.style)

    @classmethod
    def from_bars(cls, bars: Sequence[BarSample], instruments: Sequence, styles: Sequence[int]) -> "Batch":
        return cls(
            np.stack([b.pitch for b in bars]).astype(np.int64),
            np.stack([b.velocity for b in bars]).astype(np.float32),
            np.asarray(instruments, dtype=np.int64).reshape(len(bars), -1),
            np.asarray(styles, dtype=np.int64),
        )


@dataclass
class DecoderOutput:
    pitch_logits: np.ndarray  # (B, n_frames, vocab)
    velocity: np.ndarray  # (B, n_frames) in [0, 1]
    instrument_logits: np.ndarray  # (B, n_tracks, n_instruments)

    def pitch_probs(self) -> np.ndarray:
        return nn.softmax(self.pitch_logits)

    def instrument_probs(self) -> np.ndarray:
        return nn.softmax(self.instrument_logits)


def classify_style(z: np.ndarray, k: int) -> np.ndarray:
    """Parameter-free softmax over the first ``k`` latent coordinates."""
    z = np.asarray(z)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k={k} outside 1..{z.shape[-1]}")
    return nn.softmax(z[..., :k])


class MidiVae:
    """Parameters plus forward/backward passes of the model.

    ``carry`` dictionaries map each encoder GRU layer name to its ``(B, H)``
    state; they let consecutive bars of a song share recurrent context.
    """

    def __init__(self, hp: HyperParams, cfg: RollConfig = RollConfig(), store: nn.ParamStore | None = None):
        self.hp = hp
        self.cfg = cfg
        self.store = store if store is not None else self._init_params(np.random.default_rng(hp.seed))

    # ----------------------------------------------------------------- structure

    @property
    def encoder_layers(self) -> list[str]:
        hp = self.hp
        return (
            [f"enc_pitch.{i}" for i in range(hp.pitch_layers)]
            + [f"enc_vel.{i}" for i in range(hp.other_layers)]
            + [f"enc_inst.{i}" for i in range(hp.other_layers)]
        )

    def _init_params(self, rng: np.random.Generator) -> nn.ParamStore:
        hp, cfg = self.hp, self.cfg
        H, L = hp.gru_state, hp.latent_dim
        pos = cfg.n_steps + cfg.n_tracks
        s = nn.ParamStore(np.float32)
        for i in range(hp.pitch_layers):
            nn.add_gru(s, f"enc_pitch.{i}", cfg.vocab + cfg.n_tracks if i == 0 else H, H, rng)
        for i in range(hp.other_layers):
            nn.add_gru(s, f"enc_vel.{i}", 1 + cfg.n_tracks if i == 0 else H, H, rng)
        for i in range(hp.other_layers):
            nn.add_gru(s, f"enc_inst.{i}", cfg.n_instruments if i == 0 else H, H, rng)
        n_in = 3 * H
        for i in range(hp.fc_layers):
            nn.add_dense(s, f"trunk.{i}", n_in, hp.fc_size, rng)
            n_in = hp.fc_size
        nn.add_dense(s, "head.mu", n_in, L, rng)
        nn.add_dense(s, "head.logvar", n_in, L, rng)
        nn.add_dense(s, "dec_pitch.proj", L, hp.pitch_layers * H, rng)
        for i in range(hp.pitch_layers):
            nn.add_gru(s, f"dec_pitch.{i}", pos if i == 0 else H, H, rng)
        nn.add_dense(s, "dec_pitch.out", H, cfg.vocab, rng)
        nn.add_dense(s, "dec_vel.proj", L, hp.other_layers * H, rng)
        for i in range(hp.other_layers):
            nn.add_gru(s, f"dec_vel.{i}", pos if i == 0 else H, H, rng)
        nn.add_dense(s, "dec_vel.out", H, 1, rng)
        nn.add_dense(s, "dec_inst.proj", L, hp.other_layers * H, rng)
        for i in range(hp.other_layers):
            nn.add_gru(s, f"dec_inst.{i}", cfg.n_tracks if i == 0 else H, H, rng)
        nn.add_dense(s, "dec_inst.out", H, cfg.n_instruments, rng)
        return s

    def init_carry(self, batch_size: int) -> dict[str, np.ndarray]:
        dtype = self.store.dtype
        return {name: np.zeros((batch_size, self.hp.gru_state), dtype) for name in self.encoder_layers}

    # ----------------------------------------------------------------- inputs

    def _encoder_inputs(self, batch: Batch):
        cfg = self.cfg
        B = len(batch)
        dtype = self.store.dtype
        F = cfg.n_frames
        track_1h = np.tile(np.eye(cfg.n_tracks, dtype=dtype), (cfg.n_steps, 1))  # (F, n_tracks)
        track_1h = np.broadcast_to(track_1h[:, None, :], (F, B, cfg.n_tracks))
        pitch_idx = batch.pitch.reshape(B, F).T
        pitch_in = np.concatenate([np.eye(cfg.vocab, dtype=dtype)[pitch_idx], track_1h], axis=-1)
        vel = batch.velocity.reshape(B, F).T.astype(dtype)[..., None]
        vel_in = np.concatenate([vel, track_1h], axis=-1)
        inst_in = np.eye(cfg.n_instruments, dtype=dtype)[batch.instruments.T]
        return {"enc_pitch": pitch_in, "enc_vel": vel_in, "enc_inst": inst_in}

    def _positional(self, B: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        dtype = self.store.dtype
        steps = np.repeat(np.eye(cfg.n_steps, dtype=dtype), cfg.n_tracks, axis=0)
        tracks = np.tile(np.eye(cfg.n_tracks, dtype=dtype), (cfg.n_steps, 1))
        frame_pos = np.concatenate([steps, tracks], axis=1)[:, None, :]
        track_pos = np.eye(cfg.n_tracks, dtype=dtype)[:, None, :]
        return (
            np.broadcast_to(frame_pos, (cfg.n_frames, B, frame_pos.shape[-1])),
            np.broadcast_to(track_pos, (cfg.n_tracks, B, cfg.n_tracks)),
        )

    # ----------------------------------------------------------------- encoder

    def _stack_fw(self, prefix: str, n_layers: int, xs: np.ndarray, h0s: list[np.ndarray]):
        p = self.store
        caches = []
        for i in range(n_layers):
            name = f"{prefix}.{i}"
            xs, c = nn.gru_forward(p[f"{name}.W"], p[f"{name}.U"], p[f"{name}.b"], xs, h0s[i])
            caches.append(c)
        return xs, caches

    def _stack_bw(self, prefix: str, dhs: np.ndarray, caches, grads) -> list[np.ndarray]:
        dh0s = [None] * len(caches)
        for i in range(len(caches) - 1, -1, -1):
            name = f"{prefix}.{i}"
            dhs, dW, dU, db, dh0s[i] = nn.gru_backward(dhs, caches[i])
            grads[f"{name}.W"] += dW
            grads[f"{name}.U"] += dU
            grads[f"{name}.b"] += db
        return dh0s

    def _encode_fw(self, batch: Batch, carry: dict[str, np.ndarray]):
        hp = self.hp
        p = self.store
        inputs = self._encoder_inputs(batch)
        finals, caches, new_carry = [], {}, {}
        for prefix, n in (("enc_pitch", hp.pitch_layers), ("enc_vel", hp.other_layers), ("enc_inst", hp.other_layers)):
            h0s = [carry[f"{prefix}.{i}"] for i in range(n)]
            hs, caches[prefix] = self._stack_fw(prefix, n, inputs[prefix], h0s)
            for i, c in enumerate(caches[prefix]):
                new_carry[f"{prefix}.{i}"] = c.hs[-1]
            finals.append(hs[-1])
        x = np.concatenate(finals, axis=-1)
        trunk = []
        for i in range(hp.fc_layers):
            x, c = nn.dense_forward(p[f"trunk.{i}.W"], p[f"trunk.{i}.b"], x, "tanh")
            trunk.append(c)
        mu, c_mu = nn.dense_forward(p["head.mu.W"], p["head.mu.b"], x, "linear")
        logvar, c_lv = nn.dense_forward(p["head.logvar.W"], p["head.logvar.b"], x, "linear")
        return mu, logvar, new_carry, (caches, trunk, c_mu, c_lv, [f.shape for f in finals])

    def _encode_bw(self, dmu, dlogvar, cache, grads) -> None:
        caches, trunk, c_mu, c_lv, final_shapes = cache
        hp = self.hp
        dx, dW, db = nn.dense_backward(dmu, c_mu)
        grads["head.mu.W"] += dW
        grads["head.mu.b"] += db
        dx2, dW, db = nn.dense_backward(dlogvar, c_lv)
        grads["head.logvar.W"] += dW
        grads["head.logvar.b"] += db
        dx = dx + dx2
        for i in range(hp.fc_layers - 1, -1, -1):
            dx, dW, db = nn.dense_backward(dx, trunk[i])
            grads[f"trunk.{i}.W"] += dW
            grads[f"trunk.{i}.b"] += db
        H = hp.gru_state
        for j, prefix in enumerate(("enc_pitch", "enc_vel", "enc_inst")):
            top = caches[prefix][-1]
            dhs = np.zeros_like(top.hs[1:])
            dhs[-1] = dx[:, j * H : (j + 1) * H]
            self._stack_bw(prefix, dhs, caches[prefix], grads)

    def encode(self, batch: Batch, carry: dict[str, np.ndarray] | None = None):
        """Return ``(mu_z, sigma_z, new_carry)`` for a batch of bars."""
        carry = carry if carry is not None else self.init_carry(len(batch))
        mu, logvar, new_carry, _ = self._encode_fw(batch, carry)
        return mu, np.exp(0.5 * logvar), new_carry

    # ----------------------------------------------------------------- decoder

    def _decode_fw(self, z: np.ndarray):
        hp, cfg = self.hp, self.cfg
        p = self.store
        H = hp.gru_state
        B = z.shape[0]
        frame_pos, track_pos = self._positional(B)
        out, caches = {}, {}
        for prefix, n, xs in (
            ("dec_pitch", hp.pitch_layers, frame_pos),
            ("dec_vel", hp.other_layers, frame_pos),
            ("dec_inst", hp.other_layers, track_pos),
        ):
            h0, c_proj = nn.dense_forward(p[f"{prefix}.proj.W"], p[f"{prefix}.proj.b"], z, "tanh")
            hs, c_stack = self._stack_fw(prefix, n, xs, [h0[:, i * H : (i + 1) * H] for i in range(n)])
            act = "sigmoid" if prefix == "dec_vel" else "linear"
            y, c_out = nn.dense_forward(p[f"{prefix}.out.W"], p[f"{prefix}.out.b"], hs, act)
            out[prefix] = y
            caches[prefix] = (c_proj, c_stack, c_out)
        result = DecoderOutput(
            pitch_logits=out["dec_pitch"].transpose(1, 0, 2),
            velocity=out["dec_vel"][..., 0].T,
            instrument_logits=out["dec_inst"].transpose(1, 0, 2),
        )
        return result, caches

    def _decode_bw(self, d_out: dict[str, np.ndarray], caches, grads) -> np.ndarray:
        """``d_out`` holds time-major gradients of the three decoder outputs; returns dz."""
        dz = None
        for prefix, (c_proj, c_stack, c_out) in caches.items():
            dhs, dW, db = nn.dense_backward(d_out[prefix], c_out)
            grads[f"{prefix}.out.W"] += dW
            grads[f"{prefix}.out.b"] += db
            dh0s = self._stack_bw(prefix, dhs, c_stack, grads)
            dz_part, dW, db = nn.dense_backward(np.concatenate(dh0s, axis=-1), c_proj)
            grads[f"{prefix}.proj.W"] += dW
            grads[f"{prefix}.proj.b"] += db
            dz = dz_part if dz is None else dz + dz_part
        return dz

    def decode(self, z: np.ndarray) -> DecoderOutput:
        z = np.atleast_2d(np.asarray(z, dtype=self.store.dtype))
        return self._decode_fw(z)[0]

    # ----------------------------------------------------------------- loss

    def loss(
        self,
        batch: Batch,
        rng: np.random.Generator,
        carry: dict[str, np.ndarray] | None = None,
        with_grads: bool = True,
    ):
        """Full weighted objective on one batch.

        Returns ``(LossBreakdown, grads or None, new_carry)``. Carried states
        enter as constants: no gradient flows into the previous bar.
        """
        hp, cfg = self.hp, self.cfg
        B = len(batch)
        F = cfg.n_frames
        carry = carry if carry is not None else self.init_carry(B)
        mu, logvar, new_carry, enc_cache = self._encode_fw(batch, carry)
        sigma = np.exp(0.5 * logvar)
        z, eps = nn.reparameterize(mu, sigma, rng, hp.sigma_eps)
        out, dec_cache = self._decode_fw(z)

        pitch_target = batch.pitch.reshape(B, F).T
        pitch_ce, d_pitch, _ = nn.softmax_cross_entropy(out.pitch_logits.transpose(1, 0, 2), pitch_target)
        inst_ce, d_inst, _ = nn.softmax_cross_entropy(out.instrument_logits.transpose(1, 0, 2), batch.instruments.T)
        vel_target = batch.velocity.reshape(B, F).T
        vel_pred = out.velocity.T
        vel_diff = vel_pred - vel_target
        vel_mse = float(np.mean(vel_diff * vel_diff))
        style_ce, d_style, _ = nn.softmax_cross_entropy(z[:, : hp.k], batch.style)
        kl_each, dmu_kl, dlv_kl = nn.kl_from_logvar(mu, logvar)
        kl = float(kl_each.mean())
        total = (
            hp.lambda_p * pitch_ce
            + hp.lambda_i * inst_ce
            + hp.lambda_v * vel_mse
            + hp.lambda_s * style_ce
            + hp.beta * kl
        )
        parts = LossBreakdown(float(pitch_ce), float(inst_ce), vel_mse, float(style_ce), kl, float(total))
        if not with_grads:
            return parts, None, new_carry

        grads = self.store.zero_grads()
        dtype = self.store.dtype
        d_out = {
            "dec_pitch": (hp.lambda_p * d_pitch).astype(dtype, copy=False),
            "dec_vel": (hp.lambda_v * 2.0 * vel_diff / vel_diff.size)[..., None].astype(dtype, copy=False),
            "dec_inst": (hp.lambda_i * d_inst).astype(dtype, copy=False),
        }
        dz = self._decode_bw(d_out, dec_cache, grads)
        dz[:, : hp.k] += hp.lambda_s * d_style
        dmu = dz + hp.beta * dmu_kl / B
        dlogvar = dz * eps * sigma * 0.5 + hp.beta * dlv_kl / B
        self._encode_bw(dmu.astype(dtype, copy=False), dlogvar.astype(dtype, copy=False), enc_cache, grads)
        return parts, grads, new_carry


# --------------------------------------------------------------------------- song-level helpers


def encode_songs(model: MidiVae, songs: Sequence[SongRecord], chunk: int = 256) -> list[np.ndarray]:
    """Encode every bar of every song with state carried across bars.

    Songs are processed side by side, one bar index at a time. Returns one
    ``(n_bars, latent_dim)`` array of ``mu_z`` per song.
    """
    out: list[np.ndarray] = [None] * len(songs)
    for lo in range(0, len(songs), chunk):
        group = list(songs[lo : lo + chunk])
        carry = model.init_carry(len(group))
        mus = [[] for _ in group]
        for t in range(max(len(s.bars) for s in group)):
            active = [i for i, s in enumerate(group) if t < len(s.bars)]
            batch = Batch.from_bars(
                [group[i].bars[t] for i in active],
                [group[i].instruments for i in active],
                [group[i].style.index for i in active],
            )
            sub = {k: v[active] for k, v in carry.items()}
            mu, _, new = model.encode(batch, sub)
            for k in carry:
                carry[k][active] = new[k]
            for j, i in enumerate(active):
                mus[i].append(mu[j])
        for i, m in enumerate(mus):
            out[lo + i] = np.stack(m)
    return out


def decode_latents(model: MidiVae, z: np.ndarray, chunk: int = 512) -> DecoderOutput:
    parts = [model.decode(z[i : i + chunk]) for i in range(0, len(z), chunk)]
    return DecoderOutput(
        np.concatenate([p.pitch_logits for p in parts]),
        np.concatenate([p.velocity for p in parts]),
        np.concatenate([p.instrument_logits for p in parts]),
    )


def reconstruction_metrics(model: MidiVae, songs: Sequence[SongRecord]) -> dict[str, float]:
    """Per-head accuracies (pitch, instrument, style) and velocity MSE, using ``mu_z``."""
    if not songs:
        raise ValueError("no songs to evaluate")
    cfg, k = model.cfg, model.hp.k
    mus = encode_songs(model, songs)
    z = np.concatenate(mus)
    out = decode_latents(model, z)
    pitch = np.concatenate([s.pitch_grid() for s in songs]).reshape(len(z), cfg.n_frames)
    vel = np.concatenate([s.velocity_grid() for s in songs]).reshape(len(z), cfg.n_frames)
    inst = np.concatenate([[s.instruments] * len(s.bars) for s in songs])
    style = np.concatenate([[s.style.index] * len(s.bars) for s in songs])
    return {
        "pitch_acc": float(np.mean(out.pitch_logits.argmax(-1) == pitch)),
        "instrument_acc": float(np.mean(out.instrument_logits.argmax(-1) == inst)),
        "style_acc": float(np.mean(z[:, :k].argmax(-1) == style)),
        "velocity_mse": float(np.mean((out.velocity - vel) ** 2)),
    }
