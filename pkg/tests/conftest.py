import numpy as np
import pytest

from midivae.roll_codec import (
    BarSample,
    RollConfig,
    SongRecord,
    StyleLabel,
    HOLD_VALUE,
    validate_song,
    velocity_to_unit,
)

TINY = RollConfig(n_pitches=6, pitch_lo=60, n_steps=4, n_tracks=2, n_instruments=8)


def _random_track(rng, n_steps_total, cfg, density):
    pitch = np.full(n_steps_total, cfg.silence, dtype=np.int64)
    vel = np.zeros(n_steps_total, dtype=np.float32)
    s = 0
    while s < n_steps_total:
        if rng.random() < density:
            length = int(rng.integers(1, 9))
            end = min(n_steps_total, s + length)
            pitch[s:end] = rng.integers(0, cfg.n_pitches)
            vel[s] = velocity_to_unit(int(rng.integers(1, 128)))
            vel[s + 1 : end] = HOLD_VALUE
            s = end
        else:
            s += int(rng.integers(1, 5))
    return pitch, vel


def random_song(rng: np.random.Generator, cfg: RollConfig = RollConfig(), max_bars: int = 6, style: int = 0) -> SongRecord:
    """A SongRecord satisfying every ``validate_song`` invariant, by rejection sampling."""
    while True:
        n_bars = int(rng.integers(1, max_bars + 1))
        total = n_bars * cfg.n_steps
        n_live = int(rng.integers(1, cfg.n_tracks + 1))
        cols = [_random_track(rng, total, cfg, float(rng.uniform(0.2, 0.9))) for _ in range(n_live)]
        onsets = [int(np.sum(v > 0.5)) for _, v in cols]
        order = sorted(range(n_live), key=lambda i: -onsets[i])
        cols = [cols[i] for i in order if onsets[i] > 0]
        programs = [int(rng.integers(0, cfg.n_instruments)) for _ in cols]
        while len(cols) < cfg.n_tracks:
            cols.append((np.full(total, cfg.silence, dtype=np.int64), np.zeros(total, np.float32)))
            programs.append(0)
        pitch = np.stack([c[0] for c in cols], axis=1)
        vel = np.stack([c[1] for c in cols], axis=1)
        bars = [
            BarSample(pitch[b * cfg.n_steps : (b + 1) * cfg.n_steps].copy(), vel[b * cfg.n_steps : (b + 1) * cfg.n_steps].copy(), b, "rand")
            for b in range(n_bars)
        ]
        song = SongRecord(bars, tuple(programs), StyleLabel(style, f"s{style}"), "rand")
        try:
            validate_song(song, cfg)
        except ValueError:
            continue
        return song


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
