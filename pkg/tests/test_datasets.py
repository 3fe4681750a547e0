import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempo_snn.core import SimGrid
from tempo_snn.datasets import (CacheFormatError, MtsXorConfig, SpikeDataset,
                                augment_freq_shift, bin_events, latency_encode, load_shd,
                                load_shd_dir, mtsxor_generate, read_cache, shift_channels,
                                split_train_valid, write_cache)


def test_xor_truth_table():
    # with no noise and a saturating rate, activity in a cue window marks a cue value of 1
    quiet = MtsXorConfig(n_cues_b=3, duration=0.6, background_rate=0.0, rate_active=1e4)
    q = mtsxor_generate(quiet, 200, seed=1)
    npc = quiet.neurons_per_channel
    for i in range(200):
        a_on = q.data[i, :10, :npc].sum() > 0
        assert a_on == bool(q.labels[i])
        for s, e, lab in q.windows[i]:
            b_on = q.data[i, s:e, npc:].sum() > 0
            assert lab == (int(a_on) ^ int(b_on))
    seen = {(int(q.labels[i]), tuple(int(q.data[i, s:e, npc:].sum() > 0)
                                     for s, e, _ in q.windows[i]),
             tuple(q.windows[i, :, 2].tolist())) for i in range(200)}
    assert (1, (1, 0, 1), (0, 1, 0)) in seen


def test_layout_and_windows():
    cfg = MtsXorConfig()
    cue, period, wins = cfg.layout()
    assert (cue, period) == (10, 15)
    assert wins == [(15, 25), (30, 40), (45, 55), (60, 70), (75, 85)]
    ds = mtsxor_generate(cfg, 3, seed=0)
    assert ds.data.shape == (3, 100, 20)
    assert ds.windows.shape == (3, 5, 3)


def test_spikes_only_in_active_cues_without_noise():
    cfg = MtsXorConfig(background_rate=0.0, rate_inactive=0.0)
    ds = mtsxor_generate(cfg, 100, seed=2)
    mask = np.zeros((100, 100, 20), dtype=bool)
    mask[:, :10, :10] = ds.labels[:, None, None] == 1
    for i in range(100):
        for j, (s, e, lab) in enumerate(ds.windows[i]):
            b = lab ^ ds.labels[i]
            mask[i, s:e, 10:] = b == 1
    assert np.all(ds.data[~mask] == 0)


def test_poisson_expectation_per_active_cue():
    cfg = MtsXorConfig(background_rate=0.0)
    ds = mtsxor_generate(cfg, 1000, seed=3)
    active = ds.labels == 1
    totals = ds.data[active, :10, :10].reshape(active.sum(), -1).sum(axis=1)
    assert abs(totals.mean() - 100) <= 5


def test_generator_seeded():
    cfg = MtsXorConfig()
    a = mtsxor_generate(cfg, 10, seed=[1, 2])
    b = mtsxor_generate(cfg, 10, seed=[1, 2])
    assert np.array_equal(a.data, b.data) and np.array_equal(a.windows, b.windows)


def test_config_rejects_bad_rates():
    with pytest.raises(ValueError):
        MtsXorConfig(rate_active=5.0, rate_inactive=10.0)
    with pytest.raises(ValueError):
        MtsXorConfig(n_cues_b=9)


def test_bin_events_basic():
    g = SimGrid(0.01, 100)
    assert np.all(bin_events([], [], g, 5) == 0)
    x = bin_events([0.015], [2], g, 5)
    assert x[1, 2] == 1 and x.sum() == 1
    # exact bin boundaries land in the later bin
    assert bin_events([0.03], [0], g, 1)[3, 0] == 1
    # events at or after the end are dropped
    assert bin_events([1.0, 1.5], [0, 0], g, 1).sum() == 0


def test_bin_events_naive_histogram():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 1.2, 1000)
    c = rng.integers(0, 16, 1000)
    g = SimGrid(0.01, 100)
    x = bin_events(t, c, g, 16)
    ref = np.zeros((100, 16), dtype=int)
    for ti, ci in zip(t, c):
        k = int(np.floor(round(ti / 0.01, 9)))
        if k < 100:
            ref[k, ci] += 1
    assert np.array_equal(x, ref)


def test_bin_events_saturates():
    g = SimGrid(0.01, 2)
    assert bin_events(np.zeros(300), np.zeros(300, int), g, 1)[0, 0] == 255


def test_bin_events_validation():
    g = SimGrid(0.01, 10)
    with pytest.raises(ValueError):
        bin_events([0.1], [5], g, 5)
    with pytest.raises(ValueError):
        bin_events([-0.1], [0], g, 5)


def _write_h5(path, n, rng, n_classes=20):
    h5py = pytest.importorskip("h5py")
    times, units = [], []
    for _ in range(n):
        k = rng.integers(50, 300)
        times.append(np.sort(rng.uniform(0, 1.4, k)).astype(np.float32))
        units.append(rng.integers(0, 700, k).astype(np.uint16))
    labels = rng.integers(0, n_classes, n).astype(np.uint8)
    with h5py.File(path, "w") as f:
        vt = h5py.vlen_dtype(np.float32)
        vu = h5py.vlen_dtype(np.uint16)
        dt_ = f.create_dataset("spikes/times", (n,), dtype=vt)
        du = f.create_dataset("spikes/units", (n,), dtype=vu)
        for i in range(n):
            dt_[i] = times[i]
            du[i] = units[i]
        f.create_dataset("labels", data=labels)
    return times, units, labels


def test_load_shd_synthetic(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "shd_train.h5"
    times, units, labels = _write_h5(path, 12, rng)
    ds = load_shd(path)
    assert ds.data.shape == (12, 100, 700) and ds.n_classes == 20
    assert np.array_equal(ds.labels, labels)
    n_raw_kept = sum(int(np.sum(np.floor(np.round(t.astype(np.float64) / 0.01, 9)) < 100))
                     for t in times)
    assert int(ds.data.sum(dtype=np.int64)) == n_raw_kept
    assert np.array_equal(np.bincount(ds.labels, minlength=20),
                          np.bincount(labels, minlength=20))
    again = load_shd(path)
    assert np.array_equal(again.data, ds.data)


def test_load_shd_dir_and_missing(tmp_path):
    rng = np.random.default_rng(1)
    _write_h5(tmp_path / "shd_train.h5", 4, rng)
    _write_h5(tmp_path / "shd_test.h5", 3, rng)
    tr, te = load_shd_dir(tmp_path)
    assert len(tr) == 4 and len(te) == 3
    with pytest.raises((FileNotFoundError, OSError)):
        load_shd(tmp_path / "nope.h5")


def test_cache_round_trip(tmp_path):
    ds = mtsxor_generate(MtsXorConfig(), 50, seed=0)
    p = tmp_path / "a.tsnc"
    write_cache(ds, p)
    back = read_cache(p)
    assert np.array_equal(back.data, ds.data) and np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.windows, ds.windows)
    write_cache(back, tmp_path / "b.tsnc")
    assert p.read_bytes() == (tmp_path / "b.tsnc").read_bytes()
    plain = SpikeDataset(ds.data, ds.labels, ds.grid, 2)
    write_cache(plain, tmp_path / "c.tsnc")
    c = read_cache(tmp_path / "c.tsnc")
    assert c.windows is None and c.label_mode == 0


def test_cache_header_layout(tmp_path):
    import struct
    ds = mtsxor_generate(MtsXorConfig(), 4, seed=0)
    p = tmp_path / "a.tsnc"
    write_cache(ds, p)
    raw = p.read_bytes()
    assert raw[:4] == b"TSNC"
    assert struct.unpack_from("<IIIIBI", raw, 4) == (1, 4, 100, 20, 1, 5)
    assert len(raw) == 25 + 4 * 100 * 20 + 4 * 4 + 12 * 4 * 5 + 4


def test_cache_corruption_detected(tmp_path):
    ds = mtsxor_generate(MtsXorConfig(), 8, seed=0)
    p = tmp_path / "a.tsnc"
    write_cache(ds, p)
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(CacheFormatError, match="checksum"):
        read_cache(p)
    p.write_bytes(bytes(raw[:-10]))
    with pytest.raises(CacheFormatError):
        read_cache(p)
    p.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CacheFormatError, match="magic"):
        read_cache(p)


def test_shift_channels():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, size=(10, 700)).astype(np.uint8)
    assert np.array_equal(shift_channels(x, 0), x)
    y = shift_channels(x, 3)
    assert np.all(y[:, :3] == 0)
    assert np.array_equal(y[:, 3:], x[:, :697])
    z = shift_channels(x, -5)
    assert np.array_equal(z[:, :695], x[:, 5:])


@settings(max_examples=50, deadline=None)
@given(st.integers(-40, 40), st.integers(0, 2**31))
def test_shift_mass_conservation(k, seed):
    rng = np.random.default_rng(seed)
    x = (rng.random((5, 60)) < 0.1).astype(np.uint8)
    y = shift_channels(x, k)
    assert y.sum() <= x.sum()
    lost = x[:, 60 - k:].sum() if k > 0 else (x[:, :-k].sum() if k < 0 else 0)
    assert y.sum() == x.sum() - lost


def test_augment_batch_independent_draws():
    rng = np.random.default_rng(0)
    x = np.zeros((4, 3, 50), dtype=np.uint8)
    x[:, :, 25] = 1
    y = augment_freq_shift(x, rng)
    positions = [int(np.argmax(y[i, 0])) if y[i].any() else None for i in range(4)]
    assert len(set(positions)) > 1


def test_latency_encode():
    x = latency_encode(np.array([1.0, 0.5, 0.0]), 50)
    assert x.shape == (50, 3)
    assert x[0, 0] == 1
    assert x[25, 1] == 1
    assert x[49, 2] == 1
    assert np.all(x.sum(axis=0) == 1)
    s = latency_encode(np.array([0.0, 0.3]), 50, suppress_zero=True)
    assert s[:, 0].sum() == 0 and s[:, 1].sum() == 1
    with pytest.raises(ValueError):
        latency_encode(np.array([1.2]))


def test_split_is_partition():
    ds = mtsxor_generate(MtsXorConfig(), 100, seed=0)
    tr, va = split_train_valid(ds, 0.2, seed=1)
    assert len(tr) == 80 and len(va) == 20
    rows = {r.tobytes() for r in np.concatenate([tr.data, va.data])}
    assert len(rows) == len({r.tobytes() for r in ds.data})
