"""Spike datasets: the MTS-XOR generator, SHD/SSC ingestion, a dense binary
cache, channel-shift augmentation and latency coding.

All tensors are ``(samples, time, channels)`` of small non-negative spike
counts stored as ``uint8``.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import SimGrid

SHD_CHANNELS = 700
COUNT_MAX = 255


class CacheFormatError(ValueError):
    pass


@dataclass
class SpikeDataset:
    data: np.ndarray  # (n, T, C) uint8
    labels: np.ndarray  # (n,) int64; sample label (MTS-XOR: channel-A cue value)
    grid: SimGrid
    n_classes: int
    windows: Optional[np.ndarray] = None  # (n, W, 3) int64 rows of (start, end, label)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"data must be (n, T, C), got {self.data.shape}")
        if self.data.shape[1] != self.grid.T:
            raise ValueError("data length does not match the grid")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError("one label per sample is required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ValueError("label outside class range")
        if self.windows is not None:
            self.windows = np.asarray(self.windows, dtype=np.int64)
            w = self.windows
            if w.ndim != 3 or w.shape[0] != len(self) or w.shape[2] != 3:
                raise ValueError("windows must be (n, W, 3)")

    def __len__(self):
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def label_mode(self) -> int:
        return 0 if self.windows is None else 1

    def subset(self, idx) -> "SpikeDataset":
        idx = np.asarray(idx)
        return SpikeDataset(self.data[idx], self.labels[idx], self.grid, self.n_classes,
                            None if self.windows is None else self.windows[idx])


def split_train_valid(ds: SpikeDataset, valid_frac=0.2, seed=0):
    """Random ``1 - valid_frac`` / ``valid_frac`` partition of a dataset."""
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(round(valid_frac * n))
    return ds.subset(np.sort(order[n_valid:])), ds.subset(np.sort(order[:n_valid]))


# ---------------------------------------------------------------------------
# MTS-XOR


@dataclass(frozen=True)
class MtsXorConfig:
    dt: float = 0.01
    duration: float = 1.0
    neurons_per_channel: int = 10
    cue_duration: float = 0.1
    gap: float = 0.05
    n_cues_b: int = 5
    rate_active: float = 100.0
    rate_inactive: float = 0.0
    background_rate: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if min(self.rate_active, self.rate_inactive, self.background_rate) < 0:
            raise ValueError("rates must be non-negative")
        if not self.rate_active > self.rate_inactive:
            raise ValueError("rate_active must exceed rate_inactive")
        if self.neurons_per_channel < 1 or self.n_cues_b < 1:
            raise ValueError("neurons_per_channel and n_cues_b must be >= 1")
        _, _, windows = self.layout()
        if windows[-1][1] > self.steps:
            raise ValueError(f"{self.n_cues_b} channel-B cues do not fit in "
                             f"{self.duration} s")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def grid(self) -> SimGrid:
        return SimGrid(self.dt, self.steps)

    def layout(self):
        """(cue steps, period steps, list of channel-B (start, end) windows)."""
        cue = int(round(self.cue_duration / self.dt))
        period = cue + int(round(self.gap / self.dt))
        return cue, period, [(period * (i + 1), period * (i + 1) + cue)
                             for i in range(self.n_cues_b)]


def mtsxor_generate(config: MtsXorConfig, n_samples: int, seed=None) -> SpikeDataset:
    """Channel A (first population) shows one binary cue at t = 0; channel B
    shows ``n_cues_b`` later cues.  Each B window is labelled A xor B_i."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    npc = config.neurons_per_channel
    T = config.steps
    cue, _, b_windows = config.layout()
    a_val = rng.integers(0, 2, size=n_samples)
    b_val = rng.integers(0, 2, size=(n_samples, config.n_cues_b))

    lam = np.zeros((n_samples, T, 2 * npc))
    lam += config.background_rate * config.dt

    def rate(v):
        return np.where(v == 1, config.rate_active, config.rate_inactive) * config.dt

    lam[:, :cue, :npc] += rate(a_val)[:, None, None]
    for i, (s, e) in enumerate(b_windows):
        lam[:, s:e, npc:] += rate(b_val[:, i])[:, None, None]
    counts = rng.poisson(lam)
    data = np.minimum(counts, COUNT_MAX).astype(np.uint8)

    windows = np.empty((n_samples, config.n_cues_b, 3), dtype=np.int64)
    for i, (s, e) in enumerate(b_windows):
        windows[:, i, 0] = s
        windows[:, i, 1] = e
        windows[:, i, 2] = a_val ^ b_val[:, i]
    return SpikeDataset(data, a_val, config.grid, 2, windows)


# ---------------------------------------------------------------------------
# event binning and SHD / SSC


def bin_events(event_times, event_channels, grid: SimGrid, channels: int) -> np.ndarray:
    """Histogram events into a (T, channels) uint8 count tensor.

    Bin index is floor(t / dt); events at or after T * dt are dropped and
    counts saturate at 255.
    """
    times = np.asarray(event_times, dtype=np.float64).reshape(-1)
    chans = np.asarray(event_channels).reshape(-1).astype(np.int64)
    if times.shape != chans.shape:
        raise ValueError("event_times and event_channels differ in length")
    if np.any(times < 0) or np.any(~np.isfinite(times)):
        raise ValueError("event times must be finite and non-negative")
    if np.any(chans < 0) or np.any(chans >= channels):
        raise ValueError(f"event channel outside [0, {channels})")
    # rounding first keeps t = k * dt from landing in bin k - 1
    bins = np.floor(np.round(times / grid.dt, 9)).astype(np.int64)
    keep = bins < grid.T
    flat = bins[keep] * channels + chans[keep]
    counts = np.bincount(flat, minlength=grid.T * channels)
    return np.minimum(counts, COUNT_MAX).astype(np.uint8).reshape(grid.T, channels)


def _default_classes(path):
    return 35 if "ssc" in os.path.basename(str(path)).lower() else 20


def load_shd(path, grid: SimGrid = SimGrid(0.01, 100), n_classes=None,
             channels=SHD_CHANNELS) -> SpikeDataset:
    """Bin one SHD/SSC HDF5 file (``spikes/times``, ``spikes/units``, ``labels``).

    ``n_classes`` defaults to 35 when the file name contains ``ssc`` and to 20
    otherwise.
    """
    import h5py

    if n_classes is None:
        n_classes = _default_classes(path)
    with h5py.File(path, "r") as f:
        for key in ("spikes/times", "spikes/units", "labels"):
            if key not in f:
                raise KeyError(f"{path}: missing dataset {key!r}")
        times = f["spikes/times"]
        units = f["spikes/units"]
        labels = np.asarray(f["labels"][()], dtype=np.int64)
        n = labels.shape[0]
        if len(times) != n or len(units) != n:
            raise ValueError(f"{path}: spikes and labels disagree in length")
        if np.any(labels < 0) or np.any(labels >= n_classes):
            raise ValueError(f"{path}: label outside [0, {n_classes})")
        data = np.empty((n, grid.T, channels), dtype=np.uint8)
        for i in range(n):
            data[i] = bin_events(times[i], units[i], grid, channels)
    return SpikeDataset(data, labels, grid, n_classes)


def load_shd_dir(directory, grid: SimGrid = SimGrid(0.01, 100), prefix="shd"):
    """Published train and test partitions from ``<prefix>_train.h5`` / ``<prefix>_test.h5``."""
    train = load_shd(os.path.join(directory, f"{prefix}_train.h5"), grid)
    test = load_shd(os.path.join(directory, f"{prefix}_test.h5"), grid)
    return train, test


# ---------------------------------------------------------------------------
# dense cache

CACHE_MAGIC = b"TSNC"
CACHE_VERSION = 1


def write_cache(ds: SpikeDataset, path) -> None:
    n, T, C = ds.data.shape
    header = CACHE_MAGIC + struct.pack("<IIIIB", CACHE_VERSION, n, T, C, ds.label_mode)
    if ds.label_mode == 1:
        header += struct.pack("<I", ds.windows.shape[1])
    parts = [np.ascontiguousarray(ds.data, dtype=np.uint8).tobytes(),
             ds.labels.astype("<u4").tobytes()]
    if ds.label_mode == 1:
        parts.append(ds.windows.astype("<u4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_cache(path, dt=0.01, n_classes=None) -> SpikeDataset:
    """Read a cache file.  ``dt`` is not stored in the format and must be given.

    ``n_classes`` defaults to one more than the largest stored label.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 21:
        raise CacheFormatError(f"{path}: truncated header")
    version, n, T, C, mode = struct.unpack_from("<IIIIB", raw, 4)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    if mode not in (0, 1):
        raise CacheFormatError(f"{path}: bad label mode {mode}")
    off = 21
    n_windows = 0
    if mode == 1:
        if len(raw) < off + 4:
            raise CacheFormatError(f"{path}: truncated header")
        (n_windows,) = struct.unpack_from("<I", raw, off)
        off += 4
    size = n * T * C + 4 * n + 12 * n * n_windows
    if len(raw) != off + size + 4:
        raise CacheFormatError(f"{path}: expected {off + size + 4} bytes, found {len(raw)} "
                               "(truncated or trailing data)")
    payload = raw[off:off + size]
    (crc,) = struct.unpack_from("<I", raw, off + size)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CacheFormatError(f"{path}: checksum mismatch")
    data = np.frombuffer(payload, dtype=np.uint8, count=n * T * C).reshape(n, T, C).copy()
    p = n * T * C
    labels = np.frombuffer(payload, dtype="<u4", count=n, offset=p).astype(np.int64)
    windows = None
    if mode == 1:
        windows = np.frombuffer(payload, dtype="<u4", count=3 * n * n_windows,
                                offset=p + 4 * n).astype(np.int64).reshape(n, n_windows, 3)
    if n_classes is None:
        top = labels.max() if n else 0
        if windows is not None and windows.size:
            top = max(top, windows[:, :, 2].max())
        n_classes = int(top) + 1
    return SpikeDataset(data, labels, SimGrid(dt, T), n_classes, windows)


# ---------------------------------------------------------------------------
# augmentation and encoding


def shift_channels(x, shift: int):
    """Move channel c to c + shift along the last axis, zero-filling and truncating."""
    out = np.zeros_like(x)
    C = x.shape[-1]
    if shift >= 0:
        if shift < C:
            out[..., shift:] = x[..., :C - shift]
    elif -shift < C:
        out[..., :C + shift] = x[..., -shift:]
    return out


def draw_freq_shifts(n, rng, mean=10.0, std=5.0):
    mags = np.rint(rng.normal(mean, std, size=n)).astype(np.int64)
    signs = np.where(rng.random(n) < 0.5, -1, 1)
    return mags * signs


def augment_freq_shift(sample, rng, mean=10.0, std=5.0):
    """Random channel transposition; each sample of a batch draws its own shift."""
    x = np.asarray(sample)
    if x.ndim == 2:
        return shift_channels(x, int(draw_freq_shifts(1, rng, mean, std)[0]))
    shifts = draw_freq_shifts(x.shape[0], rng, mean, std)
    return np.stack([shift_channels(xi, int(k)) for xi, k in zip(x, shifts)])


def latency_encode(values, T_steps=50, suppress_zero=False):
    """One spike per channel at step round((1 - v) * (T_steps - 1)).

    ``values`` is (C,) or (B, C) in [0, 1]; output is (T, C) or (B, T, C) uint8.
    With ``suppress_zero`` a value of exactly 0 emits no spike.
    """
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1) or np.any(np.isnan(v)):
        raise ValueError("values must lie in [0, 1]")
    batched = v.ndim == 2
    if not batched:
        v = v[None]
    B, C = v.shape
    steps = np.floor((1.0 - v) * (T_steps - 1) + 0.5).astype(np.int64)
    out = np.zeros((B, T_steps, C), dtype=np.uint8)
    bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
    fire = np.ones_like(steps, dtype=bool) if not suppress_zero else v > 0
    out[bi[fire], steps[fire], ci[fire]] = 1
    return out if batched else out[0]


LATENCY_GRID = SimGrid(0.02, 50)
