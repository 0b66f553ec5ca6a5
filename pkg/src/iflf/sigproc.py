"""Signal conditioning and sliding-window segmentation.

Model pipeline: interpolate -> lowpass -> normalize -> make_windows.
Similarity pipeline: interpolate -> lowpass -> normalize -> magnitude_channels.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .ingest import UNLABELED, DomainId, Recording

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
WINDOWSET_VERSION = 1


@dataclass(frozen=True)
class FilterSpec:
    cutoff_hz: float = 10.0
    order: int = 4
    zero_phase: bool = True


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])

    @classmethod
    def identity(cls, num_channels):
        return cls(np.zeros(num_channels), np.ones(num_channels))


@dataclass
class WindowSet:
    """Fixed-length labeled windows ``[num_windows, num_channels, window_len]`` of one domain.

    ``origin`` rows are ``(recording index, start sample)`` of each window.
    """

    windows: np.ndarray
    labels: np.ndarray
    domain: DomainId
    sampling_rate_hz: float
    channel_names: list
    class_names: list
    window_seconds: float = 2.0
    overlap_fraction: float = 0.8
    normalization_stats: NormStats | None = None
    origin: np.ndarray | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.origin is None:
            self.origin = np.column_stack([np.zeros(len(self.labels), np.int64), np.arange(len(self.labels))])
        self.origin = np.asarray(self.origin, dtype=np.int64).reshape(-1, 2)
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError(f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")
        if self.windows.ndim != 3:
            raise ValueError(f"windows must be 3-D, got shape {self.windows.shape}")
        if len(self.labels) != len(self.windows) or len(self.origin) != len(self.windows):
            raise ValueError("labels/origin length must equal the number of windows")

    def __len__(self):
        return len(self.labels)

    @property
    def window_len(self) -> int:
        return self.windows.shape[2]

    @property
    def classes(self) -> list:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(
            self.windows[idx], self.labels[idx], self.domain, self.sampling_rate_hz, self.channel_names,
            self.class_names, self.window_seconds, self.overlap_fraction, self.normalization_stats, self.origin[idx],
        )

    def normalized(self, stats: NormStats) -> "WindowSet":
        """Apply z-scoring to windows that are currently unnormalized."""
        if self.normalization_stats is not None:
            raise ValueError(f"{self.domain}: windows already normalized")
        w = (self.windows - stats.mean[None, :, None]) / stats.std[None, :, None]
        out = self.subset(np.arange(len(self)))
        out.windows = w.astype(np.float32)
        out.normalization_stats = stats
        return out


def _check_uniform(rec: Recording, tol: float = 1e-6):
    for a, b in rec.segments():
        dt = np.diff(rec.timestamps[a:b])
        if len(dt) and np.max(np.abs(dt * rec.sampling_rate_hz - 1.0)) > tol:
            raise ValueError(f"{rec.domain}: sampling is not uniform at {rec.sampling_rate_hz} Hz; interpolate first")


def interpolate_uniform(rec: Recording, target_rate_hz: float | None = None, max_gap_s: float = 1.0) -> list:
    """Resample each trial onto a uniform grid with linear interpolation.

    Labels come from the nearest original sample.  Gaps longer than
    ``max_gap_s`` split the recording; the pieces are returned as separate
    Recordings.
    """
    if len(rec) < 2:
        raise ValueError(f"{rec.domain}: interpolation needs at least 2 samples")
    rate = float(target_rate_hz or rec.sampling_rate_hz)
    dt = 1.0 / rate
    pieces = []  # list of lists of (t, x, y) segments forming one output recording
    current = []
    for a, b in rec.segments():
        t = rec.timestamps[a:b]
        cuts = np.flatnonzero(np.diff(t) > max_gap_s) + 1
        bounds = [0, *cuts.tolist(), len(t)]
        for k, (s, e) in enumerate(zip(bounds[:-1], bounds[1:])):
            if k > 0:
                pieces.append(current)
                current = []
            ts = t[s:e]
            xs = rec.samples[a + s : a + e]
            ys = rec.labels[a + s : a + e]
            n_out = int(np.floor((ts[-1] - ts[0]) * rate + 1e-9)) + 1
            grid = ts[0] + np.arange(n_out) * dt
            if len(ts) == 1:
                current.append((grid, xs.copy(), ys.copy()))
                continue
            x_new = np.column_stack([np.interp(grid, ts, xs[:, c]) for c in range(xs.shape[1])])
            right = np.clip(np.searchsorted(ts, grid), 1, len(ts) - 1)
            left = right - 1
            nearest = np.where(grid - ts[left] <= ts[right] - grid, left, right)
            current.append((grid, x_new, ys[nearest]))
    pieces.append(current)

    out = []
    for i, segs in enumerate(pieces):
        segs = [s for s in segs if len(s[0])]
        if not segs:
            continue
        starts = np.cumsum([0] + [len(s[0]) for s in segs[:-1]]).tolist()
        ts = np.concatenate([s[0] for s in segs])
        # force strict monotonicity at trial joins
        for j in np.flatnonzero(np.diff(ts) <= 0):
            ts[j + 1 :] += ts[j] - ts[j + 1] + dt
        prov = dict(rec.provenance)
        if len(pieces) > 1:
            prov["gap_split"] = i
        out.append(rec.replace(
            samples=np.concatenate([s[1] for s in segs]),
            timestamps=ts,
            labels=np.concatenate([s[2] for s in segs]),
            sampling_rate_hz=rate,
            segment_starts=starts,
            provenance=prov,
        ))
    return out


def lowpass(rec: Recording, spec: FilterSpec = FilterSpec()) -> Recording:
    """Butterworth low-pass per channel and per trial."""
    nyquist = rec.sampling_rate_hz / 2.0
    if not 0 < spec.cutoff_hz < nyquist:
        raise ValueError(f"cutoff {spec.cutoff_hz} Hz must lie in (0, {nyquist}) for {rec.sampling_rate_hz} Hz data")
    _check_uniform(rec)
    sos = signal.butter(spec.order, spec.cutoff_hz, btype="low", fs=rec.sampling_rate_hz, output="sos")
    out = np.empty_like(rec.samples)
    for a, b in rec.segments():
        x = rec.samples[a:b]
        if spec.zero_phase:
            padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
            out[a:b] = signal.sosfiltfilt(sos, x, axis=0, padlen=max(padlen, 0))
        else:
            zi = signal.sosfilt_zi(sos)[:, :, None] * x[0][None, None, :]
            out[a:b], _ = signal.sosfilt(sos, x, axis=0, zi=zi)
    return rec.replace(samples=out)


def compute_stats(samples: np.ndarray) -> NormStats:
    """Per-channel mean/std; ``samples`` is ``[n, channels]``."""
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    if np.any(std < NORM_EPS):
        log.warning("zero-variance channel(s) %s; std clamped to %g", np.flatnonzero(std < NORM_EPS).tolist(), NORM_EPS)
        std = np.maximum(std, NORM_EPS)
    return NormStats(mean, std)


def normalize(rec: Recording, stats: NormStats | None = None):
    """Per-channel z-score.  Returns ``(recording, stats)``."""
    if stats is None:
        stats = compute_stats(rec.samples)
    return rec.replace(samples=(rec.samples - stats.mean) / stats.std), stats


def denormalize(rec: Recording, stats: NormStats) -> Recording:
    return rec.replace(samples=rec.samples * stats.std + stats.mean)


def sensor_groups(channel_names) -> dict:
    """Map sensor prefix to its channel indices, e.g. ``{"acc": [0, 1, 2]}``."""
    groups = defaultdict(list)
    for i, name in enumerate(channel_names):
        prefix, _, _ = name.rpartition(".")
        groups[prefix or name].append(i)
    return dict(groups)


def _triaxial_groups(channel_names) -> dict:
    groups = sensor_groups(channel_names)
    for name, idx in groups.items():
        if len(idx) != 3:
            raise ValueError(f"sensor group '{name}' has {len(idx)} channels, expected 3")
    return groups


def magnitude_channels(rec: Recording) -> Recording:
    groups = _triaxial_groups(rec.channel_names)
    mags = np.column_stack([np.sqrt(np.sum(rec.samples[:, idx] ** 2, axis=1)) for idx in groups.values()])
    return rec.replace(samples=mags, channel_names=[f"{g}.mag" for g in groups])


def rotate_axes(rec: Recording, rotation, tol: float = 1e-6) -> Recording:
    """Rotate every 3-axis sensor group.

    ``rotation`` is one 3x3 matrix used for all sensors, or a dict keyed by
    sensor prefix.
    """
    groups = _triaxial_groups(rec.channel_names)
    if not isinstance(rotation, dict):
        rotation = {g: rotation for g in groups}
    out = rec.samples.copy()
    for g, idx in groups.items():
        if g not in rotation:
            continue
        r = np.asarray(rotation[g], dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=tol):
            raise ValueError(f"rotation for sensor '{g}' is not orthonormal")
        out[:, idx] = rec.samples[:, idx] @ r.T
    return rec.replace(samples=out)


def window_geometry(sampling_rate_hz: float, window_seconds: float = 2.0, overlap_fraction: float = 0.8):
    """Return ``(window_len, stride)`` in samples."""
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    w = int(round(window_seconds * sampling_rate_hz))
    s = max(1, int(round(w * (1.0 - overlap_fraction))))
    return w, s


def window_label(labels: np.ndarray, min_share: float = 0.5) -> int:
    """Majority label of a window, or UNLABELED when the window is to be dropped."""
    values, counts = np.unique(labels, return_counts=True)
    best = int(np.argmax(counts))
    if values[best] == UNLABELED or counts[best] / len(labels) < min_share:
        return UNLABELED
    return int(values[best])


def make_windows(recordings, window_seconds: float = 2.0, overlap_fraction: float = 0.8, stats: NormStats | None = None) -> WindowSet:
    """Slide fixed-length windows over every trial of one domain's recordings."""
    if isinstance(recordings, Recording):
        recordings = [recordings]
    first = recordings[0]
    w, s = window_geometry(first.sampling_rate_hz, window_seconds, overlap_fraction)
    windows, labels, origin = [], [], []
    for r_idx, rec in enumerate(recordings):
        if rec.domain != first.domain or rec.sampling_rate_hz != first.sampling_rate_hz:
            raise ValueError("make_windows expects recordings from one domain at one rate")
        _check_uniform(rec)
        for a, b in rec.segments():
            n = b - a
            if n < w:
                continue
            for start in range(a, a + (n - w) // s * s + 1, s):
                lab = window_label(rec.labels[start : start + w])
                if lab == UNLABELED:
                    continue
                windows.append(rec.samples[start : start + w].T)
                labels.append(lab)
                origin.append((r_idx, start))
    if not windows:
        log.warning("%s: no complete windows (window_len=%d)", first.domain, w)
        arr = np.zeros((0, first.num_channels, w), dtype=np.float32)
    else:
        arr = np.stack(windows)
    return WindowSet(
        windows=arr,
        labels=np.asarray(labels, dtype=np.int64),
        domain=first.domain,
        sampling_rate_hz=first.sampling_rate_hz,
        channel_names=first.channel_names,
        class_names=first.class_names,
        window_seconds=window_seconds,
        overlap_fraction=overlap_fraction,
        normalization_stats=stats,
        origin=np.asarray(origin, dtype=np.int64).reshape(-1, 2),
    )


@dataclass
class PreprocessConfig:
    target_rate_hz: float | None = None
    max_gap_s: float = 1.0
    filter: FilterSpec = field(default_factory=FilterSpec)
    window_seconds: float = 2.0
    overlap_fraction: float = 0.8


def condition(rec: Recording, config: PreprocessConfig) -> list:
    """interpolate -> lowpass, skipping the filter when the cutoff is not below Nyquist."""
    out = []
    for piece in interpolate_uniform(rec, config.target_rate_hz, config.max_gap_s):
        if config.filter.cutoff_hz < piece.sampling_rate_hz / 2.0:
            piece = lowpass(piece, config.filter)
        else:
            log.warning("%s: cutoff %.1f Hz >= Nyquist at %.1f Hz, filter skipped",
                        piece.domain, config.filter.cutoff_hz, piece.sampling_rate_hz)
        out.append(piece)
    return out


def group_by_domain(recordings) -> dict:
    groups = {}
    for rec in recordings:
        groups.setdefault(rec.domain.key, []).append(rec)
    return groups


def preprocess_domain(recordings, config: PreprocessConfig = PreprocessConfig(), normalize_data: bool = True):
    """Full model pipeline for one domain's recordings.

    Returns ``(windowset, conditioned_recordings)``.  With ``normalize_data``
    the z-score statistics come from all of the domain's samples; otherwise
    the windows are left unnormalized so the caller can apply statistics
    from a support split.
    """
    conditioned = [p for rec in recordings for p in condition(rec, config)]
    stats = None
    if normalize_data:
        stats = compute_stats(np.concatenate([r.samples for r in conditioned]))
        conditioned = [normalize(r, stats)[0] for r in conditioned]
    ws = make_windows(conditioned, config.window_seconds, config.overlap_fraction, stats)
    return ws, conditioned


def preprocess_all(recordings, config: PreprocessConfig = PreprocessConfig(), unnormalized=()) -> dict:
    """Preprocess every domain; domains listed in ``unnormalized`` keep raw scale."""
    return {
        key: preprocess_domain(recs, config, normalize_data=key not in set(unnormalized))[0]
        for key, recs in group_by_domain(recordings).items()
    }


# --------------------------------------------------------------------------
# WindowSet files: <stem>.npy tensor + <stem>.json metadata


def save_windowset(ws: WindowSet, path_stem) -> Path:
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.save(stem.with_suffix(".npy"), ws.windows)
    meta = {
        "version": WINDOWSET_VERSION,
        "shape": list(ws.windows.shape),
        "labels": ws.labels.tolist(),
        "origin": ws.origin.tolist(),
        "domain": {"subject_id": ws.domain.subject_id, "device_id": ws.domain.device_id},
        "sampling_rate_hz": ws.sampling_rate_hz,
        "channel_names": ws.channel_names,
        "class_names": ws.class_names,
        "window_seconds": ws.window_seconds,
        "overlap_fraction": ws.overlap_fraction,
        "normalization_stats": ws.normalization_stats.to_dict() if ws.normalization_stats else None,
    }
    stem.with_suffix(".json").write_text(json.dumps(meta), encoding="utf-8")
    return stem.with_suffix(".npy")


def load_windowset(path) -> WindowSet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("version") != WINDOWSET_VERSION:
        raise ValueError(f"{path}: unsupported windowset version {meta.get('version')}")
    windows = np.load(path.with_suffix(".npy"))
    if list(windows.shape) != meta["shape"]:
        raise ValueError(f"{path}: tensor shape {windows.shape} does not match metadata {meta['shape']}")
    stats = meta.get("normalization_stats")
    return WindowSet(
        windows=windows,
        labels=np.asarray(meta["labels"], dtype=np.int64),
        domain=DomainId(**meta["domain"]),
        sampling_rate_hz=meta["sampling_rate_hz"],
        channel_names=meta["channel_names"],
        class_names=meta["class_names"],
        window_seconds=meta["window_seconds"],
        overlap_fraction=meta["overlap_fraction"],
        normalization_stats=NormStats.from_dict(stats) if stats else None,
        origin=np.asarray(meta["origin"], dtype=np.int64).reshape(-1, 2),
    )


def save_windowsets(windowsets: dict, out_dir) -> None:
    out = Path(out_dir)
    for key, ws in windowsets.items():
        save_windowset(ws, out / key.replace("@", "__"))


def load_windowsets(in_dir) -> dict:
    in_dir = Path(in_dir)
    paths = sorted(in_dir.glob("*.npy"))
    if not paths:
        raise FileNotFoundError(f"no windowsets in {in_dir}")
    sets = [load_windowset(p) for p in paths]
    return {ws.domain.key: ws for ws in sets}
