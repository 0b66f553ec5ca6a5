"""Dataset adapters and the canonical recording format.

Every adapter returns a list of :class:`Recording`, one per domain (subject
and/or device).  Labels are dense integer ids into ``Recording.class_names``;
samples that carry no retained activity are either dropped (public datasets)
or marked with :data:`UNLABELED`.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

UNLABELED = -1
UNLABELED_NAME = "unlabeled"
CANONICAL_VERSION = 1
GRAVITY = 9.80665

IMU_CHANNELS = ["acc.x", "acc.y", "acc.z", "gyro.x", "gyro.y", "gyro.z"]

# Checked-in activity vocabularies.  Codes not listed here are dropped.
PAMAP2_ACTIVITIES = {
    1: "lying",
    2: "sitting",
    4: "walking",
    5: "running",
    6: "cycling",
    7: "nordic_walking",
    12: "ascending_stairs",
    13: "descending_stairs",
}
USCHAD_ACTIVITIES = {
    1: "walking_forward",
    2: "walking_left",
    3: "walking_right",
    4: "walking_upstairs",
    5: "walking_downstairs",
    6: "running_forward",
    7: "jumping_up",
    8: "sitting",
    9: "standing",
    10: "sleeping",
}
WISDM_ACTIVITIES = {
    "A": "walking",
    "B": "jogging",
    "C": "stairs",
    "D": "sitting",
    "E": "standing",
    "M": "kicking",
    "O": "tennis",
}

# PAMAP2 .dat layout: timestamp, activityID, heart rate, then three 17-column
# IMU blocks (hand, chest, ankle).  Inside a block: temperature, acc16 xyz,
# acc6 xyz, gyro xyz, mag xyz, orientation (4).
_PAMAP2_NCOLS = 54
_PAMAP2_ANKLE = 3 + 17 + 17
_PAMAP2_ACC16 = [_PAMAP2_ANKLE + 1 + i for i in range(3)]
_PAMAP2_ACC6 = [_PAMAP2_ANKLE + 4 + i for i in range(3)]
_PAMAP2_GYRO = [_PAMAP2_ANKLE + 7 + i for i in range(3)]


class IngestError(Exception):
    """Raised when a dataset root cannot be loaded."""


@dataclass(frozen=True)
class DomainId:
    subject_id: str = ""
    device_id: str = ""

    def __post_init__(self):
        if not self.subject_id and not self.device_id:
            raise ValueError("DomainId needs a subject_id or a device_id")

    @property
    def key(self) -> str:
        return f"{self.subject_id}@{self.device_id}"

    def __str__(self):
        return self.key

    @classmethod
    def from_key(cls, key: str) -> "DomainId":
        subject, _, device = key.partition("@")
        return cls(subject, device)


@dataclass
class Recording:
    """One continuous capture with per-sample labels.

    ``segment_starts`` holds the sample indices where a new trial begins;
    downstream windowing never crosses these boundaries.
    """

    samples: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    channel_names: list
    sampling_rate_hz: float
    domain: DomainId
    class_names: list
    segment_starts: list = field(default_factory=lambda: [0])
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.channel_names = list(self.channel_names)
        self.class_names = list(self.class_names)
        self.segment_starts = sorted({0, *map(int, self.segment_starts)})

    def __len__(self):
        return self.samples.shape[0]

    @property
    def num_channels(self) -> int:
        return self.samples.shape[1]

    def segments(self):
        """Yield ``(start, stop)`` sample ranges of the trials."""
        bounds = [*self.segment_starts, len(self)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b > a:
                yield a, b

    def present_classes(self) -> list:
        return sorted(int(c) for c in np.unique(self.labels) if c != UNLABELED)

    def replace(self, **changes) -> "Recording":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return Recording(**values)


def validate_recording(rec: Recording) -> None:
    """Check the structural invariants every adapter output must satisfy."""
    if rec.samples.ndim != 2:
        raise ValueError(f"{rec.domain}: samples must be 2-D, got {rec.samples.shape}")
    n, c = rec.samples.shape
    if rec.timestamps.shape != (n,):
        raise ValueError(f"{rec.domain}: {rec.timestamps.shape[0]} timestamps for {n} samples")
    if rec.labels.shape != (n,):
        raise ValueError(f"{rec.domain}: {rec.labels.shape[0]} labels for {n} samples")
    if len(rec.channel_names) != c:
        raise ValueError(f"{rec.domain}: {len(rec.channel_names)} channel names for {c} columns")
    if n > 1 and not np.all(np.diff(rec.timestamps) > 0):
        raise ValueError(f"{rec.domain}: timestamps not strictly increasing")
    bad = (rec.labels != UNLABELED) & ((rec.labels < 0) | (rec.labels >= len(rec.class_names)))
    if bad.any():
        raise ValueError(f"{rec.domain}: label ids outside [0, {len(rec.class_names)})")
    if rec.sampling_rate_hz <= 0:
        raise ValueError(f"{rec.domain}: sampling rate must be positive")
    if rec.segment_starts and rec.segment_starts[-1] > n:
        raise ValueError(f"{rec.domain}: segment boundary beyond the last sample")


@dataclass
class LabelMap:
    """Class names with dense ids and the per-domain set of present classes."""

    class_names: list
    present: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        for key, ids in self.present.items():
            if not ids:
                raise ValueError(f"domain {key} has no classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def id_of(self, name: str) -> int:
        return self.class_names.index(name)

    def name_of(self, class_id: int) -> str:
        return self.class_names[class_id]

    def mask(self, domain: DomainId | str) -> np.ndarray:
        key = domain.key if isinstance(domain, DomainId) else domain
        m = np.zeros(self.num_classes, dtype=bool)
        m[list(self.present[key])] = True
        return m

    @classmethod
    def from_recordings(cls, recordings) -> "LabelMap":
        names = recordings[0].class_names
        present = {}
        for rec in recordings:
            if rec.class_names != names:
                raise ValueError("recordings use different class vocabularies")
            ids = set(present.get(rec.domain.key, ())) | set(rec.present_classes())
            present[rec.domain.key] = sorted(ids)
        return cls(list(names), present)

    def to_dict(self) -> dict:
        return {"class_names": self.class_names, "present": self.present}

    @classmethod
    def from_dict(cls, d) -> "LabelMap":
        return cls(list(d["class_names"]), {k: list(v) for k, v in d["present"].items()})


@dataclass
class IngestConfig:
    pamap2_accelerometer: str = "acc16"  # or "acc6"
    wisdm_device: str = "phone"
    to_si_units: bool = True


# --------------------------------------------------------------------------
# PAMAP2


def _pamap2_files(root: Path):
    protocol = root / "Protocol"
    base = protocol if protocol.is_dir() else root
    return sorted(base.glob("subject*.dat"))


def load_pamap2(root_path, config: IngestConfig | None = None) -> list:
    """Load the PAMAP2 protocol files: ankle accelerometer and gyroscope only."""
    config = config or IngestConfig()
    root = Path(root_path)
    if not root.is_dir():
        raise IngestError(f"PAMAP2 root not found: {root}")
    files = _pamap2_files(root)
    if not files:
        raise IngestError(f"no PAMAP2 subject*.dat files under {root}")

    acc_cols = _PAMAP2_ACC16 if config.pamap2_accelerometer == "acc16" else _PAMAP2_ACC6
    codes = list(PAMAP2_ACTIVITIES)
    names = list(PAMAP2_ACTIVITIES.values())
    recordings = []
    for path in files:
        try:
            raw = pd.read_csv(path, sep=r"\s+", header=None, dtype=np.float64).to_numpy()
        except (OSError, ValueError, pd.errors.ParserError) as exc:
            raise IngestError(f"cannot parse PAMAP2 file {path}: {exc}") from exc
        if raw.ndim != 2 or raw.shape[1] != _PAMAP2_NCOLS:
            raise IngestError(f"{path}: expected {_PAMAP2_NCOLS} columns, got {raw.shape[1] if raw.ndim == 2 else 0}")

        activity = raw[:, 1].astype(np.int64)
        known = np.isin(activity, codes)
        n_unknown = int((~known).sum())
        x = raw[:, acc_cols + _PAMAP2_GYRO]
        finite = np.isfinite(x).all(axis=1)
        keep = known & finite
        if n_unknown:
            log.warning("%s: skipped %d rows with unretained activity codes", path.name, n_unknown)
        ts = raw[keep, 0]
        x = x[keep]
        labels = np.array([codes.index(a) for a in activity[keep]], dtype=np.int64)
        if len(ts) == 0:
            log.warning("%s: no rows with retained activities, subject skipped", path.name)
            continue
        inc = np.concatenate([[True], np.diff(ts) > 0])
        ts, x, labels = ts[inc], x[inc], labels[inc]

        subject = re.sub(r"\D", "", path.stem) or path.stem
        rec = Recording(
            samples=x,
            timestamps=ts,
            labels=labels,
            channel_names=list(IMU_CHANNELS),
            sampling_rate_hz=100.0,
            domain=DomainId(subject_id=subject, device_id="ankle"),
            class_names=names,
            provenance={
                "dataset": "pamap2",
                "file": path.name,
                "skipped_unknown_activity": n_unknown,
                "dropped_nonfinite": int((known & ~finite).sum()),
            },
        )
        validate_recording(rec)
        recordings.append(rec)
    return recordings


# --------------------------------------------------------------------------
# USC-HAD

_USCHAD_FILE = re.compile(r"a(\d+)t(\d+)\.mat$", re.IGNORECASE)


def load_uschad(root_path, config: IngestConfig | None = None) -> list:
    """Load USC-HAD: one Recording per subject, trials concatenated.

    Trial start indices are kept in ``segment_starts``.  A trial file that
    cannot be read is skipped with a warning.
    """
    from scipy.io import loadmat

    config = config or IngestConfig()
    root = Path(root_path)
    if not root.is_dir():
        raise IngestError(f"USC-HAD root not found: {root}")
    subject_dirs = sorted(
        (d for d in root.iterdir() if d.is_dir() and re.match(r"subject\d+$", d.name, re.IGNORECASE)),
        key=lambda d: int(re.sub(r"\D", "", d.name)),
    )
    if not subject_dirs:
        raise IngestError(f"no Subject* directories under {root}")

    names = list(USCHAD_ACTIVITIES.values())
    acc_scale = GRAVITY if config.to_si_units else 1.0
    gyro_scale = math.pi / 180.0 if config.to_si_units else 1.0
    recordings = []
    for sdir in subject_dirs:
        trials = []
        for path in sdir.glob("*.mat"):
            m = _USCHAD_FILE.search(path.name)
            if not m:
                continue
            code, trial = int(m.group(1)), int(m.group(2))
            if code not in USCHAD_ACTIVITIES:
                continue
            trials.append((code, trial, path))
        trials.sort()

        blocks, labels, starts, skipped = [], [], [], []
        offset = 0
        for code, trial, path in trials:
            try:
                mat = loadmat(path)
                x = np.asarray(mat["sensor_readings"], dtype=np.float64)
                if x.ndim != 2 or x.shape[1] != 6 or x.shape[0] == 0 or not np.isfinite(x).all():
                    raise ValueError(f"bad sensor_readings shape {x.shape}")
            except Exception as exc:  # corrupt trial files are skipped, not fatal
                log.warning("%s: trial skipped (%s)", path, exc)
                skipped.append(path.name)
                continue
            x = x * np.array([acc_scale] * 3 + [gyro_scale] * 3)
            blocks.append(x)
            labels.append(np.full(len(x), list(USCHAD_ACTIVITIES).index(code), dtype=np.int64))
            starts.append(offset)
            offset += len(x)
        if not blocks:
            log.warning("%s: no readable trials, subject skipped", sdir.name)
            continue
        samples = np.concatenate(blocks)
        rec = Recording(
            samples=samples,
            timestamps=np.arange(len(samples)) / 100.0,
            labels=np.concatenate(labels),
            channel_names=list(IMU_CHANNELS),
            sampling_rate_hz=100.0,
            domain=DomainId(subject_id=re.sub(r"\D", "", sdir.name), device_id="hip"),
            class_names=names,
            segment_starts=starts,
            provenance={"dataset": "uschad", "skipped_trials": skipped},
        )
        validate_recording(rec)
        recordings.append(rec)
    return recordings


# --------------------------------------------------------------------------
# WISDM (2019 smartphone/smartwatch release, raw/ layout)


def _parse_wisdm_file(path: Path):
    """Return (subject, code, t_seconds, xyz) arrays and the malformed-line count."""
    subj, code, ts, xyz = [], [], [], []
    malformed = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.strip().rstrip(";")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                malformed += 1
                continue
            try:
                row = (parts[0].strip(), parts[1].strip(), int(parts[2]), float(parts[3]), float(parts[4]), float(parts[5]))
            except ValueError:
                malformed += 1
                continue
            subj.append(row[0])
            code.append(row[1])
            ts.append(row[2])
            xyz.append(row[3:])
    return (
        np.array(subj, dtype=object),
        np.array(code, dtype=object),
        np.array(ts, dtype=np.int64) * 1e-9,
        np.array(xyz, dtype=np.float64).reshape(-1, 3),
        malformed,
    )


def _strictly_increasing(t, x):
    order = np.argsort(t, kind="stable")
    t, x = t[order], x[order]
    if len(t) == 0:
        return t, x
    keep = np.concatenate([[True], np.diff(t) > 0])
    return t[keep], x[keep]


def load_wisdm(root_path, config: IngestConfig | None = None) -> list:
    """Load WISDM raw accelerometer + gyroscope streams at 20 Hz.

    Gyroscope readings are linearly interpolated onto accelerometer
    timestamps per activity block; each activity block becomes one segment.
    """
    config = config or IngestConfig()
    root = Path(root_path)
    if not root.is_dir():
        raise IngestError(f"WISDM root not found: {root}")
    dev = config.wisdm_device
    accel_files = sorted(root.rglob(f"data_*_accel_{dev}.txt"))
    if not accel_files:
        raise IngestError(f"no data_*_accel_{dev}.txt files under {root}")

    codes = list(WISDM_ACTIVITIES)
    names = list(WISDM_ACTIVITIES.values())
    rate = 20.0
    recordings = []
    for apath in accel_files:
        sid = apath.name.split("_")[1]
        gpath = next(iter(root.rglob(f"data_{sid}_gyro_{dev}.txt")), None)
        if gpath is None:
            raise IngestError(f"missing gyroscope file for subject {sid} (expected data_{sid}_gyro_{dev}.txt)")
        _, acode, at, axyz, amal = _parse_wisdm_file(apath)
        _, gcode, gt, gxyz, gmal = _parse_wisdm_file(gpath)
        malformed = amal + gmal
        if malformed:
            log.warning("subject %s: skipped %d malformed lines", sid, malformed)
        if len(at) == 0:
            log.warning("%s: no valid rows, subject skipped", apath.name)
            continue

        blocks, labels, starts = [], [], []
        t_blocks = []
        offset_t = 0.0
        n = 0
        for code in codes:
            a_t, a_x = _strictly_increasing(at[acode == code], axyz[acode == code])
            g_t, g_x = _strictly_increasing(gt[gcode == code], gxyz[gcode == code])
            if len(a_t) < 2 or len(g_t) < 2:
                continue
            inside = (a_t >= g_t[0]) & (a_t <= g_t[-1])
            a_t, a_x = a_t[inside], a_x[inside]
            if len(a_t) < 2:
                continue
            g_on_a = np.column_stack([np.interp(a_t, g_t, g_x[:, i]) for i in range(3)])
            blocks.append(np.hstack([a_x, g_on_a]))
            labels.append(np.full(len(a_t), codes.index(code), dtype=np.int64))
            t_blocks.append(a_t - a_t[0] + offset_t)
            offset_t = t_blocks[-1][-1] + 1.0 / rate
            starts.append(n)
            n += len(a_t)
        if not blocks:
            log.warning("subject %s: no retained activities, skipped", sid)
            continue
        rec = Recording(
            samples=np.concatenate(blocks),
            timestamps=np.concatenate(t_blocks),
            labels=np.concatenate(labels),
            channel_names=list(IMU_CHANNELS),
            sampling_rate_hz=rate,
            domain=DomainId(subject_id=sid, device_id=dev),
            class_names=names,
            segment_starts=starts,
            provenance={"dataset": "wisdm", "malformed_lines": malformed},
        )
        validate_recording(rec)
        recordings.append(rec)
    if not recordings:
        log.warning("WISDM root %s yielded no recordings", root)
    return recordings


# --------------------------------------------------------------------------
# Synthetic domains


@dataclass(frozen=True)
class ClassWaveform:
    """Sinusoid mixture plus an optional pulse train, per channel.

    ``amplitudes`` and ``phases`` are ``[num_channels][num_components]``.
    """

    freqs_hz: tuple
    amplitudes: tuple
    phases: tuple
    offsets: tuple
    pulse_rate_hz: float = 0.0
    pulse_width_s: float = 0.1
    pulse_amplitudes: tuple = ()

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        out = np.empty((len(t), len(self.offsets)))
        freqs = np.asarray(self.freqs_hz)
        for ch, offset in enumerate(self.offsets):
            amp = np.asarray(self.amplitudes[ch])
            ph = np.asarray(self.phases[ch])
            out[:, ch] = offset + np.sin(2 * np.pi * np.outer(t, freqs) + ph) @ amp
        if self.pulse_rate_hz > 0 and self.pulse_amplitudes:
            phase = (t * self.pulse_rate_hz) % 1.0
            width = self.pulse_width_s * self.pulse_rate_hz
            bump = np.exp(-0.5 * ((phase - 0.5) / max(width, 1e-6)) ** 2)
            out += np.outer(bump, self.pulse_amplitudes)
        return out


@dataclass(frozen=True)
class Perturbation:
    """Per-domain distortion applied after base-waveform synthesis.

    ``variability`` is the depth of a slow random tempo/amplitude drift;
    together with ``noise_std`` it is the only per-domain random component.
    """

    amplitude_scale: float = 1.0
    bias: float = 0.0
    noise_std: float = 0.0
    time_warp: float = 1.0
    rotation_deg: float = 0.0
    variability: float = 0.0


@dataclass
class SyntheticSpec:
    num_domains: int
    num_classes: int
    waveforms: list
    perturbations: list
    duration_s: float = 60.0
    sampling_rate_hz: float = 25.0
    missing: dict = field(default_factory=dict)
    # classes rendered without any perturbation in every domain
    shared_classes: tuple = ()
    # weight of a per-(domain, class) random waveform mixed into every non-shared class
    domain_style: float = 0.0

    def __post_init__(self):
        if self.num_domains < 2 or self.num_classes < 2:
            raise ValueError("need at least 2 domains and 2 classes")
        if not 0 <= self.domain_style < 1:
            raise ValueError("domain_style must be in [0, 1)")
        if len(self.waveforms) != self.num_classes:
            raise ValueError(f"{len(self.waveforms)} waveforms for {self.num_classes} classes")
        if len(self.perturbations) != self.num_domains:
            raise ValueError(f"{len(self.perturbations)} perturbations for {self.num_domains} domains")
        for p in self.perturbations:
            if p.noise_std < 0 or p.variability < 0:
                raise ValueError("noise_std and variability must be non-negative")
            if p.time_warp <= 0:
                raise ValueError("time_warp must be positive")
        for d, classes in self.missing.items():
            if len(set(classes)) >= self.num_classes:
                raise ValueError(f"domain {d} would have no classes")
        if self.duration_s <= 0 or self.sampling_rate_hz <= 0:
            raise ValueError("duration and sampling rate must be positive")

    @classmethod
    def default(cls, num_domains=6, num_classes=4, seed=0, class_separation=1.0, noise_std=0.4,
                variability=0.3, max_rotation_deg=30.0, **overrides) -> "SyntheticSpec":
        """Random class waveforms and per-domain perturbations drawn from ``seed``.

        ``class_separation`` in (0, 1] blends every class waveform with one
        common waveform; small values make classes harder to tell apart.
        """
        rng = np.random.default_rng(seed)
        common = random_waveform(rng)
        waveforms = [blend_waveforms(common, random_waveform(rng), class_separation) for _ in range(num_classes)]
        perturbations = [
            Perturbation(
                amplitude_scale=float(rng.uniform(0.7, 1.3)),
                bias=float(rng.normal(0.0, 0.5)),
                noise_std=noise_std,
                time_warp=float(rng.uniform(0.8, 1.25)),
                rotation_deg=float(rng.uniform(-max_rotation_deg, max_rotation_deg)),
                variability=variability,
            )
            for _ in range(num_domains)
        ]
        fields = {"waveforms": waveforms, "perturbations": perturbations, **overrides}
        return cls(num_domains, num_classes, **fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["missing"] = {str(k): list(v) for k, v in self.missing.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v

        return cls(
            num_domains=d["num_domains"],
            num_classes=d["num_classes"],
            waveforms=[ClassWaveform(**{k: tup(v) for k, v in w.items()}) for w in d["waveforms"]],
            perturbations=[Perturbation(**p) for p in d["perturbations"]],
            duration_s=d.get("duration_s", 60.0),
            sampling_rate_hz=d.get("sampling_rate_hz", 25.0),
            missing={int(k): tuple(v) for k, v in d.get("missing", {}).items()},
            shared_classes=tuple(d.get("shared_classes", ())),
            domain_style=d.get("domain_style", 0.0),
        )


def random_waveform(rng, num_channels=6, num_components=2) -> ClassWaveform:
    freqs = tuple(float(f) for f in rng.uniform(0.5, 3.0, num_components))
    amps = tuple(tuple(float(a) for a in rng.uniform(-1.5, 1.5, num_components)) for _ in range(num_channels))
    phases = tuple(tuple(float(p) for p in rng.uniform(0, 2 * np.pi, num_components)) for _ in range(num_channels))
    gravity = rng.normal(size=3)
    gravity = GRAVITY * gravity / np.linalg.norm(gravity)
    offsets = tuple(float(v) for v in gravity) + (0.0,) * (num_channels - 3)
    return ClassWaveform(
        freqs_hz=freqs,
        amplitudes=amps,
        phases=phases,
        offsets=offsets,
        pulse_rate_hz=float(rng.uniform(0.5, 2.0)),
        pulse_width_s=0.1,
        pulse_amplitudes=tuple(float(a) for a in rng.uniform(-2.0, 2.0, num_channels)),
    )


def blend_waveforms(common: ClassWaveform, specific: ClassWaveform, separation: float) -> ClassWaveform:
    """Superpose ``(1 - separation) * common`` and ``separation * specific``."""
    if not 0 < separation <= 1:
        raise ValueError("separation must be in (0, 1]")
    if separation == 1:
        return specific
    a, b = 1.0 - separation, separation
    gravity = a * np.asarray(common.offsets[:3]) + b * np.asarray(specific.offsets[:3])
    gravity = GRAVITY * gravity / max(np.linalg.norm(gravity), 1e-9)
    return ClassWaveform(
        freqs_hz=common.freqs_hz + specific.freqs_hz,
        amplitudes=tuple(tuple(a * x for x in ca) + tuple(b * x for x in sa)
                         for ca, sa in zip(common.amplitudes, specific.amplitudes)),
        phases=tuple(cp + sp for cp, sp in zip(common.phases, specific.phases)),
        offsets=tuple(float(v) for v in gravity) + tuple(specific.offsets[3:]),
        pulse_rate_hz=specific.pulse_rate_hz,
        pulse_width_s=specific.pulse_width_s,
        pulse_amplitudes=tuple(b * x for x in specific.pulse_amplitudes),
    )


def _z_rotation(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


def _slow_noise(rng, n: int, fs: float, cutoff_hz: float = 0.2) -> np.ndarray:
    """Unit-variance random curve with no content above ``cutoff_hz``."""
    knots = max(2, int(np.ceil(n / fs * cutoff_hz * 2)) + 2)
    values = rng.normal(size=knots)
    return np.interp(np.linspace(0, knots - 1, n), np.arange(knots), values)


def _render_class(wave: ClassWaveform, pert: Perturbation, n: int, fs: float, rng) -> np.ndarray:
    t = np.arange(n) / fs
    if pert.variability > 0:
        tempo = 1.0 + 0.5 * pert.variability * _slow_noise(rng, n, fs)
        local_t = np.concatenate([[0.0], np.cumsum(tempo[:-1]) / fs])
        envelope = 1.0 + pert.variability * _slow_noise(rng, n, fs)
    else:
        local_t = t
        envelope = None
    x = wave.evaluate(local_t / pert.time_warp)
    if envelope is not None:
        offsets = np.asarray(wave.offsets)
        x = offsets + (x - offsets) * envelope[:, None]
    x = x * pert.amplitude_scale + pert.bias
    if pert.noise_std > 0:
        x = x + rng.normal(0.0, pert.noise_std, size=x.shape)
    if pert.rotation_deg:
        r = _z_rotation(pert.rotation_deg)
        for g in range(0, x.shape[1] - x.shape[1] % 3, 3):
            x[:, g : g + 3] = x[:, g : g + 3] @ r.T
    return x


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list:
    """Render one Recording per domain; a pure function of ``(spec, seed)``.

    Each class is one contiguous block (its own segment), in class order.
    """
    fs = spec.sampling_rate_hz
    n = int(round(spec.duration_s * fs))
    num_channels = len(spec.waveforms[0].offsets)
    names = [f"class{c}" for c in range(spec.num_classes)]
    channel_names = IMU_CHANNELS if num_channels == 6 else [f"s{g}.{ax}" for g in range(num_channels // 3) for ax in "xyz"]
    identity = Perturbation()
    recordings = []
    for d in range(spec.num_domains):
        rng = np.random.default_rng([seed, d])
        missing = set(spec.missing.get(d, ()))
        blocks, labels, starts = [], [], []
        for c in range(spec.num_classes):
            if c in missing:
                continue
            shared = c in spec.shared_classes
            pert = identity if shared else spec.perturbations[d]
            wave = spec.waveforms[c]
            if spec.domain_style > 0 and not shared:
                style = random_waveform(np.random.default_rng([seed, 20_000 + d, c]), num_channels)
                # style changes the motion, not the sensor orientation
                wave = replace(blend_waveforms(style, wave, 1.0 - spec.domain_style), offsets=wave.offsets)
            starts.append(len(blocks) * n)
            # shared classes draw from a domain-independent stream
            crng = np.random.default_rng([seed, 10_000 + c]) if shared else rng
            blocks.append(_render_class(wave, pert, n, fs, crng))
            labels.append(np.full(n, c, dtype=np.int64))
        samples = np.concatenate(blocks)
        rec = Recording(
            samples=samples,
            timestamps=np.arange(len(samples)) / fs,
            labels=np.concatenate(labels),
            channel_names=list(channel_names),
            sampling_rate_hz=fs,
            domain=DomainId(subject_id=f"s{d}", device_id="synthetic"),
            class_names=names,
            segment_starts=starts,
            provenance={"dataset": "synthetic", "seed": seed, "domain_index": d},
        )
        validate_recording(rec)
        recordings.append(rec)
    return recordings


# --------------------------------------------------------------------------
# Canonical CSV + JSON sidecar


def _stem(rec: Recording) -> str:
    dataset = rec.provenance.get("dataset", "rec")
    raw = f"{dataset}_{rec.domain.subject_id}_{rec.domain.device_id}"
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", raw)


def write_canonical(rec: Recording, out_dir, stem: str | None = None) -> Path:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns the CSV path."""
    validate_recording(rec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or _stem(rec)
    df = pd.DataFrame(rec.samples, columns=rec.channel_names)
    df.insert(0, "timestamp_s", rec.timestamps)
    names = np.array([*rec.class_names, UNLABELED_NAME], dtype=object)
    df["label"] = names[rec.labels]  # index -1 picks UNLABELED_NAME
    csv_path = out / f"{stem}.csv"
    df.to_csv(csv_path, index=False, float_format="%.17g", encoding="utf-8")
    meta = {
        "version": CANONICAL_VERSION,
        "domain": {"subject_id": rec.domain.subject_id, "device_id": rec.domain.device_id},
        "sampling_rate_hz": rec.sampling_rate_hz,
        "channel_names": rec.channel_names,
        "class_names": rec.class_names,
        "segment_starts": rec.segment_starts,
        "provenance": rec.provenance,
    }
    (out / f"{stem}.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return csv_path


def read_canonical(csv_path) -> Recording:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("version") != CANONICAL_VERSION:
        raise IngestError(f"{csv_path}: unsupported canonical version {meta.get('version')}")
    df = pd.read_csv(csv_path, float_precision="round_trip", keep_default_na=False)
    channels = meta["channel_names"]
    if list(df.columns) != ["timestamp_s", *channels, "label"]:
        raise IngestError(f"{csv_path}: columns do not match sidecar channel names")
    lookup = {name: i for i, name in enumerate(meta["class_names"])}
    lookup[UNLABELED_NAME] = UNLABELED
    try:
        labels = np.array([lookup[s] for s in df["label"].astype(str)], dtype=np.int64)
    except KeyError as exc:
        raise IngestError(f"{csv_path}: unknown label {exc}") from exc
    rec = Recording(
        samples=df[channels].to_numpy(dtype=np.float64),
        timestamps=df["timestamp_s"].to_numpy(dtype=np.float64),
        labels=labels,
        channel_names=channels,
        sampling_rate_hz=float(meta["sampling_rate_hz"]),
        domain=DomainId(**meta["domain"]),
        class_names=meta["class_names"],
        segment_starts=meta.get("segment_starts", [0]),
        provenance=meta.get("provenance", {}),
    )
    validate_recording(rec)
    return rec


def write_canonical_dir(recordings, out_dir) -> list:
    return [write_canonical(rec, out_dir) for rec in recordings]


def read_canonical_dir(in_dir) -> list:
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise IngestError(f"recording directory not found: {in_dir}")
    paths = sorted(p for p in in_dir.glob("*.csv") if p.with_suffix(".json").exists())
    if not paths:
        raise IngestError(f"no canonical recordings in {in_dir}")
    return [read_canonical(p) for p in paths]


LOADERS = {"pamap2": load_pamap2, "uschad": load_uschad, "wisdm": load_wisdm}
