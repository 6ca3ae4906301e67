"""Recordings, epoch sets, LOSO fold planning and a synthetic multi-subject generator.

On-disk recording layout (one directory per subject)::

    header.json   schema version, subject id, fs, channel labels, sample count
    signal.f32    little-endian float32, channel-major (all of channel 0 first)
    events.csv    ``sample_index,code`` rows, codes 0/1/2
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal import SignalBlock

CLASS_NAMES = ("spread-out", "fall-in", "hovering")
SCHEMA_VERSION = 1

# trial timeline in seconds: fixation, video, fixation, blank (imagery)
TRIAL_PHASES = (2.0, 4.0, 4.0, 4.0)
TRIAL_LEN_S = sum(TRIAL_PHASES)
IMAGERY_OFFSET_S = sum(TRIAL_PHASES[:3])
IMAGERY_LEN_S = TRIAL_PHASES[3]


class RecordingFormatError(ValueError):
    """Base class for unreadable or inconsistent recording directories."""


class MalformedHeaderError(RecordingFormatError):
    pass


class TruncatedPayloadError(RecordingFormatError):
    pass


class ChannelMismatchError(RecordingFormatError):
    pass


class EventError(RecordingFormatError):
    pass


class LeakageError(AssertionError):
    """Raised when a test subject's trials reach training or validation data."""


@dataclass
class Recording:
    subject_id: str
    signal: SignalBlock
    events: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.subject_id = str(self.subject_id)
        self.events = [(int(s), int(c)) for s, c in self.events]
        _check_events(self.events, self.signal.n_samples)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.events == other.events
            and self.signal.fs_hz == other.signal.fs_hz
            and self.signal.channel_labels == other.signal.channel_labels
            and self.signal.data.dtype == other.signal.data.dtype
            and np.array_equal(self.signal.data, other.signal.data)
        )


def _check_events(events, n_samples):
    prev = -1
    for i, (sample, code) in enumerate(events):
        if not 0 <= sample < n_samples:
            raise EventError(
                f"event {i} at sample {sample} lies outside the signal (0..{n_samples - 1})"
            )
        if sample <= prev:
            raise EventError(f"event {i} at sample {sample} is not after the previous event")
        if code not in range(len(CLASS_NAMES)):
            raise EventError(f"event {i} has unknown class code {code}")
        prev = sample


def _atomic_write_bytes(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_recording(recording: Recording, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sig = recording.signal
    header = {
        "schema_version": SCHEMA_VERSION,
        "subject_id": recording.subject_id,
        "fs_hz": sig.fs_hz,
        "n_channels": sig.n_channels,
        "n_samples": sig.n_samples,
        "channel_labels": sig.channel_labels,
        "dtype": "<f4",
        "layout": "channel-major",
    }
    payload = np.ascontiguousarray(sig.data, dtype="<f4").tobytes()
    events = io.StringIO()
    writer = csv.writer(events, lineterminator="\n")
    writer.writerow(["sample_index", "code"])
    writer.writerows(recording.events)

    _atomic_write_bytes(path / "signal.f32", payload)
    _atomic_write_bytes(path / "events.csv", events.getvalue().encode())
    _atomic_write_bytes(path / "header.json", (json.dumps(header, indent=2) + "\n").encode())


def read_recording(path) -> Recording:
    path = Path(path)
    try:
        header = json.loads((path / "header.json").read_text())
    except FileNotFoundError:
        raise MalformedHeaderError(f"{path}: missing header.json") from None
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}/header.json: {exc}") from None
    required = ("schema_version", "subject_id", "fs_hz", "n_channels", "n_samples", "channel_labels")
    missing = [k for k in required if k not in header]
    if missing:
        raise MalformedHeaderError(f"{path}/header.json: missing keys {missing}")
    if header["schema_version"] != SCHEMA_VERSION:
        raise MalformedHeaderError(
            f"{path}/header.json: unsupported schema version {header['schema_version']}"
        )
    if header.get("dtype", "<f4") != "<f4" or header.get("layout", "channel-major") != "channel-major":
        raise MalformedHeaderError(f"{path}/header.json: only <f4 channel-major payloads supported")

    n_ch, n_samp = int(header["n_channels"]), int(header["n_samples"])
    labels = list(header["channel_labels"])
    if len(labels) != n_ch:
        raise ChannelMismatchError(
            f"{path}: header declares {n_ch} channels but lists {len(labels)} labels"
        )

    raw = (path / "signal.f32").read_bytes()
    expected = 4 * n_ch * n_samp
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}/signal.f32: {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(n_ch, n_samp).astype(np.float32)

    events = []
    with open(path / "events.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sample_index", "code"]:
        raise EventError(f"{path}/events.csv: bad or missing header row")
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            events.append((int(row[0]), int(row[1])))
        except (ValueError, IndexError):
            raise EventError(f"{path}/events.csv line {lineno}: cannot parse {row!r}") from None
    try:
        _check_events(events, n_samp)
    except EventError as exc:
        raise EventError(f"{path}: {exc}") from None
    signal = SignalBlock(data, float(header["fs_hz"]), labels)
    return Recording(str(header["subject_id"]), signal, events)


@dataclass
class EpochSet:
    """Trials x channels x samples with per-trial labels and subject tags."""

    data: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    fs_hz: float
    channel_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=object)
        if self.data.ndim != 3:
            raise ValueError(f"epoch data must be trials x channels x samples, got {self.data.shape}")
        n = self.data.shape[0]
        if self.labels.shape != (n,) or self.subject_ids.shape != (n,):
            raise ValueError(
                f"{n} trials but {self.labels.shape[0]} labels and {self.subject_ids.shape[0]} subject tags"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("epoch data contains non-finite values")
        if not self.channel_labels:
            self.channel_labels = [f"ch{i:02d}" for i in range(self.data.shape[1])]

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_samples(self):
        return self.data.shape[2]

    @property
    def subjects(self) -> list[str]:
        return sorted(set(self.subject_ids.tolist()))

    def take(self, idx) -> "EpochSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EpochSet(self.data[idx], self.labels[idx], self.subject_ids[idx], self.fs_hz,
                        list(self.channel_labels))

    def with_data(self, data) -> "EpochSet":
        return EpochSet(data, self.labels.copy(), self.subject_ids.copy(), self.fs_hz,
                        list(self.channel_labels))

    def class_counts(self, n_classes: int = len(CLASS_NAMES)) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)

    @classmethod
    def concatenate(cls, sets: Sequence["EpochSet"]) -> "EpochSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([s.data for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.subject_ids for s in sets]),
            sets[0].fs_hz,
            list(sets[0].channel_labels),
        )

    def save(self, path) -> None:
        path = Path(path)
        buf = io.BytesIO()
        np.savez(buf, data=self.data, labels=self.labels,
                 subject_ids=self.subject_ids.astype(str), fs_hz=np.float64(self.fs_hz),
                 channel_labels=np.asarray(self.channel_labels, dtype=str))
        _atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "EpochSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["data"], z["labels"], z["subject_ids"].astype(object),
                       float(z["fs_hz"]), z["channel_labels"].tolist())


@dataclass(frozen=True)
class Fold:
    index: int
    test_subject: str
    train_subjects: tuple[str, ...]
    seed: int


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def check(self) -> None:
        tested = [f.test_subject for f in self.folds]
        if len(set(tested)) != len(tested):
            raise LeakageError("a subject is tested in more than one fold")
        for f in self.folds:
            if f.test_subject in f.train_subjects:
                raise LeakageError(f"fold {f.index}: test subject {f.test_subject} is also a source subject")


def derive_seed(master_seed: int, *keys: int) -> int:
    """Positional seed: a hash of the master seed and integer keys."""
    return int(np.random.SeedSequence([int(master_seed), *map(int, keys)]).generate_state(1)[0])


def make_loso_folds(subject_ids: Sequence[str], seed: int = 0) -> FoldPlan:
    subject_ids = [str(s) for s in subject_ids]
    if len(set(subject_ids)) != len(subject_ids):
        dupes = sorted({s for s in subject_ids if subject_ids.count(s) > 1})
        raise ValueError(f"duplicate subject ids: {dupes}")
    if len(subject_ids) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    folds = tuple(
        Fold(i, s, tuple(o for o in subject_ids if o != s), derive_seed(seed, i))
        for i, s in enumerate(subject_ids)
    )
    plan = FoldPlan(folds)
    plan.check()
    return plan


def split_train_val(epochs: EpochSet, ratio: float = 0.8, seed: int = 0):
    """Stratified split: per class, ``floor(ratio * n_class)`` trials go to train."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(epochs.subjects) > 1:
        raise ValueError(f"split_train_val expects one subject, got {epochs.subjects}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in np.unique(epochs.labels):
        idx = np.flatnonzero(epochs.labels == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has {idx.size} trial(s); at least 2 are needed to split")
        idx = rng.permutation(idx)
        k = math.floor(ratio * idx.size + 1e-9)
        train_idx.append(idx[:k])
        val_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return epochs.take(train_idx), epochs.take(val_idx)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 10
    n_channels: int = 64
    fs_hz: float = 500.0
    trials_per_class: int = 50
    snr_db: float = 0.0
    subject_variability: float = 0.3
    seed: int = 0
    class_freqs_hz: tuple[float, ...] = (6.0, 10.0, 22.0)
    # rest after the last trial keeps its imagery window clear of filter edge transients
    tail_s: float = 4.0

    def __post_init__(self):
        for name in ("n_subjects", "n_channels", "trials_per_class"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.fs_hz <= 0:
            raise ValueError("fs_hz must be positive")
        if self.tail_s < 0:
            raise ValueError("tail_s must be non-negative")
        if not 0 <= self.subject_variability <= 1:
            raise ValueError("subject_variability must be in [0, 1]")
        if len(self.class_freqs_hz) != len(CLASS_NAMES):
            raise ValueError(f"need one signature frequency per class ({len(CLASS_NAMES)})")
        if self.n_channels < len(CLASS_NAMES):
            raise ValueError(f"need at least {len(CLASS_NAMES)} channels for disjoint class groups")
        if max(self.class_freqs_hz) >= self.fs_hz / 2:
            raise ValueError("class frequencies must lie below Nyquist")


def class_channel_groups(n_channels: int) -> list[np.ndarray]:
    """Disjoint channel groups carrying each class signature."""
    k = len(CLASS_NAMES)
    width = n_channels // k
    return [np.arange(i * width, (i + 1) * width) for i in range(k)]


def synth_generate(config: SynthConfig) -> list[Recording]:
    """Continuous recordings with class signatures injected during imagery windows.

    Each subject sees ``diag(gain) @ mixing`` applied to the clean class
    signature, with both deviating from identity in proportion to
    ``subject_variability``; unit-variance white noise is then added. The
    signature amplitude makes its per-channel power ``snr_db`` above the
    noise power inside the imagery window.
    """
    cfg = config
    fs = cfg.fs_hz
    trial_len = int(round(TRIAL_LEN_S * fs))
    img_off = int(round(IMAGERY_OFFSET_S * fs))
    img_len = int(round(IMAGERY_LEN_S * fs))
    n_trials = cfg.trials_per_class * len(CLASS_NAMES)
    amp = math.sqrt(2.0 * 10 ** (cfg.snr_db / 10))
    groups = class_channel_groups(cfg.n_channels)
    t = np.arange(img_len) / fs
    # smooth onset/offset so the signature is band-limited
    taper = np.sin(np.pi * np.arange(img_len) / img_len) ** 0.25
    labels = [f"ch{i:02d}" for i in range(cfg.n_channels)]

    recordings = []
    for s in range(cfg.n_subjects):
        rng = np.random.default_rng(derive_seed(cfg.seed, s))
        v = cfg.subject_variability
        mixing = np.eye(cfg.n_channels) + v * rng.standard_normal((cfg.n_channels,) * 2) / math.sqrt(cfg.n_channels)
        gain = 1.0 + v * rng.uniform(-0.5, 0.5, cfg.n_channels)
        subject_map = gain[:, None] * mixing

        codes = rng.permutation(np.repeat(np.arange(len(CLASS_NAMES)), cfg.trials_per_class))
        n_total = n_trials * trial_len + int(round(cfg.tail_s * fs))
        data = rng.standard_normal((cfg.n_channels, n_total), dtype=np.float32)
        events = []
        for k, code in enumerate(codes):
            onset = k * trial_len
            events.append((onset, int(code)))
            phase = rng.uniform(0, 2 * np.pi, groups[code].size)
            clean = np.zeros((cfg.n_channels, img_len))
            clean[groups[code]] = amp * taper * np.sin(2 * np.pi * cfg.class_freqs_hz[code] * t + phase[:, None])
            start = onset + img_off
            data[:, start:start + img_len] += (subject_map @ clean).astype(np.float32)
        recordings.append(Recording(f"S{s + 1:02d}", SignalBlock(data, fs, labels), events))
    return recordings
