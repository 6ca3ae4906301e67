"""EEG preprocessing: Butterworth band-pass design, zero-phase filtering,
notch, decimation, epoching and train-statistics standardization.

The band-pass is designed from the analog Butterworth prototype, mapped
low-pass -> band-pass and discretized with a prewarped bilinear transform.
It is kept as a cascade of second-order sections because a direct-form
order-10 polynomial is badly conditioned with a 0.5 Hz edge at 500 Hz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import sosfiltfilt, sosfilt

__all__ = [
    "FilterSpec",
    "BiquadCascade",
    "SignalBlock",
    "design_butterworth_bandpass",
    "design_notch",
    "apply_zero_phase",
    "apply_causal",
    "apply_notch",
    "downsample",
    "epoch_extract",
    "standardize",
]


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "band-pass"
    order: int = 5
    low_hz: float = 0.5
    high_hz: float = 50.0
    fs_hz: float = 500.0

    def __post_init__(self):
        if self.kind not in ("band-pass", "notch"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if int(self.order) != self.order or self.order < 1:
            raise ValueError(f"filter order must be a positive integer, got {self.order}")
        if self.fs_hz <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs_hz}")
        nyquist = self.fs_hz / 2
        if not self.low_hz > 0:
            raise ValueError(f"low edge must be > 0 Hz, got {self.low_hz}")
        if not self.high_hz < nyquist:
            raise ValueError(f"high edge {self.high_hz} Hz must be below Nyquist ({nyquist} Hz)")
        if not self.low_hz < self.high_hz:
            raise ValueError(f"low edge {self.low_hz} Hz must be below high edge {self.high_hz} Hz")


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, 1, a1, a2)`` and an overall gain."""

    sections: np.ndarray
    gain: float = 1.0

    def __post_init__(self):
        sos = np.asarray(self.sections, dtype=float)
        if sos.ndim != 2 or sos.shape[1] != 6:
            raise ValueError(f"sections must have shape (n, 6), got {sos.shape}")
        if not np.all(sos[:, 3] == 1.0):
            raise ValueError("section denominators must be normalized (a0 == 1)")
        object.__setattr__(self, "sections", sos)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    @property
    def order(self) -> int:
        return 2 * self.n_sections

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:]) for s in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def to_sos(self) -> np.ndarray:
        """Sections with the gain folded into the first numerator."""
        sos = self.sections.copy()
        sos[0, :3] *= self.gain
        return sos

    def frequency_response(self, freqs_hz, fs_hz: float) -> np.ndarray:
        """Complex response evaluated directly on the unit circle."""
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs_hz
        zinv = np.exp(-1j * w)
        h = np.full(zinv.shape, self.gain, dtype=complex)
        for b0, b1, b2, _, a1, a2 in self.sections:
            h *= (b0 + b1 * zinv + b2 * zinv**2) / (1 + a1 * zinv + a2 * zinv**2)
        return h

    def magnitude(self, freqs_hz, fs_hz: float) -> np.ndarray:
        return np.abs(self.frequency_response(freqs_hz, fs_hz))

    @property
    def padlen(self) -> int:
        # 3x the filter length (order + 1 taps of the equivalent direct form)
        return 3 * (self.order + 1)


@dataclass
class SignalBlock:
    data: np.ndarray
    fs_hz: float
    channel_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"signal data must be channels x samples, got shape {data.shape}")
        if not self.channel_labels:
            self.channel_labels = [f"ch{i:02d}" for i in range(data.shape[0])]
        self.channel_labels = list(self.channel_labels)
        if len(self.channel_labels) != data.shape[0]:
            raise ValueError(
                f"{data.shape[0]} channels but {len(self.channel_labels)} channel labels"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("signal contains non-finite samples")
        if self.fs_hz <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs_hz}")
        self.data = data

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def replace(self, data: np.ndarray, fs_hz: float | None = None) -> "SignalBlock":
        return SignalBlock(data, self.fs_hz if fs_hz is None else fs_hz, list(self.channel_labels))


def _bilinear_zpk(z, p, k, fs):
    fs2 = 2.0 * fs
    z = np.asarray(z, dtype=complex)
    p = np.asarray(p, dtype=complex)
    zd = (fs2 + z) / (fs2 - z)
    pd = (fs2 + p) / (fs2 - p)
    # zeros at analog infinity land on Nyquist
    zd = np.concatenate([zd, -np.ones(len(p) - len(z))])
    kd = k * np.real(np.prod(fs2 - z) / np.prod(fs2 - p))
    return zd, pd, kd


def _pair_poles(poles: np.ndarray) -> list[tuple[complex, complex]]:
    tol = 1e-10
    cplx = sorted((p for p in poles if p.imag > tol), key=lambda p: abs(p))
    real = sorted((p.real for p in poles if abs(p.imag) <= tol), key=abs)
    if len(cplx) * 2 + len(real) != len(poles) or len(real) % 2:
        raise ArithmeticError("poles do not form conjugate pairs")
    pairs = [(p, p.conjugate()) for p in cplx]
    pairs += [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    return pairs


def design_butterworth_bandpass(spec: FilterSpec) -> BiquadCascade:
    """Digital Butterworth band-pass of order ``2 * spec.order``.

    Each of the ``spec.order`` sections carries one zero at DC and one at
    Nyquist, so the numerators are exactly ``(1, 0, -1)``.
    """
    if spec.kind != "band-pass":
        raise ValueError(f"expected a band-pass spec, got kind={spec.kind!r}")
    n = int(spec.order)
    fs = float(spec.fs_hz)
    # prewarp the edges so they land exactly after the bilinear map
    w1 = 2 * fs * math.tan(math.pi * spec.low_hz / fs)
    w2 = 2 * fs * math.tan(math.pi * spec.high_hz / fs)
    bw = w2 - w1
    w0 = math.sqrt(w1 * w2)

    k = np.arange(1, n + 1)
    proto = np.exp(1j * np.pi * (2 * k + n - 1) / (2 * n))

    half = proto * bw / 2
    root = np.sqrt(half**2 - w0**2)
    poles = np.concatenate([half + root, half - root])
    zeros = np.zeros(n)
    gain = bw**n

    _, pd, kd = _bilinear_zpk(zeros, poles, gain, fs)
    sections = []
    for p1, p2 in _pair_poles(pd):
        a1 = -(p1 + p2).real
        a2 = (p1 * p2).real
        sections.append([1.0, 0.0, -1.0, 1.0, a1, a2])
    cascade = BiquadCascade(np.array(sections), float(kd))
    if not cascade.is_stable():
        raise ArithmeticError("designed cascade is unstable")
    return cascade


def design_notch(notch_hz: float, q: float, fs_hz: float) -> BiquadCascade:
    """Second-order IIR notch with -3 dB bandwidth ``notch_hz / q``."""
    nyquist = fs_hz / 2
    if not 0 < notch_hz < nyquist:
        raise ValueError(f"notch frequency must be in (0, {nyquist}) Hz, got {notch_hz}")
    if q <= 0:
        raise ValueError(f"quality factor must be positive, got {q}")
    w0 = 2 * math.pi * notch_hz / fs_hz
    bw = w0 / q
    g = 1.0 / (1.0 + math.tan(bw / 2))
    c = math.cos(w0)
    section = [g, -2 * g * c, g, 1.0, -2 * g * c, 2 * g - 1]
    return BiquadCascade(np.array([section]), 1.0)


def apply_zero_phase(cascade: BiquadCascade, signal: SignalBlock) -> SignalBlock:
    """Forward-backward filtering with odd reflection padding.

    Net magnitude is ``|H|**2`` and net phase is zero.
    """
    padlen = cascade.padlen
    if signal.n_samples <= padlen:
        raise ValueError(
            f"signal has {signal.n_samples} samples; zero-phase filtering needs more than {padlen}"
        )
    out = sosfiltfilt(cascade.to_sos(), np.asarray(signal.data, dtype=float), axis=-1,
                      padtype="odd", padlen=padlen)
    return signal.replace(out)


def apply_causal(cascade: BiquadCascade, signal: SignalBlock) -> SignalBlock:
    out = sosfilt(cascade.to_sos(), np.asarray(signal.data, dtype=float), axis=-1)
    return signal.replace(out)


def apply_notch(signal: SignalBlock, notch_hz: float = 60.0, q: float = 30.0) -> SignalBlock:
    return apply_zero_phase(design_notch(notch_hz, q, signal.fs_hz), signal)


def downsample(signal: SignalBlock, factor: int) -> SignalBlock:
    """Keep every ``factor``-th sample starting at index 0 (no anti-alias filter)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    return signal.replace(signal.data[:, ::factor], signal.fs_hz / factor)


def _seconds_to_samples(seconds: float, fs_hz: float, what: str) -> int:
    n = seconds * fs_hz
    if abs(n - round(n)) > 1e-6:
        raise ValueError(f"{what} of {seconds} s is not a whole number of samples at {fs_hz} Hz")
    return int(round(n))


def epoch_extract(recording, window_offset_s: float = 10.0, window_len_s: float = 4.0):
    """Cut one epoch per trial-onset event: ``[onset + offset, onset + offset + len)``."""
    from .dataset import CLASS_NAMES, EpochSet

    sig = recording.signal
    offset = _seconds_to_samples(window_offset_s, sig.fs_hz, "window offset")
    length = _seconds_to_samples(window_len_s, sig.fs_hz, "window length")
    if length < 1 or offset < 0:
        raise ValueError("window length must be positive and offset non-negative")

    epochs = np.empty((len(recording.events), sig.n_channels, length), dtype=sig.data.dtype)
    labels = np.empty(len(recording.events), dtype=np.int64)
    for i, (onset, code) in enumerate(recording.events):
        if code not in range(len(CLASS_NAMES)):
            raise ValueError(f"trial {i}: unknown event code {code!r}")
        start = onset + offset
        stop = start + length
        if start < 0 or stop > sig.n_samples:
            raise ValueError(
                f"trial {i} (onset sample {onset}): window [{start}, {stop}) exceeds "
                f"recording of {sig.n_samples} samples"
            )
        epochs[i] = sig.data[:, start:stop]
        labels[i] = code
    return EpochSet(epochs, labels, np.full(len(labels), recording.subject_id, dtype=object),
                    sig.fs_hz, list(sig.channel_labels))


def channel_stats(data: np.ndarray, channel_labels: Sequence[str] | None = None):
    """Per-channel mean and population std over trials and samples of ``(n, c, t)`` data."""
    data = np.asarray(data, dtype=float)
    mean = data.mean(axis=(0, 2))
    std = data.std(axis=(0, 2))
    bad = np.flatnonzero(std <= 0)
    if bad.size:
        name = channel_labels[bad[0]] if channel_labels else str(bad[0])
        raise ValueError(f"channel {name} (index {bad[0]}) has zero variance in the training set")
    return mean, std


def standardize(train, others=()):
    """Scale ``train`` and every set in ``others`` by the train per-channel statistics."""
    if len(train) == 0:
        raise ValueError("cannot standardize with an empty training set")
    mean, std = channel_stats(train.data, train.channel_labels)

    def scale(es):
        return es.with_data((np.asarray(es.data, dtype=float) - mean[:, None]) / std[:, None])

    return scale(train), [scale(es) for es in others]
