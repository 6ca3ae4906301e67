"""Recording -> EpochSet: optional notch, band-pass, decimation and epoching."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .dataset import IMAGERY_LEN_S, IMAGERY_OFFSET_S, EpochSet, Recording
from .signal import (
    FilterSpec,
    apply_causal,
    apply_notch,
    apply_zero_phase,
    design_butterworth_bandpass,
    downsample,
    epoch_extract,
)


@dataclass(frozen=True)
class PreprocessConfig:
    notch: bool = False
    notch_hz: float = 60.0
    notch_q: float = 30.0
    bandpass_order: int = 5
    low_hz: float = 0.5
    high_hz: float = 50.0
    zero_phase: bool = True
    target_fs_hz: float = 250.0
    window_offset_s: float = IMAGERY_OFFSET_S
    window_len_s: float = IMAGERY_LEN_S


def decimation_factor(fs_hz: float, target_fs_hz: float) -> int:
    factor = fs_hz / target_fs_hz
    if factor < 1 or abs(factor - round(factor)) > 1e-9:
        raise ValueError(f"cannot reach {target_fs_hz} Hz from {fs_hz} Hz by integer decimation")
    return int(round(factor))


def preprocess_recording(recording: Recording, cfg: PreprocessConfig = PreprocessConfig()) -> EpochSet:
    sig = recording.signal
    if cfg.notch:
        sig = apply_notch(sig, cfg.notch_hz, cfg.notch_q)
    cascade = design_butterworth_bandpass(
        FilterSpec("band-pass", cfg.bandpass_order, cfg.low_hz, cfg.high_hz, sig.fs_hz)
    )
    sig = apply_zero_phase(cascade, sig) if cfg.zero_phase else apply_causal(cascade, sig)
    factor = decimation_factor(sig.fs_hz, cfg.target_fs_hz)
    sig = downsample(sig, factor)
    # sample j of the decimated signal is original sample j * factor
    events = [(math.ceil(s / factor), c) for s, c in recording.events]
    decimated = Recording(recording.subject_id, sig, events)
    return epoch_extract(decimated, cfg.window_offset_s, cfg.window_len_s)
