import numpy as np
import pytest

from sefenet.dataset import Recording, SynthConfig, synth_generate
from sefenet.preprocessing import PreprocessConfig, decimation_factor, preprocess_recording
from sefenet.signal import SignalBlock


@pytest.fixture(scope="module")
def protocol_subject():
    return synth_generate(SynthConfig(n_subjects=1))[0]


def test_protocol_shape(protocol_subject):
    es = preprocess_recording(protocol_subject)
    assert es.data.shape == (150, 64, 1000)
    assert es.fs_hz == 250.0
    assert es.class_counts().tolist() == [50, 50, 50]
    assert es.subjects == ["S01"]


def test_rerun_identical(protocol_subject):
    a = preprocess_recording(protocol_subject, PreprocessConfig(window_len_s=1.0))
    b = preprocess_recording(protocol_subject, PreprocessConfig(window_len_s=1.0))
    assert a.data.tobytes() == b.data.tobytes()


def test_options_change_output(protocol_subject):
    base = preprocess_recording(protocol_subject, PreprocessConfig(window_len_s=1.0)).data
    causal = preprocess_recording(protocol_subject, PreprocessConfig(window_len_s=1.0, zero_phase=False)).data
    notch = preprocess_recording(protocol_subject, PreprocessConfig(window_len_s=1.0, notch=True)).data
    assert not np.allclose(base, causal)
    assert not np.array_equal(base, notch)
    # synthetic data has nothing at 60 Hz, so the notch barely matters
    assert np.abs(base - notch).max() < 0.2 * np.abs(base).max()


def test_short_recording_names_trial():
    rec = Recording("S01", SignalBlock(np.zeros((2, 7500), np.float32), 500.0), [(0, 0), (1000, 1)])
    with pytest.raises(ValueError, match="trial 1"):
        preprocess_recording(rec)


def test_events_follow_decimation():
    fs = 500.0
    data = np.zeros((1, 8000), np.float32)
    t = np.arange(2000) / fs
    data[0, 5001:7001] = np.sin(2 * np.pi * 10 * t)  # window for an onset at sample 1
    rec = Recording("S01", SignalBlock(data, fs), [(1, 2)])
    es = preprocess_recording(rec)
    # onset 1 maps to decimated sample ceil(1/2) = 1, so the window starts at original sample 5002
    assert es.data.shape == (1, 1, 1000)
    assert np.abs(es.data[0, 0, 100:900]).max() == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("fs, target, expected", [(500, 250, 2), (1000, 250, 4), (250, 250, 1)])
def test_decimation_factor(fs, target, expected):
    assert decimation_factor(fs, target) == expected


@pytest.mark.parametrize("fs, target", [(500, 300), (250, 500)])
def test_decimation_factor_rejects(fs, target):
    with pytest.raises(ValueError):
        decimation_factor(fs, target)
