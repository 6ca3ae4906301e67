import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sine(freq_hz, fs_hz, seconds, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * fs_hz))) / fs_hz
    return amp * np.sin(2 * np.pi * freq_hz * t + phase)
