import numpy as np
import pytest
import scipy.signal as ss
from hypothesis import given, settings, strategies as st

from conftest import sine
from sefenet.dataset import Recording
from sefenet.signal import (
    BiquadCascade,
    FilterSpec,
    SignalBlock,
    apply_causal,
    apply_notch,
    apply_zero_phase,
    design_butterworth_bandpass,
    design_notch,
    downsample,
    epoch_extract,
    standardize,
)
from sefenet.dataset import EpochSet

FS = 500.0

# |H| of the 5th-order 0.5-50 Hz band-pass at fs 500, from scipy.signal.butter + sosfreqz
BUTTER_ORACLE = {0.5: 0.70710678, 5.0: 1.0, 10.0: 1.0, 40.0: 0.95804135, 50.0: 0.70710678,
                 100.0: 0.01720347}


@pytest.fixture(scope="module")
def cascade():
    return design_butterworth_bandpass(FilterSpec())


def block(x, fs=FS):
    return SignalBlock(np.atleast_2d(x), fs)


class TestDesign:
    def test_section_count_and_order(self, cascade):
        assert cascade.n_sections == 5
        assert cascade.order == 10

    def test_structural_zeros(self, cascade):
        mag = cascade.magnitude([0.0, FS / 2], FS)
        assert mag[0] < 1e-12 and mag[1] < 1e-12

    @pytest.mark.parametrize("f, expected", sorted(BUTTER_ORACLE.items()))
    def test_response_matches_oracle(self, cascade, f, expected):
        assert cascade.magnitude([f], FS)[0] == pytest.approx(expected, abs=1e-7)

    def test_passband_flat_at_5hz(self, cascade):
        assert 0.99 <= cascade.magnitude([5.0], FS)[0] <= 1.0 + 1e-12

    @pytest.mark.parametrize("edge", [0.5, 50.0])
    def test_minus_3db_edges(self, cascade, edge):
        assert 0.70 <= cascade.magnitude([edge], FS)[0] <= 0.72

    def test_all_sections_stable(self, cascade):
        assert np.all(np.abs(cascade.poles()) < 1)
        assert cascade.is_stable()

    def test_sos_matches_scipy_response(self, cascade):
        freqs = np.linspace(0, FS / 2, 257)
        _, h_ref = ss.sosfreqz(ss.butter(5, [0.5, 50], "bandpass", fs=FS, output="sos"), freqs, fs=FS)
        np.testing.assert_allclose(np.abs(cascade.frequency_response(freqs, FS)), np.abs(h_ref),
                                   atol=1e-9)

    @pytest.mark.parametrize("order, low, high, fs", [(1, 1, 30, 200), (3, 4, 8, 128), (8, 0.1, 40, 250)])
    def test_other_designs_match_scipy(self, order, low, high, fs):
        c = design_butterworth_bandpass(FilterSpec("band-pass", order, low, high, fs))
        freqs = np.linspace(0.01, fs / 2 - 0.01, 101)
        _, h_ref = ss.sosfreqz(ss.butter(order, [low, high], "bandpass", fs=fs, output="sos"), freqs, fs=fs)
        np.testing.assert_allclose(c.magnitude(freqs, fs), np.abs(h_ref), atol=1e-8)

    @pytest.mark.parametrize("kw", [dict(low_hz=0.0), dict(low_hz=-1.0), dict(high_hz=250.0),
                                    dict(high_hz=300.0), dict(order=0), dict(low_hz=60.0)])
    def test_rejects_invalid_specs(self, kw):
        with pytest.raises(ValueError):
            FilterSpec(**kw)

    def test_gain_folded_into_first_section(self, cascade):
        sos = cascade.to_sos()
        assert sos.shape == (5, 6)
        np.testing.assert_allclose(sos[:, 3], 1.0)


class TestZeroPhase:
    def test_dc_is_removed(self, cascade):
        out = apply_zero_phase(cascade, block(np.full(5000, 7.5))).data[0]
        # away from the edges the steady-state output is zero
        assert np.max(np.abs(out[1000:-1000])) < 1e-6 * 7.5

    # the 0.5 Hz edge rings for ~4 s after each signal end, so steady-state
    # amplitudes are read from the middle of a 20 s tone
    def test_10hz_passes_without_lag(self, cascade):
        x = sine(10, FS, 20)
        y = apply_zero_phase(cascade, block(x)).data[0]
        mid = slice(2500, 7500)
        assert np.max(np.abs(y[mid])) == pytest.approx(1.0, rel=0.02)
        lags = np.arange(-25, 26)
        xc = [np.dot(x[mid], np.roll(y, -k)[mid]) for k in lags]
        assert lags[int(np.argmax(xc))] == 0

    def test_100hz_attenuated_40db(self, cascade):
        y = apply_zero_phase(cascade, block(sine(100, FS, 20))).data[0]
        assert 20 * np.log10(np.max(np.abs(y[2500:7500]))) <= -40

    def test_shape_preserved(self, cascade, rng):
        x = rng.normal(size=(4, 700))
        y = apply_zero_phase(cascade, SignalBlock(x, FS, list("abcd")))
        assert y.data.shape == x.shape and y.channel_labels == list("abcd") and y.fs_hz == FS

    def test_too_short_raises(self, cascade):
        with pytest.raises(ValueError, match="zero-phase"):
            apply_zero_phase(cascade, block(np.zeros(cascade.padlen)))

    def test_matches_sosfiltfilt(self, cascade, rng):
        x = rng.normal(size=(2, 2000))
        ref = ss.sosfiltfilt(ss.butter(5, [0.5, 50], "bandpass", fs=FS, output="sos"), x)
        np.testing.assert_allclose(apply_zero_phase(cascade, block(x)).data, ref, atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
    def test_linearity(self, a, b, seed):
        c = design_butterworth_bandpass(FilterSpec())
        r = np.random.default_rng(seed)
        x, y = r.normal(size=600), r.normal(size=600)
        lhs = apply_zero_phase(c, block(a * x + b * y)).data
        rhs = a * apply_zero_phase(c, block(x)).data + b * apply_zero_phase(c, block(y)).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))

    def test_causal_introduces_lag(self, cascade):
        x = sine(10, FS, 10)
        y = apply_causal(cascade, block(x)).data[0]
        ref = ss.sosfilt(ss.butter(5, [0.5, 50], "bandpass", fs=FS, output="sos"), x)
        np.testing.assert_allclose(y, ref, atol=1e-9)
        assert not np.allclose(y[2000:3000], x[2000:3000], atol=0.05)


class TestNotch:
    def test_60hz_removed(self):
        y = apply_notch(block(sine(60, FS, 10))).data[0]
        assert np.max(np.abs(y[1000:-1000])) < 0.01

    def test_10hz_kept(self):
        y = apply_notch(block(sine(10, FS, 10))).data[0]
        assert np.max(np.abs(y[1000:-1000])) == pytest.approx(1.0, rel=0.01)

    def test_zero_in_zero_out(self):
        assert np.all(apply_notch(block(np.zeros(1000))).data == 0)

    def test_matches_iirnotch(self):
        b, a = ss.iirnotch(60, 30, fs=FS)
        c = design_notch(60, 30, FS)
        np.testing.assert_allclose(c.to_sos()[0], np.r_[b, a], atol=1e-12)

    def test_depth_below_minus_40db(self):
        assert design_notch(60, 30, FS).magnitude([60.0], FS)[0] < 0.01

    def test_flat_well_away_from_notch(self):
        # one bandwidth away (2 Hz) the gain is only ~0.89; at five it is within 1%
        c = design_notch(60, 30, FS)
        assert c.magnitude([58.0], FS)[0] == pytest.approx(0.8969, abs=1e-3)
        far = np.r_[np.linspace(1, 50, 50), np.linspace(70, 249, 50)]
        assert np.all(np.abs(c.magnitude(far, FS) - 1) < 0.01)

    @pytest.mark.parametrize("f", [0.0, -5.0, 250.0, 400.0])
    def test_invalid_frequency(self, f):
        with pytest.raises(ValueError):
            apply_notch(block(np.zeros(1000)), f)


class TestDownsample:
    def test_constant(self):
        out = downsample(block(np.full(2000, 3.0)), 2)
        assert out.n_samples == 1000 and out.fs_hz == 250.0 and np.all(out.data == 3.0)

    def test_sine_amplitude(self):
        out = downsample(block(sine(10, FS, 2)), 2)
        np.testing.assert_allclose(out.data[0], sine(10, 250, 2), atol=1e-12)

    def test_ceil_length(self):
        assert downsample(block(np.zeros(2001)), 2).n_samples == 1001

    @pytest.mark.parametrize("f", [0, -1, 1.5])
    def test_bad_factor(self, f):
        with pytest.raises(ValueError):
            downsample(block(np.zeros(10)), f)


def _rec(n_samples, events, fs=250.0, n_ch=2):
    data = np.arange(n_ch * n_samples, dtype=np.float32).reshape(n_ch, n_samples)
    return Recording("S01", SignalBlock(data, fs), events)


class TestEpoch:
    def test_imagery_window(self):
        es = epoch_extract(_rec(3500, [(0, 1)]))
        assert es.data.shape == (1, 2, 1000)
        np.testing.assert_array_equal(es.data[0, 0], np.arange(2500, 3500))
        assert es.labels.tolist() == [1]

    def test_full_window_identity(self):
        rec = _rec(400, [(0, 2)])
        es = epoch_extract(rec, 0, 400 / 250)
        np.testing.assert_array_equal(es.data[0], rec.signal.data)

    def test_150_trials(self):
        trial = 14 * 250
        events = [(k * trial, k % 3) for k in range(150)]
        es = epoch_extract(_rec(150 * trial, events, n_ch=1))
        assert len(es) == 150 and es.class_counts().tolist() == [50, 50, 50]

    def test_window_out_of_bounds_names_trial(self):
        with pytest.raises(ValueError, match="trial 1"):
            epoch_extract(_rec(4000, [(0, 0), (600, 1)]))

    def test_unknown_code(self):
        rec = _rec(4000, [(0, 0)])
        rec.events[0] = (0, 7)
        with pytest.raises(ValueError, match="unknown event code"):
            epoch_extract(rec)

    def test_planted_signature_round_trip(self, rng):
        fs, trial = 250.0, 14 * 250
        n = 6
        data = rng.normal(size=(3, n * trial)).astype(np.float32)
        events = [(k * trial, k % 3) for k in range(n)]
        for k, (onset, _) in enumerate(events):
            data[:, onset + 2500:onset + 3500] = k + 100
        es = epoch_extract(Recording("S01", SignalBlock(data, fs), events))
        for k in range(n):
            assert np.all(es.data[k] == k + 100)


class TestStandardize:
    def _es(self, data):
        data = np.asarray(data, dtype=float)
        return EpochSet(data, np.zeros(len(data), int), np.full(len(data), "S01", object), 250.0)

    def test_train_is_zscored(self, rng):
        tr = self._es(rng.normal(3, 2, size=(20, 4, 50)))
        out, _ = standardize(tr)
        assert np.all(np.abs(out.data.mean(axis=(0, 2))) < 1e-6)
        np.testing.assert_allclose(out.data.std(axis=(0, 2)), 1, atol=1e-6)

    def test_plus_minus_one_unchanged(self):
        x = np.tile([-1.0, 1.0], (2, 1, 5))
        out, _ = standardize(self._es(x))
        np.testing.assert_allclose(out.data, x)

    def test_uses_train_statistics(self, rng):
        tr = self._es(rng.normal(0, 1, size=(30, 2, 40)))
        held = self._es(rng.normal(5, 1, size=(30, 2, 40)))
        _, (h,) = standardize(tr, [held])
        assert np.all(h.data.mean(axis=(0, 2)) > 3)

    def test_zero_variance_names_channel(self):
        x = np.ones((3, 2, 10))
        x[:, 0] = np.arange(10)
        es = EpochSet(x, np.zeros(3, int), np.full(3, "S01", object), 250.0, ["Fz", "Cz"])
        with pytest.raises(ValueError, match="Cz"):
            standardize(es)


def test_biquad_rejects_bad_shape():
    with pytest.raises(ValueError):
        BiquadCascade(np.zeros((2, 5)), 1.0)
