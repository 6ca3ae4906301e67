import json

import numpy as np
import pytest
from scipy import stats as sps

from sefenet.dataset import (
    CLASS_NAMES,
    ChannelMismatchError,
    EpochSet,
    EventError,
    LeakageError,
    MalformedHeaderError,
    Recording,
    SynthConfig,
    TruncatedPayloadError,
    class_channel_groups,
    derive_seed,
    make_loso_folds,
    read_recording,
    split_train_val,
    synth_generate,
    write_recording,
)
from sefenet.signal import SignalBlock, epoch_extract


def _recording(rng, n_ch=64, fs=500.0, n_events=150):
    trial = 14 * int(fs)
    data = rng.normal(size=(n_ch, n_events * trial + 10)).astype(np.float32)
    events = [(k * trial, k % 3) for k in range(n_events)]
    return Recording("S07", SignalBlock(data, fs, [f"E{i}" for i in range(n_ch)]), events)


def _epochs(n_per_class, subject="S01", n_ch=2, n_t=5, seed=0):
    labels = np.repeat(np.arange(3), n_per_class)
    data = np.random.default_rng(seed).normal(size=(labels.size, n_ch, n_t))
    return EpochSet(data, labels, np.full(labels.size, subject, object), 250.0)


class TestRecordingIO:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        rec = _recording(rng)
        write_recording(rec, tmp_path / "S07")
        back = read_recording(tmp_path / "S07")
        assert back == rec
        assert back.signal.data.tobytes() == rec.signal.data.tobytes()
        assert len(back.events) == 150

    def test_empty_events(self, tmp_path):
        rec = Recording("S01", SignalBlock(np.zeros((2, 10), np.float32), 500.0), [])
        write_recording(rec, tmp_path / "r")
        assert read_recording(tmp_path / "r").events == []

    def test_layout_on_disk(self, tmp_path):
        data = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_recording(Recording("S01", SignalBlock(data, 100.0, ["a", "b"]), [(1, 2)]), tmp_path)
        header = json.loads((tmp_path / "header.json").read_text())
        assert header["channel_labels"] == ["a", "b"] and header["dtype"] == "<f4"
        np.testing.assert_array_equal(np.fromfile(tmp_path / "signal.f32", "<f4"), np.arange(6))
        assert (tmp_path / "events.csv").read_text() == "sample_index,code\n1,2\n"

    def test_event_beyond_signal_names_event(self, tmp_path):
        write_recording(Recording("S01", SignalBlock(np.zeros((1, 10), np.float32), 100.0), [(2, 0)]),
                        tmp_path)
        (tmp_path / "events.csv").write_text("sample_index,code\n2,0\n10,1\n")
        with pytest.raises(EventError, match="event 1 at sample 10"):
            read_recording(tmp_path)

    def test_distinct_errors(self, tmp_path):
        rec = Recording("S01", SignalBlock(np.zeros((2, 10), np.float32), 100.0), [])
        write_recording(rec, tmp_path)
        (tmp_path / "signal.f32").write_bytes(b"\0" * 12)
        with pytest.raises(TruncatedPayloadError):
            read_recording(tmp_path)

        write_recording(rec, tmp_path)
        h = json.loads((tmp_path / "header.json").read_text())
        h["channel_labels"] = ["only-one"]
        (tmp_path / "header.json").write_text(json.dumps(h))
        with pytest.raises(ChannelMismatchError):
            read_recording(tmp_path)

        (tmp_path / "header.json").write_text("{not json")
        with pytest.raises(MalformedHeaderError):
            read_recording(tmp_path)

        for exc in (TruncatedPayloadError, ChannelMismatchError, MalformedHeaderError, EventError):
            assert issubclass(exc, ValueError)
        assert len({TruncatedPayloadError, ChannelMismatchError, MalformedHeaderError, EventError}) == 4

    def test_invariants_on_construction(self):
        sig = SignalBlock(np.zeros((1, 10)), 100.0)
        with pytest.raises(EventError):
            Recording("S", sig, [(5, 0), (5, 1)])
        with pytest.raises(EventError):
            Recording("S", sig, [(1, 3)])
        with pytest.raises(ValueError):
            SignalBlock(np.zeros((2, 10)), 100.0, ["a"])
        with pytest.raises(ValueError):
            SignalBlock(np.array([[np.nan]]), 100.0)


class TestEpochSet:
    def test_save_load(self, tmp_path):
        es = _epochs(4)
        es.save(tmp_path / "x.npz")
        back = EpochSet.load(tmp_path / "x.npz")
        np.testing.assert_array_equal(back.data, es.data)
        assert back.labels.tolist() == es.labels.tolist() and back.subjects == ["S01"]

    def test_invariants(self):
        with pytest.raises(ValueError):
            EpochSet(np.zeros((3, 1, 2)), [0, 1], ["a"] * 3, 1.0)
        with pytest.raises(ValueError):
            EpochSet(np.full((1, 1, 2), np.inf), [0], ["a"], 1.0)


class TestFolds:
    def test_ten_subjects(self):
        ids = [f"S{i}" for i in range(1, 11)]
        plan = make_loso_folds(ids)
        assert len(plan) == 10
        assert sorted(f.test_subject for f in plan) == sorted(ids)
        for f in plan:
            assert len(f.train_subjects) == 9 and f.test_subject not in f.train_subjects

    def test_two_subjects(self):
        plan = make_loso_folds(["A", "B"])
        assert [f.train_subjects for f in plan] == [("B",), ("A",)]

    def test_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            make_loso_folds(["A", "A", "B"])

    def test_needs_two(self):
        with pytest.raises(ValueError, match="at least 2"):
            make_loso_folds(["A"])

    def test_fold_seeds_distinct_and_stable(self):
        a = make_loso_folds(list("ABCD"), seed=3)
        b = make_loso_folds(list("ABCD"), seed=3)
        assert [f.seed for f in a] == [f.seed for f in b]
        assert len({f.seed for f in a}) == 4

    def test_check_detects_leakage(self):
        from sefenet.dataset import Fold, FoldPlan

        with pytest.raises(LeakageError):
            FoldPlan((Fold(0, "A", ("A", "B"), 0),)).check()

    def test_derive_seed(self):
        assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
        assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)


class TestSplit:
    def test_protocol_counts(self):
        tr, va = split_train_val(_epochs(50), 0.8, seed=1)
        assert len(tr) == 120 and len(va) == 30
        assert tr.class_counts().tolist() == [40, 40, 40]
        assert va.class_counts().tolist() == [10, 10, 10]

    def test_small_counts(self):
        tr, va = split_train_val(_epochs(10), 0.8, seed=1)
        assert (len(tr), len(va)) == (24, 6)
        assert tr.class_counts().tolist() == [8, 8, 8] and va.class_counts().tolist() == [2, 2, 2]

    def test_deterministic_and_disjoint(self):
        es = _epochs(10)
        a = split_train_val(es, 0.8, seed=5)
        b = split_train_val(es, 0.8, seed=5)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        c = split_train_val(es, 0.8, seed=6)
        assert not np.array_equal(a[0].data, c[0].data)
        rows = lambda s: {r.tobytes() for r in s.data}
        assert not rows(a[0]) & rows(a[1])
        assert len(rows(a[0]) | rows(a[1])) == len(es)

    @pytest.mark.parametrize("n, ratio", [(7, 0.8), (13, 0.5), (3, 0.7)])
    def test_floor_rule(self, n, ratio):
        tr, va = split_train_val(_epochs(n), ratio, seed=0)
        k = int(np.floor(ratio * n))
        assert tr.class_counts().tolist() == [k] * 3
        assert va.class_counts().tolist() == [n - k] * 3

    def test_class_too_small(self):
        with pytest.raises(ValueError, match="at least 2"):
            split_train_val(_epochs(1), 0.8)

    def test_single_subject_only(self):
        es = EpochSet.concatenate([_epochs(3, "A"), _epochs(3, "B")])
        with pytest.raises(ValueError, match="one subject"):
            split_train_val(es)


def _band_power(rec, freq, channels, code, fs):
    es = epoch_extract(rec)
    sel = es.data[es.labels == code][:, channels]
    spec = np.abs(np.fft.rfft(sel, axis=-1)) ** 2
    k = int(round(freq * sel.shape[-1] / fs))
    return spec[..., k].mean(axis=1)


class TestSynth:
    small = dict(n_channels=6, fs_hz=100.0, trials_per_class=20, n_subjects=3)

    def test_label_balance_and_timeline(self):
        recs = synth_generate(SynthConfig(**self.small))
        assert [r.subject_id for r in recs] == ["S01", "S02", "S03"]
        for r in recs:
            codes = [c for _, c in r.events]
            assert np.bincount(codes).tolist() == [20, 20, 20]
            assert [s for s, _ in r.events] == [k * 1400 for k in range(60)]
            assert r.signal.n_samples == 60 * 1400 + 400

    def test_deterministic(self):
        a = synth_generate(SynthConfig(**self.small, seed=4))
        b = synth_generate(SynthConfig(**self.small, seed=4))
        c = synth_generate(SynthConfig(**self.small, seed=5))
        assert all(x == y for x, y in zip(a, b))
        assert a[0] != c[0]

    def test_identical_subjects_without_variability(self):
        cfg = SynthConfig(n_channels=6, fs_hz=100.0, trials_per_class=50, n_subjects=2,
                          subject_variability=0.0, snr_db=20.0)
        recs = synth_generate(cfg)
        groups = class_channel_groups(6)
        for code, freq in enumerate(cfg.class_freqs_hz):
            p = [_band_power(r, freq, groups[code], code, cfg.fs_hz).mean() for r in recs]
            assert abs(p[0] - p[1]) / np.mean(p) < 0.05

    def test_signature_drowned_at_minus_40db(self):
        cfg = SynthConfig(n_channels=6, fs_hz=100.0, trials_per_class=50, n_subjects=1, snr_db=-40.0)
        rec = synth_generate(cfg)[0]
        groups = class_channel_groups(6)
        # power at the class-0 band on class-0 channels: class 0 vs class 1 trials
        a = _band_power(rec, cfg.class_freqs_hz[0], groups[0], 0, cfg.fs_hz)
        b = _band_power(rec, cfg.class_freqs_hz[0], groups[0], 1, cfg.fs_hz)
        assert sps.ttest_ind(a, b).pvalue > 0.01

    def test_signature_visible_at_high_snr(self):
        cfg = SynthConfig(n_channels=6, fs_hz=100.0, trials_per_class=20, n_subjects=1, snr_db=10.0)
        rec = synth_generate(cfg)[0]
        groups = class_channel_groups(6)
        a = _band_power(rec, cfg.class_freqs_hz[0], groups[0], 0, cfg.fs_hz)
        b = _band_power(rec, cfg.class_freqs_hz[0], groups[0], 1, cfg.fs_hz)
        assert a.min() > b.max()

    @pytest.mark.parametrize("kw", [dict(n_subjects=0), dict(subject_variability=1.5),
                                    dict(n_channels=2), dict(class_freqs_hz=(1.0, 2.0))])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


def test_class_names_fixed_order():
    assert CLASS_NAMES == ("spread-out", "fall-in", "hovering")
