import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scsnet.datasets import Epoch, TrialSet
from scsnet.preprocessing import (
    band_power_map,
    bandpass_filter,
    crop_trials,
    crop_trialset,
    notch_filter,
    select_channels,
    write_band_power_csv,
)

FS = 250.0


def sine(freq, fs=FS, seconds=4.0, amp=1.0):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t)[None, :]


def central_rms(x):
    n = x.shape[-1]
    mid = x[..., n // 4:3 * n // 4]
    return np.sqrt(np.mean(mid ** 2))


class TestNotch:
    def test_attenuates_target_tone(self):
        x = sine(50.0)
        y = notch_filter(x, 50.0, FS)
        drop_db = 20 * np.log10(central_rms(x) / central_rms(y))
        assert drop_db >= 20.0

    def test_passes_low_tone(self):
        x = sine(10.0)
        y = notch_filter(x, 50.0, FS)
        gain_db = 20 * np.log10(central_rms(y) / central_rms(x))
        assert abs(gain_db) <= 1.0

    def test_zero_input(self):
        np.testing.assert_array_equal(notch_filter(np.zeros((3, 500)), 50.0, FS),
                                      np.zeros((3, 500)))

    def test_rejects_nyquist(self):
        with pytest.raises(ValueError):
            notch_filter(np.zeros((1, 500)), 125.0, FS)


class TestBandpass:
    def test_removes_dc(self):
        x = np.full((1, 1000), 5.0)
        y = bandpass_filter(x, 1.0, 100.0, FS)
        n = y.shape[-1]
        assert abs(np.mean(y[:, n // 4:3 * n // 4])) < 1e-2

    def test_passes_in_band_tone(self):
        x = sine(10.0)
        y = bandpass_filter(x, 1.0, 100.0, FS)
        gain_db = 20 * np.log10(central_rms(y) / central_rms(x))
        assert abs(gain_db) <= 1.0

    def test_zero_input(self):
        np.testing.assert_array_equal(bandpass_filter(np.zeros((2, 600)), 1.0, 100.0, FS),
                                      np.zeros((2, 600)))

    def test_rejects_edge_at_nyquist(self):
        bandpass_filter(np.zeros((1, 500)), 1.0, 100.0, 250.0)  # valid at fs=250
        with pytest.raises(ValueError):
            bandpass_filter(np.zeros((1, 500)), 1.0, 100.0, 200.0)
        with pytest.raises(ValueError):
            bandpass_filter(np.zeros((1, 500)), 40.0, 10.0, 250.0)


class TestFilterProperties:
    @pytest.mark.parametrize("filt", [
        lambda x: notch_filter(x, 50.0, FS),
        lambda x: bandpass_filter(x, 1.0, 100.0, FS),
    ])
    def test_linearity(self, filt):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 800))
        y = rng.normal(size=(2, 800))
        a, b = 2.5, -1.25
        lhs = filt(a * x + b * y)
        rhs = a * filt(x) + b * filt(y)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_zero_phase_no_lag(self):
        x = sine(10.0, seconds=8.0)[0]
        y = bandpass_filter(x[None], 1.0, 100.0, FS)[0]
        n = len(x)
        mid = slice(n // 4, 3 * n // 4)
        corr = np.correlate(y[mid], x[mid], mode="full")
        lag = int(np.argmax(corr)) - (len(x[mid]) - 1)
        assert lag == 0


def _epoch(seconds, fs, label=0):
    n = int(seconds * fs)
    data = np.arange(2 * n, dtype=np.float64).reshape(2, n)
    return Epoch(data, label, "S01", fs)


class TestCrops:
    def test_two_second_crop_counts(self):
        crops = crop_trials(_epoch(4.0, 250.0), 2.0, 1.9)
        assert len(crops) == 21
        assert all(c.n_samples == 500 for c in crops)

    def test_window_equals_duration(self):
        epoch = _epoch(2.0, 250.0)
        crops = crop_trials(epoch, 2.0, 1.9)
        assert len(crops) == 1
        np.testing.assert_array_equal(crops[0].data, epoch.data)

    def test_five_second_trial(self):
        assert len(crop_trials(_epoch(5.0, 250.0), 2.0, 1.9)) == 31

    def test_non_integer_stride(self):
        with pytest.raises(ValueError):
            crop_trials(_epoch(4.0, 128.0), 2.0, 1.9)  # 0.1 s stride = 12.8 samples

    def test_crop_ordering_and_metadata(self):
        epoch = _epoch(4.0, 250.0, label=3)
        crops = crop_trials(epoch, 2.0, 1.9)
        onsets = [c.data[0, 0] for c in crops]
        assert onsets == sorted(onsets)
        assert all(c.label == 3 and c.subject_id == "S01" for c in crops)

    @given(length=st.integers(2, 300), width=st.integers(1, 300), stride=st.integers(1, 20))
    @settings(max_examples=100, deadline=None)
    def test_count_formula(self, length, width, stride):
        if width > length:
            return
        fs = 10.0
        epoch = Epoch(np.zeros((1, length)), 0, "S", fs)
        crops = crop_trials(epoch, width / fs, (width - stride) / fs)
        # enumeration oracle
        expected, start = 0, 0
        while start + width <= length:
            expected += 1
            start += stride
        assert len(crops) == expected == (length - width) // stride + 1


def _trialset(n_channels=4, names=None, fs=250.0, trials=3, label_fn=None, seed=0):
    rng = np.random.default_rng(seed)
    names = names or [f"ch{i}" for i in range(n_channels)]
    eps = [Epoch(rng.normal(size=(len(names), 100)).astype(np.float32),
                 label_fn(i) if label_fn else 0, "S01", fs)
           for i in range(trials)]
    return TrialSet(eps, names, fs, ["a", "b"])


class TestSelectChannels:
    def test_identity(self):
        ts = _trialset()
        out = select_channels(ts, ts.channel_names)
        assert out.channel_names == ts.channel_names
        np.testing.assert_array_equal(out.trials[0].data, ts.trials[0].data)

    def test_motor_cortex_channel_subset(self):
        motor = ["FC1", "FC2", "C3", "C4", "CP5", "CP1", "CP2", "CP6", "P3", "Pz", "P4"]
        all_names = [f"E{i}" for i in range(53)] + motor
        ts = _trialset(names=all_names)
        out = select_channels(ts, motor)
        assert out.channel_names == motor
        assert out.trials[0].data.shape[0] == 11

    def test_single_channel_projection(self):
        ts = _trialset(names=["Fz", "C3", "Pz"])
        out = select_channels(ts, ["C3"])
        np.testing.assert_array_equal(out.trials[0].data[0], ts.trials[0].data[1])

    def test_unknown_channel_named(self):
        ts = _trialset(names=["Fz", "C3"])
        with pytest.raises(KeyError, match="Oz"):
            select_channels(ts, ["C3", "Oz"])

    def test_composition(self):
        ts = _trialset(names=["a", "b", "c", "d"])
        nested = select_channels(select_channels(ts, ["d", "b", "a"]), ["b", "a"])
        direct = select_channels(ts, ["b", "a"])
        assert nested.channel_names == direct.channel_names
        np.testing.assert_array_equal(nested.trials[0].data, direct.trials[0].data)


class TestBandPower:
    def _toned_set(self, amp=1.0):
        fs = 250.0
        t = np.arange(500) / fs
        rng = np.random.default_rng(1)
        trials = []
        for i in range(8):
            data = rng.normal(scale=0.05, size=(3, 500))
            if i % 2 == 0:
                data[1] += amp * np.sin(2 * np.pi * 10.0 * t)  # tone on C3 for class 0
            trials.append(Epoch(data, i % 2, "S01", fs))
        return TrialSet(trials, ["Cz", "C3", "C4"], fs, ["tone", "rest"])

    def test_injected_tone_dominates(self):
        rows = band_power_map(self._toned_set(), 8.0, 30.0)
        tone_rows = {ch: p for cls, ch, p in rows if cls == "tone"}
        assert tone_rows["C3"] > tone_rows["Cz"]
        assert tone_rows["C3"] > tone_rows["C4"]

    def test_doubling_adds_six_db(self):
        ts = self._toned_set()
        doubled = ts.with_trials([Epoch(t.data * 2.0, t.label, t.subject_id, t.fs)
                                  for t in ts.trials])
        base = band_power_map(ts, 8.0, 30.0)
        loud = band_power_map(doubled, 8.0, 30.0)
        for (_, _, p0), (_, _, p1) in zip(base, loud):
            assert abs((p1 - p0) - 20.0 * math.log10(2.0)) < 1e-9

    def test_identical_classes_identical_maps(self):
        fs = 250.0
        rng = np.random.default_rng(2)
        block = [Epoch(rng.normal(size=(2, 500)), 0, "S01", fs) for _ in range(5)]
        mirrored = [Epoch(e.data.copy(), 1, "S01", fs) for e in block]
        ts = TrialSet(block + mirrored, ["c0", "c1"], fs, ["x", "y"])
        rows = band_power_map(ts, 8.0, 30.0)
        by_class = {}
        for cls, ch, p in rows:
            by_class.setdefault(cls, []).append(p)
        np.testing.assert_allclose(by_class["x"], by_class["y"], atol=1e-9)

    def test_empty_class_warns_and_skips(self):
        ts = _trialset(label_fn=lambda i: 0)  # class "b" absent
        with pytest.warns(UserWarning, match="'b'"):
            rows = band_power_map(ts, 8.0, 30.0)
        assert all(cls == "a" for cls, _, _ in rows)

    def test_csv_format(self, tmp_path):
        rows = [("a", "C3", 1.23456789), ("a", "C4", -3.5)]
        path = tmp_path / "power.csv"
        write_band_power_csv(rows, path)
        text = path.read_text(encoding="utf-8").splitlines()
        assert text[0] == "class,channel,power_db"
        assert text[1] == "a,C3,1.234568"
        assert text[2] == "a,C4,-3.500000"


def test_crop_trialset_order():
    fs = 250.0
    eps = [Epoch(np.full((1, 1000), float(i)), 0, "S01", fs) for i in range(3)]
    ts = TrialSet(eps, ["c"], fs, ["a"])
    crops = crop_trialset(ts, 2.0, 1.9)
    assert len(crops) == 63
    assert [c.data[0, 0] for c in crops.trials[:21]] == [0.0] * 21
