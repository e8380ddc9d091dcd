"""Per-trial preprocessing: notch and bandpass filtering, crop generation,
channel selection, and per-class band-power tables.

Filters are zero-phase (forward-backward) IIR designs applied along the time
axis, the offline convention for this kind of data; a causal deployment
would switch to forward-only filtering.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.signal import butter, filtfilt, iirnotch

from .datasets import Epoch, TrialSet

NOTCH_Q = 30.0
BANDPASS_ORDER = 4


def notch_filter(x: np.ndarray, f0: float, fs: float) -> np.ndarray:
    """Second-order IIR notch at f0, zero-phase, per channel."""
    if not 0.0 < f0 < fs / 2.0:
        raise ValueError(f"notch frequency {f0} must lie in (0, {fs / 2})")
    b, a = iirnotch(f0, NOTCH_Q, fs=fs)
    return filtfilt(b, a, np.asarray(x, dtype=np.float64), axis=-1)


def bandpass_filter(x: np.ndarray, low: float, high: float, fs: float) -> np.ndarray:
    """4th-order Butterworth bandpass, zero-phase, per channel."""
    if not 0.0 < low < high:
        raise ValueError("band edges must satisfy 0 < low < high")
    if high >= fs / 2.0:
        raise ValueError(f"band edge {high} reaches the Nyquist frequency {fs / 2}")
    b, a = butter(BANDPASS_ORDER, [low, high], btype="bandpass", fs=fs)
    return filtfilt(b, a, np.asarray(x, dtype=np.float64), axis=-1)


def _samples(seconds: float, fs: float, what: str) -> int:
    exact = seconds * fs
    rounded = round(exact)
    if abs(exact - rounded) > 1e-9 or rounded < 1:
        raise ValueError(f"{what} of {seconds} s is not a whole number of samples at fs={fs}")
    return int(rounded)


def crop_trials(epoch: Epoch, win_s: float, overlap_s: float) -> list[Epoch]:
    """Slice a trial into overlapping fixed-length crops, ordered by onset.

    Produces floor((L - W) / S) + 1 crops where W is the window and
    S = win_s - overlap_s the stride, all in samples.
    """
    if overlap_s >= win_s:
        raise ValueError("overlap must be shorter than the window")
    width = _samples(win_s, epoch.fs, "window")
    stride = _samples(win_s - overlap_s, epoch.fs, "stride")
    if width > epoch.n_samples:
        raise ValueError("window exceeds the trial duration")
    count = (epoch.n_samples - width) // stride + 1
    return [Epoch(epoch.data[:, i * stride:i * stride + width].copy(),
                  epoch.label, epoch.subject_id, epoch.fs)
            for i in range(count)]


def crop_trialset(trial_set: TrialSet, win_s: float, overlap_s: float) -> TrialSet:
    """Crop every trial; output ordered trial-major, then by onset."""
    crops: list[Epoch] = []
    for trial in trial_set.trials:
        crops.extend(crop_trials(trial, win_s, overlap_s))
    return trial_set.with_trials(crops)


def select_channels(trial_set: TrialSet, names: list[str]) -> TrialSet:
    """Project onto the requested channels, in the requested order."""
    missing = [n for n in names if n not in trial_set.channel_names]
    if missing:
        raise KeyError(f"unknown channel(s): {', '.join(missing)}")
    idx = [trial_set.channel_names.index(n) for n in names]
    trials = [Epoch(t.data[idx].copy(), t.label, t.subject_id, t.fs)
              for t in trial_set.trials]
    return TrialSet(trials, list(names), trial_set.fs, list(trial_set.class_names))


def band_power_map(trial_set: TrialSet, band_low: float, band_high: float
                   ) -> list[tuple[str, str, float]]:
    """Per-class, per-channel average band power in dB.

    Each trial is bandpassed to [band_low, band_high]; power is the mean
    squared amplitude across that class's trials and samples, reported as
    10*log10. Classes without trials are skipped with a warning. Rows are
    ordered by class index, then channel order.
    """
    if not 0.0 < band_low < band_high or band_high >= trial_set.fs / 2.0:
        raise ValueError("band must lie strictly inside (0, fs/2)")
    labels = trial_set.labels()
    rows: list[tuple[str, str, float]] = []
    for c, class_name in enumerate(trial_set.class_names):
        members = [trial_set.trials[i] for i in np.flatnonzero(labels == c)]
        if not members:
            warnings.warn(f"class {class_name!r} has no trials; skipped from band power map")
            continue
        total = np.zeros(len(trial_set.channel_names))
        count = 0
        for trial in members:
            filtered = bandpass_filter(trial.data, band_low, band_high, trial_set.fs)
            total += np.mean(filtered ** 2, axis=1)
            count += 1
        power_db = 10.0 * np.log10(total / count)
        rows.extend((class_name, ch, float(p))
                    for ch, p in zip(trial_set.channel_names, power_db))
    return rows


def write_band_power_csv(rows: list[tuple[str, str, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,channel,power_db\n")
        for class_name, channel, power in rows:
            fh.write(f"{class_name},{channel},{power:.6f}\n")


def preprocess_trialset(trial_set: TrialSet, notch_hz: float | None = 50.0,
                        band: tuple[float, float] | None = (1.0, 100.0),
                        channels: list[str] | None = None) -> TrialSet:
    """The standard pipeline: notch, bandpass, optional channel selection.

    Filtering runs in float64 per trial; results are stored back at the
    container precision (float32).
    """
    ts = select_channels(trial_set, channels) if channels else trial_set
    trials = []
    for trial in ts.trials:
        data = trial.data.astype(np.float64)
        if notch_hz is not None:
            data = notch_filter(data, notch_hz, ts.fs)
        if band is not None:
            data = bandpass_filter(data, band[0], band[1], ts.fs)
        trials.append(Epoch(data.astype(np.float32), trial.label, trial.subject_id, trial.fs))
    return ts.with_trials(trials)
