"""Trial containers, the on-disk dataset format, synthetic multi-subject
generation, the train/val/test split protocol, balanced upsampling, and
multi-branch batch iteration.

Containers store float32 samples; all numeric work downstream runs in
float64. One container file holds one TrialSet (a single subject's session).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HEADER_KEYS = ("format_version", "fs_hz", "n_trials", "n_channels", "n_samples",
               "channel_names", "class_names", "subject_id")
FORMAT_VERSION = 1


class ContainerFormatError(ValueError):
    """Raised when a dataset file is malformed; the message names the field."""


@dataclass
class Epoch:
    """One fixed-length multi-channel trial (or crop) with its label."""

    data: np.ndarray  # [channels, samples]
    label: int
    subject_id: str
    fs: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("epoch data must be [channels, samples]")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.label < 0:
            raise ValueError("label must be a nonnegative class index")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class TrialSet:
    """A labeled collection of same-shape epochs sharing one channel layout."""

    trials: list[Epoch]
    channel_names: list[str]
    fs: float
    class_names: list[str]

    def __post_init__(self):
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        n_ch = len(self.channel_names)
        for t in self.trials:
            if t.n_channels != n_ch:
                raise ValueError("trial channel count does not match channel_names")
            if t.n_samples != self.trials[0].n_samples:
                raise ValueError("trials must share one samples-per-trial extent")
            if t.fs != self.fs:
                raise ValueError("trial fs does not match the set fs")
            if t.label >= len(self.class_names):
                raise ValueError("trial label exceeds class_names")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def n_samples(self) -> int:
        return self.trials[0].n_samples if self.trials else 0

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def data_array(self, dtype=np.float64) -> np.ndarray:
        if not self.trials:
            return np.zeros((0, len(self.channel_names), 0), dtype=dtype)
        return np.stack([t.data for t in self.trials]).astype(dtype)

    def subset(self, indices) -> "TrialSet":
        return TrialSet([self.trials[i] for i in indices],
                        list(self.channel_names), self.fs, list(self.class_names))

    def with_trials(self, trials: list[Epoch]) -> "TrialSet":
        return TrialSet(trials, list(self.channel_names), self.fs, list(self.class_names))


@dataclass
class SubjectDataset:
    """One subject's recording sessions, in chronological order."""

    subject_id: str
    sessions: list[TrialSet]


# ---------------------------------------------------------------------------
# container format


def _check_name(kind: str, name: str) -> None:
    if "," in name or "\n" in name:
        raise ValueError(f"{kind} {name!r} may not contain commas or newlines")


def save_trialset(trial_set: TrialSet, path) -> None:
    """Write one TrialSet: text header, blank line, uint8 labels, float32
    little-endian payload in [trial][channel][sample] order."""
    subjects = {t.subject_id for t in trial_set.trials}
    if len(subjects) > 1:
        raise ValueError("a container holds trials of a single subject")
    subject_id = subjects.pop() if subjects else ""
    _check_name("subject id", subject_id)
    for name in trial_set.channel_names:
        _check_name("channel name", name)
    for name in trial_set.class_names:
        _check_name("class name", name)
    labels = trial_set.labels()
    if labels.size and labels.max() > 255:
        raise ValueError("labels above 255 do not fit the container format")

    header = (
        f"format_version={FORMAT_VERSION}\n"
        f"fs_hz={trial_set.fs!r}\n"
        f"n_trials={len(trial_set)}\n"
        f"n_channels={len(trial_set.channel_names)}\n"
        f"n_samples={trial_set.n_samples}\n"
        f"channel_names={','.join(trial_set.channel_names)}\n"
        f"class_names={','.join(trial_set.class_names)}\n"
        f"subject_id={subject_id}\n"
        "\n"
    )
    payload = trial_set.data_array(dtype=np.float32).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(labels.astype(np.uint8).tobytes())
        fh.write(payload.tobytes())


def _parse_int(fields: dict, key: str) -> int:
    try:
        value = int(fields[key])
    except ValueError:
        raise ContainerFormatError(f"field {key} is not a decimal integer") from None
    if value < 0:
        raise ContainerFormatError(f"field {key} must be nonnegative")
    return value


def load_trialset(path) -> TrialSet:
    """Read a container written by save_trialset; round-trips bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ContainerFormatError("header not terminated by a blank line")
    try:
        header = blob[:sep].decode("utf-8")
    except UnicodeDecodeError:
        raise ContainerFormatError("header is not valid UTF-8") from None

    fields: dict[str, str] = {}
    for line in header.splitlines():
        key, eq, value = line.partition("=")
        if not eq:
            raise ContainerFormatError(f"malformed header line: {line!r}")
        fields[key] = value
    for key in HEADER_KEYS:
        if key not in fields:
            raise ContainerFormatError(f"missing field {key}")
    if fields["format_version"] != str(FORMAT_VERSION):
        raise ContainerFormatError(f"unsupported format_version {fields['format_version']!r}")
    try:
        fs = float(fields["fs_hz"])
    except ValueError:
        raise ContainerFormatError("field fs_hz is not a number") from None
    if not math.isfinite(fs) or fs <= 0:
        raise ContainerFormatError("field fs_hz must be positive")
    n_trials = _parse_int(fields, "n_trials")
    n_channels = _parse_int(fields, "n_channels")
    n_samples = _parse_int(fields, "n_samples")
    channel_names = fields["channel_names"].split(",") if fields["channel_names"] else []
    class_names = fields["class_names"].split(",") if fields["class_names"] else []
    if len(channel_names) != n_channels:
        raise ContainerFormatError("field channel_names does not match n_channels")
    subject_id = fields["subject_id"]

    body = blob[sep + 2:]
    if len(body) < n_trials:
        raise ContainerFormatError("truncated label block")
    labels = np.frombuffer(body[:n_trials], dtype=np.uint8)
    expected = n_trials * n_channels * n_samples * 4
    payload = body[n_trials:]
    if len(payload) != expected:
        raise ContainerFormatError(
            f"payload holds {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_trials, n_channels, n_samples)
    if labels.size and int(labels.max()) >= len(class_names):
        raise ContainerFormatError("label block references a class beyond class_names")

    trials = [Epoch(data[i].copy(), int(labels[i]), subject_id, fs) for i in range(n_trials)]
    return TrialSet(trials, channel_names, fs, class_names)


# ---------------------------------------------------------------------------
# split protocol


@dataclass(frozen=True)
class SplitSpec:
    """How the target subject's second session feeds train/val/test."""

    target_subject: str
    calib_trials: int
    val_range: tuple[int, int]
    test_range: tuple[int, int]

    def __post_init__(self):
        v0, v1 = self.val_range
        t0, t1 = self.test_range
        if self.calib_trials < 0 or v0 > v1 or t0 > t1:
            raise ValueError("ranges must be nonnegative and ordered")
        if not (self.calib_trials <= v0 and v1 <= t0):
            raise ValueError("calibration, validation and test ranges must not overlap")


@dataclass
class Split:
    """Per-subject training sets plus target-only validation and test sets."""

    train: dict[str, TrialSet]
    val: TrialSet
    test: TrialSet
    target_subject: str


def make_splits(datasets: list[SubjectDataset], spec: SplitSpec) -> Split:
    """Session 1 of every subject trains; the target's session 2 is divided
    into calibration (into training), validation, and test ranges."""
    by_id = {}
    for ds in datasets:
        if ds.subject_id in by_id:
            raise ValueError(f"duplicate subject id {ds.subject_id!r}")
        by_id[ds.subject_id] = ds
    if spec.target_subject not in by_id:
        raise ValueError(f"target subject {spec.target_subject!r} not in datasets")

    needs_session2 = spec.calib_trials > 0 or spec.val_range[1] > spec.val_range[0] \
        or spec.test_range[1] > spec.test_range[0]

    train: dict[str, TrialSet] = {}
    target = by_id[spec.target_subject]
    for ds in datasets:
        if not ds.sessions:
            raise ValueError(f"subject {ds.subject_id!r} has no sessions")
        if ds.subject_id != spec.target_subject:
            train[ds.subject_id] = ds.sessions[0]

    session1 = target.sessions[0]
    if needs_session2:
        if len(target.sessions) < 2:
            raise ValueError("split spec references the target's second session")
        session2 = target.sessions[1]
        limit = len(session2)
        for name, hi in (("calib_trials", spec.calib_trials),
                         ("val_range", spec.val_range[1]),
                         ("test_range", spec.test_range[1])):
            if hi > limit:
                raise ValueError(f"{name} exceeds the second session size ({limit})")
        train[spec.target_subject] = session1.with_trials(
            session1.trials + session2.trials[:spec.calib_trials])
        val = session2.subset(range(*spec.val_range))
        test = session2.subset(range(*spec.test_range))
    else:
        train[spec.target_subject] = session1
        val = session1.with_trials([])
        test = session1.with_trials([])
    return Split(train, val, test, spec.target_subject)


# ---------------------------------------------------------------------------
# synthetic multi-subject data

_MIX_JITTER = 0.15


def class_center_frequencies(n_classes: int) -> np.ndarray:
    """Distinct oscillation frequencies in the 8-30 Hz band, packed 0.8 Hz
    apart (comparable to the per-trial frequency jitter) so that class
    identity hinges on spatial structure rather than frequency content."""
    if n_classes <= 25:
        return 10.0 + 0.8 * np.arange(n_classes)
    return 8.0 + 22.0 * (np.arange(n_classes) + 1) / (n_classes + 1)


def class_spatial_patterns(n_channels: int, n_classes: int) -> np.ndarray:
    """Bipolar pattern per class over a class-specific channel pair,
    normalized so the mean clean channel power is amplitude-independent."""
    patterns = np.zeros((n_classes, n_channels))
    amp = math.sqrt(n_channels / 2.0)
    for c in range(n_classes):
        a = (2 * c) % n_channels
        b = (2 * c + 1) % n_channels
        if a == b:
            b = (b + 1) % n_channels
        patterns[c, a] += amp
        patterns[c, b] -= amp
    return patterns


def subject_mixing_matrix(seed: int, subject_index: int, n_channels: int,
                          shift_strength: float) -> np.ndarray:
    """Subject-specific channel permutation plus dense mixing jitter.

    The permutation moves whole channel pairs (the supports of the class
    patterns) in a cycle over round(shift_strength * n_pairs) randomly chosen
    pairs, so different subjects assign the same observable pattern to
    different classes; the jitter amplitude also scales with shift_strength.
    Exactly the identity at shift_strength 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, subject_index)))
    n_pairs = n_channels // 2
    moved = round(shift_strength * n_pairs)
    chosen = rng.choice(n_pairs, size=moved, replace=False) if moved else np.array([], int)
    perm = np.arange(n_channels)
    for src, dst in zip(chosen, np.roll(chosen, 1)):
        flip = rng.random() < 0.5
        perm[2 * src] = 2 * dst + (1 if flip else 0)
        perm[2 * src + 1] = 2 * dst + (0 if flip else 1)
    matrix = np.zeros((n_channels, n_channels))
    matrix[perm, np.arange(n_channels)] = 1.0
    jitter = rng.normal(0.0, _MIX_JITTER / math.sqrt(n_channels), (n_channels, n_channels))
    if shift_strength == 0.0:
        return np.eye(n_channels)
    return matrix + shift_strength * jitter


def synth_multisubject(n_subjects: int, n_sessions: int, n_trials: int,
                       n_channels: int, fs: float, duration_s: float,
                       n_classes: int, shift_strength: float, snr: float,
                       seed: int) -> list[SubjectDataset]:
    """Generate class-structured oscillatory trials for several subjects.

    Each class is a band-limited oscillation (distinct center frequency,
    random phase/frequency/amplitude jitter per trial) projected through a
    class-specific bipolar spatial pattern, plus white noise with
    signal-to-noise power ratio `snr`. Every subject observes the sources
    through its own mixing matrix whose distance from the identity scales
    with `shift_strength`. Deterministic given `seed`.
    """
    for name, value in (("n_subjects", n_subjects), ("n_sessions", n_sessions),
                        ("n_trials", n_trials), ("n_channels", n_channels),
                        ("n_classes", n_classes)):
        if value < 1:
            raise ValueError(f"{name} must be positive")
    if fs <= 0 or duration_s <= 0 or snr <= 0:
        raise ValueError("fs, duration_s and snr must be positive")
    if not 0.0 <= shift_strength <= 1.0:
        raise ValueError("shift_strength must lie in [0, 1]")

    n_samples = int(round(duration_s * fs))
    t = np.arange(n_samples) / fs
    freqs = class_center_frequencies(n_classes)
    patterns = class_spatial_patterns(n_channels, n_classes)
    noise_sigma = math.sqrt(0.5 / snr)
    channel_names = [f"ch{i:02d}" for i in range(n_channels)]
    class_names = [f"class{c}" for c in range(n_classes)]

    datasets = []
    for s in range(n_subjects):
        subject_id = f"S{s + 1:02d}"
        mixing = subject_mixing_matrix(seed, s, n_channels, shift_strength)
        sessions = []
        for k in range(n_sessions):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, s, k)))
            labels = np.tile(np.arange(n_classes), n_trials // n_classes + 1)[:n_trials]
            rng.shuffle(labels)
            trials = []
            for label in labels:
                f = freqs[label] + rng.uniform(-0.5, 0.5)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                amp = rng.uniform(0.8, 1.2)
                wave = amp * np.sin(2.0 * math.pi * f * t + phase)
                clean = mixing @ np.outer(patterns[label], wave)
                noisy = clean + rng.normal(0.0, noise_sigma, (n_channels, n_samples))
                trials.append(Epoch(noisy.astype(np.float32), int(label), subject_id, fs))
            sessions.append(TrialSet(trials, channel_names, fs, class_names))
        datasets.append(SubjectDataset(subject_id, sessions))
    return datasets


# ---------------------------------------------------------------------------
# balanced upsampling and batching


def balanced_upsample(trial_set: TrialSet, target_size: int, seed: int) -> TrialSet:
    """Append random duplicates so per-class counts land within 1 of
    target_size / n_classes; originals are always kept."""
    if target_size < len(trial_set):
        raise ValueError("target_size must not shrink the set")
    labels = trial_set.labels()
    n_classes = len(trial_set.class_names)
    counts = np.bincount(labels, minlength=n_classes) if labels.size else np.zeros(n_classes, int)
    missing = [trial_set.class_names[c] for c in range(n_classes) if counts[c] == 0]
    if missing:
        raise ValueError(f"cannot balance: class(es) absent from input: {', '.join(missing)}")

    base, remainder = divmod(target_size, n_classes)
    per_class = np.full(n_classes, base, dtype=int)
    per_class[:remainder] += 1
    if np.any(counts > per_class):
        raise ValueError("cannot balance without dropping trials; raise target_size")

    rng = np.random.default_rng(seed)
    extra: list[Epoch] = []
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        need = int(per_class[c] - counts[c])
        if need:
            picks = rng.choice(pool, size=need, replace=True)
            extra.extend(trial_set.trials[int(i)] for i in picks)
    if not extra:
        return trial_set.with_trials(list(trial_set.trials))
    return trial_set.with_trials(list(trial_set.trials) + extra)


def batch_iter(train: dict[str, TrialSet], batch_per_branch: int, seed: int):
    """Yield one epoch of multi-branch batches as {subject: trial indices}.

    Every subject's pool is shuffled once, then consumed without replacement;
    the epoch ends when the smallest pool cannot fill another batch.
    Deterministic given the seed.
    """
    if batch_per_branch < 1:
        raise ValueError("batch_per_branch must be positive")
    subjects = sorted(train)
    if not subjects:
        raise ValueError("no subjects to batch over")
    sizes = {s: len(train[s]) for s in subjects}
    small = min(sizes.values())
    if small < batch_per_branch:
        raise ValueError(
            f"smallest pool ({small}) is below batch_per_branch ({batch_per_branch})")
    rng = np.random.default_rng(seed)
    perms = {s: rng.permutation(sizes[s]) for s in subjects}
    for b in range(small // batch_per_branch):
        lo, hi = b * batch_per_branch, (b + 1) * batch_per_branch
        yield {s: perms[s][lo:hi] for s in subjects}
