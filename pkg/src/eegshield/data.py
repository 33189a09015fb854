"""Dataset container, binary file formats, synthetic data, and splits.

Trials are ``(N, channels, samples)`` float arrays with per-trial task,
user and session labels.  Files are little-endian with a trailing CRC32;
payloads are float32, so anything loaded from disk round-trips
bit-exactly.  ``apply_perturbation`` returns float64 trials (the exact
sum of two float32 values), which the writer rounds back to float32.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CorruptionError,
    FormatError,
    LabelError,
    ParameterError,
    ProtocolError,
    ValidationError,
)

DATASET_MAGIC = b"EEGUNLRN"
DELTA_MAGIC = b"EEGDELTA"
FORMAT_VERSION = 1

SAMPLE_WISE = "sample_wise"
USER_WISE = "user_wise"


def _as_labels(values, n):
    arr = np.ascontiguousarray(values, dtype=np.int64)
    if arr.shape != (n,):
        raise ValidationError(f"label array has shape {arr.shape}, expected ({n},)")
    return arr


@dataclass
class Dataset:
    """N trials of (channels x samples) signal with task/user/session labels."""

    trials: np.ndarray
    task_labels: np.ndarray
    user_labels: np.ndarray
    session_labels: np.ndarray
    n_classes: int
    n_users: int
    n_sessions: int
    sampling_tag: str = ""  # in-memory metadata only; not serialized

    def __post_init__(self):
        self.trials = np.ascontiguousarray(self.trials)
        if self.trials.ndim != 3:
            raise ValidationError(f"trials must be (N, c, t), got {self.trials.shape}")
        n = self.trials.shape[0]
        self.task_labels = _as_labels(self.task_labels, n)
        self.user_labels = _as_labels(self.user_labels, n)
        self.session_labels = _as_labels(self.session_labels, n)
        for name, labels, bound in (
            ("task", self.task_labels, self.n_classes),
            ("user", self.user_labels, self.n_users),
            ("session", self.session_labels, self.n_sessions),
        ):
            if labels.size and (labels.min() < 0 or labels.max() >= bound):
                raise LabelError(f"{name} label outside [0, {bound})")
        if not np.isfinite(self.trials).all():
            raise ValidationError("trial values must be finite")

    @property
    def n_trials(self):
        return self.trials.shape[0]

    @property
    def channels(self):
        return self.trials.shape[1]

    @property
    def samples(self):
        return self.trials.shape[2]

    def subset(self, indices):
        indices = np.asarray(indices)
        return replace(
            self,
            trials=self.trials[indices],
            task_labels=self.task_labels[indices],
            user_labels=self.user_labels[indices],
            session_labels=self.session_labels[indices],
        )


@dataclass
class PerturbationSet:
    """Per-trial deltas (sample-wise) or per-user templates (user-wise).

    Sample-wise deltas respect ``max|delta| <= epsilon`` exactly; user-wise
    templates are unbounded and carry ``epsilon == 0.0`` as a sentinel.
    Provenance records the generating hyperparameters and seed.
    """

    mode: str
    deltas: np.ndarray
    epsilon: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (SAMPLE_WISE, USER_WISE):
            raise ParameterError(f"unknown perturbation mode {self.mode!r}")
        self.deltas = np.ascontiguousarray(self.deltas)
        if self.deltas.ndim != 3:
            raise ValidationError(f"deltas must be (count, c, t), got {self.deltas.shape}")
        self.epsilon = float(self.epsilon)
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if self.mode == SAMPLE_WISE and self.deltas.size:
            peak = float(np.max(np.abs(self.deltas)))
            if peak > self.epsilon:
                raise ValidationError(
                    f"sample-wise deltas exceed the bound: max|delta|={peak!r} > {self.epsilon!r}"
                )

    @property
    def count(self):
        return self.deltas.shape[0]


def float32_floor(value):
    """Largest float32 that does not exceed ``value``."""
    f = np.float32(value)
    if float(f) > float(value):
        f = np.nextafter(f, np.float32(-np.inf))
    return f


def quantize_deltas(deltas, epsilon):
    """Round deltas to float32 while keeping max|delta| <= epsilon exact."""
    out = np.asarray(deltas, dtype=np.float32)
    bound = float32_floor(epsilon)
    return np.clip(out, -bound, bound)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Controls the planted task/identity/session structure of synthetic data."""

    users: int = 8
    sessions: int = 3
    trials_per_user_per_session: int = 40
    channels: int = 8
    samples: int = 128
    classes: int = 2
    identity_amplitude: float = 1.0
    task_amplitude: float = 1.0
    session_amplitude: float = 0.2
    noise_std: float = 1.0
    seed: int = 7

    def __post_init__(self):
        for name in ("users", "sessions", "trials_per_user_per_session", "channels", "samples", "classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        for name in ("identity_amplitude", "task_amplitude", "session_amplitude", "noise_std"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")

    @property
    def n_trials(self):
        return self.users * self.sessions * self.trials_per_user_per_session


def reference_config(seed=7):
    """The desk-scale configuration used throughout the test suite."""
    return SynthConfig(seed=seed)


# Pattern scale conventions.  The config amplitudes are multipliers on
# top of these: the task oscillation is kept off BCA saturation, and the
# identity carrier is sized so the reference config lands in the 0.6-0.7
# identity-accuracy band under leave-one-session-out evaluation.
TASK_PATTERN_SCALE = 0.45
IDENTITY_PATTERN_SCALE = 1.6


def synth_generate(cfg):
    """Deterministically synthesize a dataset from the config seed.

    Each trial is the sum of a class-specific temporal pattern on a fixed
    channel subset, a per-user spatial pattern modulating a slow
    free-running sinusoid, a per-session channel offset, and i.i.d.
    Gaussian noise:

        x = task_amplitude * T[y] + identity_amplitude * B[u]
            + session_amplitude * C[s] + noise

    The identity carrier is free-running: each user has a fixed spatial
    pattern and carrier frequency, but the carrier phase is sampled per
    trial (like an ongoing rhythm observed through trial windows), so the
    identity signature is a second-order (power/topography) feature
    rather than a fixed template.
    """
    rng = np.random.default_rng(cfg.seed)
    c, t, n_cls = cfg.channels, cfg.samples, cfg.classes
    tt = np.arange(t) / t

    # class patterns: distinct oscillation frequencies on a fixed channel subset
    subset = np.sort(rng.choice(c, size=max(1, c // 2), replace=False))
    task_patterns = np.zeros((n_cls, c, t))
    for y in range(n_cls):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        freq = 5.0 + 6.0 * y
        task_patterns[y, subset, :] = TASK_PATTERN_SCALE * np.sin(
            2.0 * np.pi * freq * tt + phase
        )

    # user signatures: spatial pattern and carrier frequency per user;
    # frequencies are a seeded permutation of an evenly spaced slow band
    spatial = np.zeros((cfg.users, c))
    carrier_freq = np.zeros(cfg.users)
    freq_order = rng.permutation(cfg.users)
    for u in range(cfg.users):
        a = rng.standard_normal(c)
        a /= np.linalg.norm(a)
        spatial[u] = IDENTITY_PATTERN_SCALE * a
        carrier_freq[u] = 1.5 + 3.0 * freq_order[u] / max(1, cfg.users - 1)

    # session offsets: constant-in-time channel shifts
    session_patterns = np.repeat(
        rng.standard_normal((cfg.sessions, c))[:, :, None], t, axis=2
    )

    per = cfg.trials_per_user_per_session
    n = cfg.n_trials
    users = np.repeat(np.arange(cfg.users), cfg.sessions * per)
    sessions = np.tile(np.repeat(np.arange(cfg.sessions), per), cfg.users)
    tasks = np.tile(np.arange(per) % n_cls, cfg.users * cfg.sessions)

    trial_phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    carrier = np.sin(
        2.0 * np.pi * carrier_freq[users][:, None] * tt[None, :] + trial_phase[:, None]
    )
    identity = spatial[users][:, :, None] * carrier[:, None, :]

    noise = rng.standard_normal((n, c, t)) * cfg.noise_std
    trials = (
        cfg.task_amplitude * task_patterns[tasks]
        + cfg.identity_amplitude * identity
        + cfg.session_amplitude * session_patterns[sessions]
        + noise
    ).astype(np.float32)

    return Dataset(
        trials=trials,
        task_labels=tasks,
        user_labels=users,
        session_labels=sessions,
        n_classes=n_cls,
        n_users=cfg.users,
        n_sessions=cfg.sessions,
        sampling_tag=f"synth-seed{cfg.seed}",
    )


# ---------------------------------------------------------------------------
# binary container formats
# ---------------------------------------------------------------------------

def _read_exact(buf, n, what):
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CorruptionError(f"truncated file while reading {what}")
    return chunk


def _check_crc(payload, crc_bytes):
    (stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CorruptionError("CRC32 mismatch")


def write_dataset(dataset, path):
    """Serialize to the EEGU v1 container (float32 payload, trailing CRC32)."""
    body = io.BytesIO()
    body.write(DATASET_MAGIC)
    body.write(struct.pack("<I", FORMAT_VERSION))
    body.write(
        struct.pack(
            "<6I",
            dataset.n_trials,
            dataset.channels,
            dataset.samples,
            dataset.n_classes,
            dataset.n_users,
            dataset.n_sessions,
        )
    )
    body.write(dataset.task_labels.astype("<u4").tobytes())
    body.write(dataset.user_labels.astype("<u4").tobytes())
    body.write(dataset.session_labels.astype("<u4").tobytes())
    body.write(np.ascontiguousarray(dataset.trials, dtype="<f4").tobytes())
    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(DATASET_MAGIC):
        raise FormatError("file too short for a dataset container")
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError("bad magic; not an EEGU dataset file")
    if len(raw) < len(DATASET_MAGIC) + 4 + 24 + 4:
        raise CorruptionError("truncated dataset header")
    _check_crc(raw[:-4], raw[-4:])
    buf = io.BytesIO(raw[:-4])
    buf.seek(len(DATASET_MAGIC))
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    n, c, t, k, u, s = struct.unpack("<6I", _read_exact(buf, 24, "dimensions"))
    y = np.frombuffer(_read_exact(buf, 4 * n, "task labels"), dtype="<u4").astype(np.int64)
    uu = np.frombuffer(_read_exact(buf, 4 * n, "user labels"), dtype="<u4").astype(np.int64)
    ss = np.frombuffer(_read_exact(buf, 4 * n, "session labels"), dtype="<u4").astype(np.int64)
    data = np.frombuffer(_read_exact(buf, 4 * n * c * t, "trial data"), dtype="<f4")
    if buf.read(1):
        raise CorruptionError("trailing bytes after dataset payload")
    trials = data.reshape(n, c, t).astype(np.float32)
    return Dataset(
        trials=trials,
        task_labels=y,
        user_labels=uu,
        session_labels=ss,
        n_classes=int(k),
        n_users=int(u),
        n_sessions=int(s),
    )


def write_perturbations(pset, path):
    """Serialize to the EEGDELTA v1 container."""
    body = io.BytesIO()
    body.write(DELTA_MAGIC)
    body.write(struct.pack("<I", FORMAT_VERSION))
    body.write(struct.pack("<I", 0 if pset.mode == SAMPLE_WISE else 1))
    count, c, t = pset.deltas.shape
    body.write(struct.pack("<3I", count, c, t))
    eps = pset.epsilon if pset.mode == SAMPLE_WISE else 0.0
    body.write(struct.pack("<f", eps))
    if pset.mode == SAMPLE_WISE:
        deltas = quantize_deltas(pset.deltas, eps)
    else:
        deltas = np.ascontiguousarray(pset.deltas, dtype="<f4")
    body.write(deltas.astype("<f4").tobytes())
    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_perturbations(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(DELTA_MAGIC) or raw[: len(DELTA_MAGIC)] != DELTA_MAGIC:
        raise FormatError("bad magic; not an EEGDELTA file")
    if len(raw) < len(DELTA_MAGIC) + 4 * 6 + 4:
        raise CorruptionError("truncated perturbation header")
    _check_crc(raw[:-4], raw[-4:])
    buf = io.BytesIO(raw[:-4])
    buf.seek(len(DELTA_MAGIC))
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported perturbation version {version}")
    (mode_code,) = struct.unpack("<I", _read_exact(buf, 4, "mode"))
    if mode_code not in (0, 1):
        raise FormatError(f"unknown perturbation mode code {mode_code}")
    count, c, t = struct.unpack("<3I", _read_exact(buf, 12, "dimensions"))
    (eps,) = struct.unpack("<f", _read_exact(buf, 4, "epsilon"))
    deltas = np.frombuffer(_read_exact(buf, 4 * count * c * t, "deltas"), dtype="<f4")
    if buf.read(1):
        raise CorruptionError("trailing bytes after perturbation payload")
    return PerturbationSet(
        mode=SAMPLE_WISE if mode_code == 0 else USER_WISE,
        deltas=deltas.reshape(count, c, t).astype(np.float32),
        epsilon=float(eps),
    )


# ---------------------------------------------------------------------------
# splitting and perturbation application
# ---------------------------------------------------------------------------

def loso_indices(dataset, held_session):
    """Index arrays for the held-in training session and everything else."""
    if not 0 <= held_session < dataset.n_sessions:
        raise ParameterError(
            f"session {held_session} out of range [0, {dataset.n_sessions})"
        )
    mask = dataset.session_labels == held_session
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def split_loso(dataset, held_session):
    """One session trains, the remaining sessions test.

    User labels are compacted to a dense 0..U'-1 range consistently across
    both splits (sorted order of the users present in either split).
    """
    if dataset.n_sessions < 2:
        raise ProtocolError(
            "leave-one-session-out needs >= 2 sessions; use split_by_index to "
            "divide a single-session dataset first"
        )
    train_idx, test_idx = loso_indices(dataset, held_session)
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)
    present = np.union1d(train.user_labels, test.user_labels)
    remap = {int(u): i for i, u in enumerate(present)}
    for part in (train, test):
        part.user_labels = np.array([remap[int(u)] for u in part.user_labels], dtype=np.int64)
        part.n_users = len(present)
    return train, test


def split_by_index(dataset, n_sessions):
    """Assign synthetic session labels by equal-length splits per user.

    For single-session recordings: each user's trials are divided, in
    their stored order, into ``n_sessions`` contiguous near-equal groups.
    """
    if n_sessions < 2:
        raise ParameterError("n_sessions must be >= 2")
    new_sessions = np.zeros(dataset.n_trials, dtype=np.int64)
    for u in range(dataset.n_users):
        idx = np.flatnonzero(dataset.user_labels == u)
        if idx.size == 0:
            continue
        bounds = np.linspace(0, idx.size, n_sessions + 1).astype(int)
        for s in range(n_sessions):
            new_sessions[idx[bounds[s] : bounds[s + 1]]] = s
    return replace(dataset, session_labels=new_sessions, n_sessions=n_sessions)


def apply_perturbation(dataset, pset):
    """Add deltas to trials; labels unchanged, input never mutated.

    Sample-wise sets need one delta per trial; user-wise sets one template
    per user.  The sum is computed in float64, which represents the sum of
    two float32 values exactly.
    """
    if pset.mode == SAMPLE_WISE:
        if pset.count != dataset.n_trials:
            raise ParameterError(
                f"sample-wise set has {pset.count} deltas for {dataset.n_trials} trials"
            )
        offsets = pset.deltas
    else:
        if pset.count != dataset.n_users:
            raise ParameterError(
                f"user-wise set has {pset.count} templates for {dataset.n_users} users"
            )
        offsets = pset.deltas[dataset.user_labels]
    if offsets.shape[1:] != dataset.trials.shape[1:]:
        raise ParameterError(
            f"delta shape {pset.deltas.shape[1:]} does not match trials "
            f"{dataset.trials.shape[1:]}"
        )
    perturbed = dataset.trials.astype(np.float64) + offsets.astype(np.float64)
    return replace(dataset, trials=perturbed)


def concat_datasets(first, second):
    """Stack two datasets over the trial axis.

    Channel/sample geometry and class count must match; the user and
    session spaces become the larger of the two declared ranges.
    """
    if first.trials.shape[1:] != second.trials.shape[1:]:
        raise ParameterError(
            f"trial shapes differ: {first.trials.shape[1:]} vs {second.trials.shape[1:]}"
        )
    if first.n_classes != second.n_classes:
        raise ParameterError("class counts differ")
    return Dataset(
        trials=np.concatenate([first.trials, second.trials], axis=0),
        task_labels=np.concatenate([first.task_labels, second.task_labels]),
        user_labels=np.concatenate([first.user_labels, second.user_labels]),
        session_labels=np.concatenate([first.session_labels, second.session_labels]),
        n_classes=first.n_classes,
        n_users=max(first.n_users, second.n_users),
        n_sessions=max(first.n_sessions, second.n_sessions),
    )


# ---------------------------------------------------------------------------
# summaries (used by the CLI inspect command)
# ---------------------------------------------------------------------------

def dataset_summary(dataset):
    return {
        "kind": "dataset",
        "n_trials": dataset.n_trials,
        "channels": dataset.channels,
        "samples": dataset.samples,
        "n_classes": dataset.n_classes,
        "n_users": dataset.n_users,
        "n_sessions": dataset.n_sessions,
        "task_histogram": np.bincount(dataset.task_labels, minlength=dataset.n_classes).tolist(),
        "user_histogram": np.bincount(dataset.user_labels, minlength=dataset.n_users).tolist(),
        "session_histogram": np.bincount(
            dataset.session_labels, minlength=dataset.n_sessions
        ).tolist(),
    }


def perturbation_summary(pset):
    flat = pset.deltas.reshape(pset.count, -1) if pset.count else pset.deltas
    info = {
        "kind": "perturbations",
        "mode": pset.mode,
        "count": pset.count,
        "channels": pset.deltas.shape[1] if pset.deltas.ndim == 3 else None,
        "samples": pset.deltas.shape[2] if pset.deltas.ndim == 3 else None,
        "epsilon": pset.epsilon,
        "max_abs": float(np.max(np.abs(pset.deltas))) if pset.deltas.size else 0.0,
    }
    if pset.mode == USER_WISE and pset.count:
        info["template_l2_norms"] = [float(v) for v in np.linalg.norm(flat, axis=1)]
    return info


def provenance_json(pset):
    return json.dumps(pset.provenance, indent=2, sort_keys=True)
