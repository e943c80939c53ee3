"""Trial storage and generation: the canonical binary trial file ("ETF"),
session discovery, stratified train/validation splitting, and a synthetic
generator with planted class-specific oscillations for desk-scale tests.

ETF layout (little-endian):

    magic "EEGT" | u32 version=1 | u32 n | u32 C | u32 T | f32 sample_rate
    | u32 subject_id | u32 session_id | u8 labels[n]
    | f32 samples[n*C*T] (trial-major, then channel-major)
    | u32 CRC32 of all preceding bytes

An optional JSON sidecar (same basename, ``.json``) records provenance such
as the planted-channel ground truth of synthetic sets.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ETF_MAGIC = b"EEGT"
ETF_VERSION = 1
_HEADER = struct.Struct("<4sIIIIfII")   # magic, version, n, C, T, rate, subject, session


class EtfError(Exception):
    """Base class for trial-file problems."""


class BadMagicError(EtfError):
    pass


class BadVersionError(EtfError):
    pass


class ChecksumError(EtfError):
    pass


class TruncatedFileError(EtfError):
    pass


class HeaderError(EtfError):
    """Header fields inconsistent with the payload or with each other."""


@dataclass
class TrialSet:
    """EEG trials [n, C, T] with per-trial class labels (0=left, 1=right)."""

    trials: np.ndarray
    labels: np.ndarray
    subject_id: int = 1
    session_id: int = 1
    sample_rate: float = 250.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        if self.trials.ndim != 3:
            raise HeaderError(f"trials must be [n, C, T], got shape {self.trials.shape}")
        if len(self.labels) != len(self.trials):
            raise HeaderError(f"{len(self.trials)} trials but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.trials)):
            raise HeaderError("trials contain non-finite samples")
        if self.subject_id < 1:
            raise HeaderError(f"subject_id must be positive, got {self.subject_id}")

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def n_channels(self) -> int:
        return self.trials.shape[1]

    @property
    def n_samples(self) -> int:
        return self.trials.shape[2]

    def subset(self, indices) -> "TrialSet":
        return TrialSet(self.trials[indices].copy(), self.labels[indices].copy(),
                        self.subject_id, self.session_id, self.sample_rate,
                        dict(self.meta))


def save_trials(ts: TrialSet, path) -> None:
    path = Path(path)
    header = _HEADER.pack(ETF_MAGIC, ETF_VERSION, ts.n_trials, ts.n_channels,
                          ts.n_samples, ts.sample_rate, ts.subject_id, ts.session_id)
    body = header + ts.labels.tobytes() + ts.trials.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    if ts.meta:
        path.with_suffix(".json").write_text(json.dumps(ts.meta, indent=2, sort_keys=True))


def load_trials(path) -> TrialSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise TruncatedFileError(f"{path.name}: file shorter than the header")
    magic, version, n, c, t, rate, subject, session = _HEADER.unpack_from(raw, 0)
    if magic != ETF_MAGIC:
        raise BadMagicError(f"{path.name}: bad magic {magic!r}")
    if version != ETF_VERSION:
        raise BadVersionError(f"{path.name}: unsupported version {version}")
    expected = _HEADER.size + n + n * c * t * 4 + 4
    if len(raw) != expected:
        raise TruncatedFileError(
            f"{path.name}: {len(raw)} bytes, header implies {expected}")
    crc_stored, = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"{path.name}: checksum mismatch")
    off = _HEADER.size
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).copy()
    off += n
    trials = np.frombuffer(raw, dtype="<f4", count=n * c * t, offset=off)
    trials = trials.reshape(n, c, t).astype(np.float32)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return TrialSet(trials, labels, subject, session, float(rate), meta)


# ----------------------------------------------------------------------
# splitting
# ----------------------------------------------------------------------
@dataclass
class SplitSpec:
    train_session: int = 1
    val_fraction: float = 0.2
    test_sessions: tuple = (2, 3, 4, 5)
    seed: int = 42

    def validate(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.train_session in self.test_sessions:
            raise ValueError("train session overlaps the test sessions")


def split_train_val(ts: TrialSet, spec: SplitSpec) -> tuple[TrialSet, TrialSet]:
    """Seeded stratified split: per-class proportions preserved within one
    trial; deterministic for a fixed seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train_idx, val_idx = [], []
    for cls in np.unique(ts.labels):
        idx = np.flatnonzero(ts.labels == cls)
        if len(idx) < 2:
            raise ValueError(f"class {cls} has {len(idx)} trial(s); need at least 2 to split")
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, int(round(spec.val_fraction * len(idx))))
        n_val = min(n_val, len(idx) - 1)   # keep at least one training trial
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    train_idx = np.sort(np.asarray(train_idx))
    val_idx = np.sort(np.asarray(val_idx))
    return ts.subset(train_idx), ts.subset(val_idx)


# ----------------------------------------------------------------------
# synthetic trials with planted class structure
# ----------------------------------------------------------------------
PLANT_TONE_HZ = 11.0


def plant_channels(n_channels: int) -> tuple[list[int], list[int]]:
    """Fixed disjoint channel subsets carrying the class-0 / class-1 tone."""
    n_plant = max(1, n_channels // 8)
    if 2 * n_plant > n_channels:
        raise ValueError(f"{n_channels} channels cannot hold two disjoint "
                         f"subsets of {n_plant}")
    left = list(range(0, n_plant))
    right = list(range(n_plant, 2 * n_plant))
    return left, right


def synth_generate(n_per_class: int, n_channels: int, n_samples: int,
                   seed: int, snr: float,
                   subject_id: int = 1, session_id: int = 1,
                   sample_rate: float = 250.0) -> TrialSet:
    """Gaussian-noise trials with an 11 Hz tone planted into class-specific
    channels. ``snr`` is the tone-RMS to noise-RMS ratio on plant channels;
    the ground-truth channel indices land in ``meta`` for interpretability
    tests."""
    if n_per_class < 1:
        raise ValueError("need at least one trial per class")
    if snr <= 0:
        raise ValueError(f"snr must be positive, got {snr}")
    left, right = plant_channels(n_channels)
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    trials = rng.normal(0.0, 1.0, size=(n, n_channels, n_samples)).astype(np.float32)
    labels = np.repeat([0, 1], n_per_class).astype(np.uint8)
    amp = snr * np.sqrt(2.0)
    t = np.arange(n_samples) / sample_rate
    for i in range(n):
        phase = rng.uniform(0, 2 * np.pi)
        tone = (amp * np.sin(2 * np.pi * PLANT_TONE_HZ * t + phase)).astype(np.float32)
        trials[i, left if labels[i] == 0 else right, :] += tone
    meta = {"left_channels": left, "right_channels": right,
            "tone_hz": PLANT_TONE_HZ, "snr": snr, "seed": seed,
            "generator": "synth_generate"}
    return TrialSet(trials, labels, subject_id, session_id, sample_rate, meta)


def synth_corpus(n_subjects: int, n_per_class: int, n_channels: int,
                 n_samples: int, seed: int, snr: float,
                 sessions: tuple = (1, 2, 3, 4, 5)) -> dict[int, dict[int, TrialSet]]:
    """A per-subject, per-session synthetic corpus for protocol runs."""
    corpus: dict[int, dict[int, TrialSet]] = {}
    for s in range(1, n_subjects + 1):
        corpus[s] = {}
        for k in sessions:
            corpus[s][k] = synth_generate(
                n_per_class, n_channels, n_samples,
                seed=seed + 1000 * s + k, snr=snr,
                subject_id=s, session_id=k)
    return corpus


def write_corpus(corpus: dict[int, dict[int, TrialSet]], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in sorted(corpus):
        for k in sorted(corpus[s]):
            path = out_dir / f"sub{s:02d}_sess{k}.etf"
            save_trials(corpus[s][k], path)
            written.append(path)
    return written


def discover_sessions(data_dir) -> dict[int, dict[int, Path]]:
    """Group every .etf file under ``data_dir`` by the subject and session
    ids stored in its header."""
    out: dict[int, dict[int, Path]] = {}
    for path in sorted(Path(data_dir).glob("*.etf")):
        ts = load_trials(path)
        out.setdefault(ts.subject_id, {})[ts.session_id] = path
    return out


def bandpower_at(trials: np.ndarray, freq_hz: float, sample_rate: float) -> np.ndarray:
    """Mean power in the FFT bin nearest ``freq_hz``, per channel."""
    n = trials.shape[-1]
    spec = np.abs(np.fft.rfft(trials, axis=-1)) ** 2 / n
    k = int(round(freq_hz * n / sample_rate))
    return spec[..., k].mean(axis=0)
