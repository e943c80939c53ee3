import struct
import zlib

import numpy as np
import pytest

from mftnet.data import (
    TrialSet, SplitSpec, EtfError, BadMagicError, BadVersionError,
    ChecksumError, TruncatedFileError,
    save_trials, load_trials, split_train_val, synth_generate, synth_corpus,
    write_corpus, discover_sessions, bandpower_at, plant_channels, PLANT_TONE_HZ,
)


def _random_set(rng, n=10, c=4, t=16, **kw):
    return TrialSet(rng.normal(size=(n, c, t)).astype(np.float32),
                    rng.integers(0, 2, size=n).astype(np.uint8), **kw)


# ----------------------------------------------------------------------
# ETF round trips and integrity
# ----------------------------------------------------------------------
def test_roundtrip_bit_exact(tmp_path):
    ts = _random_set(np.random.default_rng(0), subject_id=3, session_id=2,
                     sample_rate=250.0)
    path = tmp_path / "set.etf"
    save_trials(ts, path)
    back = load_trials(path)
    assert back.trials.tobytes() == ts.trials.tobytes()
    assert back.labels.tobytes() == ts.labels.tobytes()
    assert (back.subject_id, back.session_id, back.sample_rate) == (3, 2, 250.0)


def test_header_arithmetic(tmp_path):
    ts = TrialSet(np.zeros((100, 32, 1000), dtype=np.float32),
                  np.zeros(100, dtype=np.uint8))
    path = tmp_path / "big.etf"
    save_trials(ts, path)
    size = path.stat().st_size
    header = 4 + 4 + 4 + 4 + 4 + 4 + 4 + 4   # magic, version, n, C, T, rate, subject, session
    assert size == header + 100 + 100 * 32 * 1000 * 4 + 4


def test_truncated_file_rejected(tmp_path):
    ts = _random_set(np.random.default_rng(1))
    path = tmp_path / "cut.etf"
    save_trials(ts, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        load_trials(path)


def test_corrupted_checksum_rejected(tmp_path):
    ts = _random_set(np.random.default_rng(2))
    path = tmp_path / "bad.etf"
    save_trials(ts, path)
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_trials(path)


def test_bad_magic_and_version(tmp_path):
    ts = _random_set(np.random.default_rng(3))
    path = tmp_path / "m.etf"
    save_trials(ts, path)
    raw = bytearray(path.read_bytes())
    bad = b"XXXX" + bytes(raw[4:])
    path.write_bytes(bad)
    with pytest.raises(BadMagicError):
        load_trials(path)
    raw2 = bytearray(raw)
    struct.pack_into("<I", raw2, 4, 99)
    body = bytes(raw2[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(BadVersionError):
        load_trials(path)


def test_malformed_fuzz_never_yields_invalid_trialset(tmp_path):
    rng = np.random.default_rng(4)
    ts = _random_set(rng)
    path = tmp_path / "fuzz.etf"
    save_trials(ts, path)
    pristine = path.read_bytes()
    for trial in range(60):
        raw = bytearray(pristine)
        for _ in range(rng.integers(1, 4)):
            raw[rng.integers(0, len(raw))] ^= int(rng.integers(1, 256))
        path.write_bytes(bytes(raw))
        try:
            loaded = load_trials(path)
        except EtfError:
            continue
        # an accepted file must still satisfy every TrialSet invariant
        loaded.validate()
        assert len(loaded.labels) == len(loaded.trials)


def test_sidecar_meta_roundtrip(tmp_path):
    ts = synth_generate(4, 8, 32, seed=5, snr=3.0)
    path = tmp_path / "synth.etf"
    save_trials(ts, path)
    assert (tmp_path / "synth.json").exists()
    back = load_trials(path)
    assert back.meta["left_channels"] == ts.meta["left_channels"]
    assert back.meta["tone_hz"] == PLANT_TONE_HZ


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------
def test_split_sizes_and_partition():
    ts = _random_set(np.random.default_rng(6), n=100)
    ts.labels = np.repeat([0, 1], 50).astype(np.uint8)
    train, val = split_train_val(ts, SplitSpec(seed=42))
    assert train.n_trials == 80 and val.n_trials == 20
    # exact partition: stratified draw must cover every index exactly once
    key = ts.trials[:, 0, 0]
    merged = np.sort(np.concatenate([train.trials[:, 0, 0], val.trials[:, 0, 0]]))
    np.testing.assert_array_equal(merged, np.sort(key))


def test_split_deterministic():
    ts = _random_set(np.random.default_rng(7), n=40)
    a1, b1 = split_train_val(ts, SplitSpec(seed=42))
    a2, b2 = split_train_val(ts, SplitSpec(seed=42))
    assert a1.trials.tobytes() == a2.trials.tobytes()
    assert b1.trials.tobytes() == b2.trials.tobytes()


def test_split_stratified_within_one_trial():
    rng = np.random.default_rng(8)
    ts = _random_set(rng, n=30)
    ts.labels = np.array([0] * 15 + [1] * 15, dtype=np.uint8)
    train, val = split_train_val(ts, SplitSpec(seed=0))
    for part, frac in ((train, 0.8), (val, 0.2)):
        for cls in (0, 1):
            got = int((part.labels == cls).sum())
            assert abs(got - frac * 15) <= 1


def test_split_rejects_tiny_classes():
    ts = TrialSet(np.zeros((3, 2, 8), dtype=np.float32),
                  np.array([0, 0, 1], dtype=np.uint8))
    with pytest.raises(ValueError, match="at least 2"):
        split_train_val(ts, SplitSpec())


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(val_fraction=0.0).validate()
    with pytest.raises(ValueError):
        SplitSpec(train_session=2).validate()


# ----------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------
def test_synth_deterministic_and_balanced():
    a = synth_generate(8, 8, 64, seed=11, snr=2.0)
    b = synth_generate(8, 8, 64, seed=11, snr=2.0)
    assert a.trials.tobytes() == b.trials.tobytes()
    assert int((a.labels == 0).sum()) == 8
    assert int((a.labels == 1).sum()) == 8


def test_synth_plant_channels_carry_the_tone():
    # ground truth recoverable across seeds: plant-channel bandpower at the
    # tone exceeds the background by at least snr/2
    snr = 4.0
    for seed in range(5):
        ts = synth_generate(32, 16, 500, seed=12 + seed, snr=snr)
        left = ts.meta["left_channels"]
        right = ts.meta["right_channels"]
        others = [c for c in range(16) if c not in left + right]
        bp = bandpower_at(ts.trials[ts.labels == 0], PLANT_TONE_HZ, ts.sample_rate)
        assert bp[left].mean() > (snr / 2) * bp[others].mean()
        bp1 = bandpower_at(ts.trials[ts.labels == 1], PLANT_TONE_HZ, ts.sample_rate)
        assert bp1[right].mean() > (snr / 2) * bp1[others].mean()


def test_synth_bandpower_classifier_is_perfect_at_high_snr():
    ts = synth_generate(20, 8, 250, seed=13, snr=50.0)
    left, right = plant_channels(8)
    correct = 0
    for trial, label in zip(ts.trials, ts.labels):
        p = bandpower_at(trial[None], PLANT_TONE_HZ, ts.sample_rate)
        pred = 0 if p[left].mean() > p[right].mean() else 1
        correct += int(pred == label)
    assert correct == ts.n_trials


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError, match="snr"):
        synth_generate(4, 8, 32, seed=0, snr=0.0)
    with pytest.raises(ValueError, match="disjoint"):
        plant_channels(1)


# ----------------------------------------------------------------------
# corpus on disk
# ----------------------------------------------------------------------
def test_corpus_write_and_discover(tmp_path):
    corpus = synth_corpus(2, 3, 4, 32, seed=14, snr=2.0, sessions=(1, 2))
    write_corpus(corpus, tmp_path)
    found = discover_sessions(tmp_path)
    assert sorted(found) == [1, 2]
    assert sorted(found[1]) == [1, 2]
    ts = load_trials(found[2][1])
    assert (ts.subject_id, ts.session_id) == (2, 1)
