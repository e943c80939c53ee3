import logging
import math

import numpy as np
import pytest

from mftnet import tensor as tz
from mftnet.data import SplitSpec, TrialSet, synth_corpus, synth_generate, split_train_val
from mftnet.model import build_model, reduced_config
from mftnet.tensor import Tensor, precision
from mftnet.training import (
    AdamW, PlateauScheduler, TrainConfig, accuracy, cross_entropy, evaluate,
    run_protocol, train, write_results_csv, write_summary_json,
)


# ----------------------------------------------------------------------
# cross-entropy
# ----------------------------------------------------------------------
def test_cross_entropy_uniform():
    probs = Tensor(np.full((4, 2), 0.5, dtype=np.float32))
    loss = cross_entropy(probs, [0, 1, 0, 1])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_perfect_prediction():
    probs = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
    assert cross_entropy(probs, [0, 1]).item() == pytest.approx(0.0, abs=1e-7)


def test_cross_entropy_direct_logarithm():
    probs = Tensor(np.array([[0.8, 0.2]], dtype=np.float32))
    assert cross_entropy(probs, [0]).item() == pytest.approx(-math.log(0.8), abs=1e-6)


def test_cross_entropy_rejects_bad_label():
    probs = Tensor(np.full((2, 2), 0.5, dtype=np.float32))
    with pytest.raises(ValueError, match="labels"):
        cross_entropy(probs, [0, 2])


# ----------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------
def test_adamw_zero_grad_zero_decay_fixed_point():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.001, weight_decay=0.0)
    before = p.data.copy()
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adamw_decoupled_decay_formula():
    with precision(64):
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = AdamW([("p", p)], lr=0.001, weight_decay=1e-4)
        opt.step()
    assert float(p.data) == pytest.approx(1.0 - 1e-7, abs=1e-15)


def test_adamw_matches_hand_rolled_recurrence():
    with precision(64):
        theta = Tensor(np.array(1.0), requires_grad=True)
        opt = AdamW([("theta", theta)], lr=0.01, weight_decay=1e-4)
        got = []
        for _ in range(10):
            loss = theta * theta
            opt.zero_grad()
            loss.backward()
            opt.step()
            got.append(float(theta.data))

        # independent scalar recurrence
        x, m, v = 1.0, 0.0, 0.0
        b1, b2, eps, lr, wd = 0.9, 0.999, 1e-8, 0.01, 1e-4
        want = []
        for t in range(1, 11):
            g = 2.0 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            x = x - lr * (mh / (math.sqrt(vh) + eps) + wd * x)
            want.append(x)
    np.testing.assert_allclose(got, want, atol=1e-10)


# ----------------------------------------------------------------------
# plateau scheduler
# ----------------------------------------------------------------------
def test_scheduler_keeps_lr_while_improving():
    sched = PlateauScheduler(0.001)
    for epoch in range(100):
        lr = sched.step(1.0 - 0.001 * epoch)
    assert lr == 0.001


def test_scheduler_constant_loss_trace():
    sched = PlateauScheduler(0.001, factor=0.5, patience=5, min_lr=1e-4)
    lrs = [sched.step(1.0) for _ in range(40)]
    assert lrs[4] == 0.001          # epoch 5: still waiting
    assert lrs[5] == 0.0005         # epoch 6: first reduction
    assert lrs[10] == 0.00025       # epoch 11: second reduction
    assert min(lrs) == pytest.approx(1e-4)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))   # never raises


def test_scheduler_respects_floor():
    sched = PlateauScheduler(1e-4, min_lr=1e-4)
    for _ in range(20):
        lr = sched.step(1.0)
    assert lr == pytest.approx(1e-4)


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------
def _quick_sets(seed=0, snr=6.0, n_per_class=16, c=8, t=64):
    full = synth_generate(n_per_class, c, t, seed=seed, snr=snr)
    return split_train_val(full, SplitSpec(seed=42))


def test_train_overfits_separable_synthetic():
    full = synth_generate(32, 8, 64, seed=0, snr=50.0)   # 64 trials
    model = build_model(reduced_config(n_channels=8, n_samples=64), seed=42)
    cfg = TrainConfig(epochs=25, batch_size=16, seed=42)
    hist = train(model, full, None, cfg)
    assert max(r["train_acc"] for r in hist.records) >= 0.95


def test_train_deterministic_across_runs():
    tr, va = _quick_sets(seed=1)
    cfg = TrainConfig(epochs=4, seed=42)
    runs = []
    for _ in range(2):
        model = build_model(reduced_config(n_channels=8, n_samples=64), seed=42)
        hist = train(model, tr, va, cfg)
        runs.append((hist, {n: t.data.tobytes() for n, t in model.parameters()}))
    h1, w1 = runs[0]
    h2, w2 = runs[1]
    assert h1.records == h2.records
    assert w1 == w2


def test_best_checkpoint_restored_exactly():
    tr, va = _quick_sets(seed=2, snr=3.0)
    model = build_model(reduced_config(n_channels=8, n_samples=64), seed=7)
    cfg = TrainConfig(epochs=6, seed=42)
    hist = train(model, tr, va, cfg)
    assert hist.best_val_acc == max(r["val_acc"] for r in hist.records)
    # ties resolve to the earliest epoch
    first_best = next(r["epoch"] for r in hist.records if r["val_acc"] == hist.best_val_acc)
    assert hist.best_epoch == first_best
    _, val_acc = evaluate(model, va, cfg.batch_size)
    assert val_acc == hist.best_val_acc


def test_single_step_decreases_batch_loss_at_small_lr():
    tr, _ = _quick_sets(seed=3)
    model = build_model(reduced_config(n_channels=8, n_samples=64), seed=9)
    xb, yb = tr.trials[:16], tr.labels[:16]
    opt = AdamW(model.parameters(), lr=1e-5, weight_decay=0.0)
    with tz.no_grad():
        before = cross_entropy(model.forward(xb, training=False), yb).item()
    probs = model.forward(xb, training=False)
    loss = cross_entropy(probs, yb)
    opt.zero_grad()
    loss.backward()
    opt.step()
    with tz.no_grad():
        after = cross_entropy(model.forward(xb, training=False), yb).item()
    assert after < before


def test_max_norm_held_after_every_step():
    tr, va = _quick_sets(seed=4)
    model = build_model(reduced_config(n_channels=8, n_samples=64), seed=11)
    cfg = TrainConfig(epochs=3, seed=1)
    train(model, tr, va, cfg)
    assert model.head.unit_norms().max() <= 0.25 + 1e-6


def test_train_rejects_empty_sets():
    tr, va = _quick_sets(seed=5)
    empty = TrialSet(np.zeros((0, 8, 64), dtype=np.float32), np.zeros(0, dtype=np.uint8))
    model = build_model(reduced_config(n_channels=8, n_samples=64), seed=1)
    with pytest.raises(ValueError, match="empty"):
        train(model, empty, va, TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="empty"):
        train(model, tr, empty, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=1e-5, min_lr=1e-4).validate()
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=0).validate()


# ----------------------------------------------------------------------
# protocol
# ----------------------------------------------------------------------
def test_protocol_iid_sessions_score_alike(tmp_path):
    corpus = synth_corpus(1, 48, 16, 64, seed=21, snr=50.0)
    cfg = TrainConfig(epochs=30, seed=42)
    results = run_protocol(corpus, reduced_config(n_channels=16, n_samples=64), cfg)
    accs = [r["accuracy"] for r in results["rows"]]
    assert len(accs) == 4
    assert max(accs) - min(accs) <= 0.05
    assert results["grand_mean"] == pytest.approx(np.mean(accs))

    write_results_csv(results, tmp_path / "results.csv")
    write_summary_json(results, tmp_path / "summary.json")
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == "subject,session,accuracy,n_trials"
    assert len(lines) == 5


def test_protocol_skips_missing_sessions(caplog):
    corpus = synth_corpus(2, 4, 8, 64, seed=22, snr=8.0)
    del corpus[1][4]          # one missing test session
    del corpus[2][1]          # subject 2 has no training session
    cfg = TrainConfig(epochs=1, seed=42)
    with caplog.at_level(logging.WARNING, logger="mftnet"):
        results = run_protocol(corpus, reduced_config(n_channels=8, n_samples=64), cfg)
    assert sorted({r["subject"] for r in results["rows"]}) == [1]
    assert sorted(r["session"] for r in results["rows"]) == [2, 3, 5]
    assert "missing" in caplog.text


def test_evaluate_rejects_empty_session():
    model = build_model(reduced_config(n_channels=8, n_samples=64), seed=1)
    empty = TrialSet(np.zeros((0, 8, 64), dtype=np.float32), np.zeros(0, dtype=np.uint8))
    with pytest.raises(ValueError, match="zero trials"):
        evaluate(model, empty)


def test_accuracy_tie_resolves_to_class_zero():
    probs = np.array([[0.5, 0.5]])
    assert accuracy(probs, [0]) == 1.0
    assert accuracy(probs, [1]) == 0.0
