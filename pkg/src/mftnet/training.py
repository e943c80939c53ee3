"""Training stack: categorical cross-entropy, AdamW with decoupled weight
decay, reduce-on-plateau learning-rate scheduling, a best-checkpoint
training loop, and the cross-session evaluation protocol (train on each
subject's first session with a 20% validation hold-out, test on sessions
2-5, one model per subject).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .data import SplitSpec, TrialSet, load_trials, split_train_val
from .model import Model, ModelConfig, build_model
from .tensor import Tensor, sweep_grad_check

logger = logging.getLogger("mftnet")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.001
    weight_decay: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-4
    seed: int = 42
    val_fraction: float = 0.2

    def validate(self) -> None:
        if not self.lr >= self.min_lr > 0:
            raise ValueError(f"need lr >= min_lr > 0, got lr={self.lr}, min_lr={self.min_lr}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ValueError("plateau patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")
    best_state: dict | None = None


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p(true class), clamped at 1e-12."""
    labels = np.asarray(labels)
    n_classes = probs.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    picked = probs[np.arange(len(labels)), labels.astype(np.intp)]
    return -tz.log(tz.maximum(picked, 1e-12)).mean()


def accuracy(probs: np.ndarray, labels) -> float:
    """Fraction of argmax-correct trials; exact ties resolve to class 0."""
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


class AdamW:
    """Bias-corrected Adam with decoupled weight decay:
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""

    def __init__(self, params, lr: float = 0.001, weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if tz.debug_enabled() and not np.all(np.isfinite(g)):
                raise tz.NonFiniteError(f"non-finite gradient for {name}")
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` consecutive epochs without
    a strict validation-loss improvement, floored at ``min_lr``."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5,
                 min_lr: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best: float | None = None
        self.counter = 0

    def step(self, val_loss: float) -> float:
        if self.best is None or val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.counter = 0
        return self.lr


def evaluate(model: Model, ts: TrialSet, batch_size: int = 64) -> tuple[float, float]:
    """Inference-mode loss and accuracy over a trial set."""
    if ts.n_trials == 0:
        raise ValueError("cannot evaluate a session with zero trials")
    total_loss = 0.0
    correct = 0
    with tz.no_grad():
        for lo in range(0, ts.n_trials, batch_size):
            xb = ts.trials[lo:lo + batch_size]
            yb = ts.labels[lo:lo + batch_size]
            probs = model.forward(xb, training=False)
            total_loss += cross_entropy(probs, yb).item() * len(yb)
            correct += int((probs.data.argmax(axis=1) == yb).sum())
    return total_loss / ts.n_trials, correct / ts.n_trials


def train(model: Model, train_set: TrialSet, val_set: TrialSet | None,
          cfg: TrainConfig, restore_best: bool = True) -> TrainHistory:
    """Seeded epoch loop. With a validation set, the weights achieving the
    highest validation accuracy (earliest epoch on ties) are restored at the
    end; without one, the final weights stand and no scheduling happens.
    """
    cfg.validate()
    if train_set.n_trials == 0:
        raise ValueError("training set is empty")
    if val_set is not None and val_set.n_trials == 0:
        raise ValueError("validation set is empty")

    rng = np.random.default_rng(cfg.seed)
    model.reseed(rng)   # dropout draws share the run's stream
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    history = TrainHistory()

    x_all, y_all = train_set.trials, train_set.labels
    n = train_set.n_trials
    best_acc = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            probs = model.forward(x_all[batch], training=True)
            loss = cross_entropy(probs, y_all[batch])
            opt.zero_grad()
            loss.backward()
            opt.lr = sched.lr
            opt.step()
            model.apply_constraints()
            epoch_loss += loss.item() * len(batch)
            epoch_correct += int((probs.data.argmax(axis=1) == y_all[batch]).sum())

        record = {"epoch": epoch,
                  "train_loss": epoch_loss / n,
                  "train_acc": epoch_correct / n,
                  "val_loss": float("nan"),
                  "val_acc": float("nan"),
                  "lr": sched.lr}
        if val_set is not None:
            val_loss, val_acc = evaluate(model, val_set, cfg.batch_size)
            record["val_loss"], record["val_acc"] = val_loss, val_acc
            sched.step(val_loss)
            if val_acc > best_acc:
                best_acc = val_acc
                history.best_epoch = epoch
                history.best_val_acc = val_acc
                history.best_state = model.state_dict()
        history.records.append(record)

    if restore_best and val_set is not None and history.best_state is not None:
        model.load_state_dict(history.best_state)
    return history


def full_model_grad_check(model: Model, x, labels, epsilon: float = 1e-5,
                          max_elems: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of the cross-entropy loss against the input
    and every parameter (inference mode: dropout off, batch norm frozen)."""
    xt = Tensor(np.asarray(x, dtype=tz.get_dtype()), requires_grad=True)
    labels = np.asarray(labels)

    def loss_fn():
        return cross_entropy(model.forward(xt, training=False), labels)

    tensors = [xt] + [t for _, t in model.parameters()]
    return sweep_grad_check(loss_fn, tensors, epsilon=epsilon,
                            max_elems=max_elems, rng=rng, denom_floor=1e-4)


# ----------------------------------------------------------------------
# cross-session protocol
# ----------------------------------------------------------------------
def run_protocol(corpus: dict[int, dict[int, TrialSet | Path | str]],
                 model_config: ModelConfig, train_config: TrainConfig,
                 split: SplitSpec | None = None) -> dict:
    """Per subject: split the training session, train, then score each test
    session. Returns rows plus the grand mean +- across-subject std of the
    per-subject means. Subjects missing the training session are skipped
    with a warning; missing individual test sessions likewise.
    """
    split = split or SplitSpec(seed=train_config.seed)
    rows = []
    per_subject_mean: dict[int, float] = {}
    for subject in sorted(corpus):
        sessions = corpus[subject]
        if split.train_session not in sessions:
            logger.warning("subject %s: training session %s missing; skipped",
                           subject, split.train_session)
            continue
        train_full = _resolve(sessions[split.train_session])
        tr, va = split_train_val(train_full, split)
        model = build_model(model_config, seed=train_config.seed)
        train(model, tr, va, train_config)
        accs = []
        for k in split.test_sessions:
            if k not in sessions:
                logger.warning("subject %s: test session %s missing; skipped", subject, k)
                continue
            ts = _resolve(sessions[k])
            _, acc = evaluate(model, ts, train_config.batch_size)
            rows.append({"subject": subject, "session": k,
                         "accuracy": acc, "n_trials": ts.n_trials})
            accs.append(acc)
        if accs:
            per_subject_mean[subject] = float(np.mean(accs))

    means = np.array(list(per_subject_mean.values()), dtype=np.float64)
    session_means: dict[int, float] = {}
    for k in split.test_sessions:
        vals = [r["accuracy"] for r in rows if r["session"] == k]
        if vals:
            session_means[k] = float(np.mean(vals))
    return {
        "rows": rows,
        "per_subject_mean": per_subject_mean,
        "per_session_mean": session_means,
        "grand_mean": float(means.mean()) if means.size else float("nan"),
        "grand_std": float(means.std(ddof=0)) if means.size else float("nan"),
        "seed": train_config.seed,
        "model_config": model_config.to_dict(),
        "train_config": dataclasses.asdict(train_config),
    }


def _resolve(entry) -> TrialSet:
    if isinstance(entry, TrialSet):
        return entry
    return load_trials(entry)


def write_results_csv(results: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "session", "accuracy", "n_trials"])
        for r in results["rows"]:
            writer.writerow([r["subject"], r["session"],
                             f"{r['accuracy']:.6f}", r["n_trials"]])


def write_summary_json(results: dict, path) -> None:
    summary = {k: v for k, v in results.items() if k != "rows"}
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])
        for r in history.records:
            writer.writerow([r["epoch"], f"{r['train_loss']:.6f}", f"{r['train_acc']:.6f}",
                             f"{r['val_loss']:.6f}", f"{r['val_acc']:.6f}", f"{r['lr']:.6g}"])
