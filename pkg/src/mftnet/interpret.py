"""Attribution and trustworthiness analysis: Gradient x Input relevance
maps, per-channel importance ranking, class-averaged maps, and electrode
deletion tests that zero channels in importance order while tracking
prediction confidence.

Attribution differentiates the pre-softmax logit of the target class with
every stochastic layer disabled, so repeated calls are bit-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .data import TrialSet
from .tensor import Tensor
from .training import TrainConfig, train


@dataclass
class AttributionMap:
    values: np.ndarray            # [C, T] signed relevance
    trial_id: int
    predicted_class: int
    confidence: float             # softmax probability of the predicted class


@dataclass
class ChannelScores:
    scores: np.ndarray            # [C] nonnegative, time- and trial-averaged |relevance|
    ranking: np.ndarray           # channel indices, most important first


@dataclass
class DeletionCurve:
    fractions: list
    mean_confidence: list
    std: list
    mode: str                     # "most-important" | "least-important"
    class_id: int | None = None
    flips: list = field(default_factory=list)   # predictions changed by deletion


def gradient_x_input(model, trial, target_class: int | None = None,
                     trial_id: int = 0) -> AttributionMap:
    """Relevance of every input sample: x * d(logit_target)/dx.

    ``target_class`` defaults to the model's prediction for the trial.
    """
    trial = np.asarray(trial)
    if trial.ndim == 3 and trial.shape[-1] == 1:
        trial = trial[..., 0]
    if trial.ndim != 2:
        raise ValueError(f"expected one [C, T] trial, got shape {trial.shape}")
    x = Tensor(trial[None, :, :, None].astype(tz.get_dtype()), requires_grad=True)
    logits = model.logits(x, training=False)
    probs = _softmax_np(logits.data)[0]
    pred = int(probs.argmax())
    target = pred if target_class is None else int(target_class)
    logits[0, target].backward()
    grad = x.grad[0, :, :, 0]
    if not np.all(np.isfinite(grad)):
        raise tz.NonFiniteError("attribution gradient is non-finite")
    return AttributionMap(values=trial * grad, trial_id=trial_id,
                          predicted_class=pred, confidence=float(probs[pred]))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def correct_trial_attributions(model, ts: TrialSet,
                               class_id: int | None = None) -> list[AttributionMap]:
    """Gradient x Input for every correctly classified trial (optionally of
    one class), differentiated at the true-class logit."""
    preds = model.predict(ts.trials).argmax(axis=1)
    maps = []
    for i in range(ts.n_trials):
        label = int(ts.labels[i])
        if preds[i] != label:
            continue
        if class_id is not None and label != class_id:
            continue
        maps.append(gradient_x_input(model, ts.trials[i], target_class=label, trial_id=i))
    return maps


def channel_scores(maps: list[AttributionMap]) -> ChannelScores:
    """Average |relevance| over trials and time; rank descending, ties
    broken toward the lower channel index."""
    if not maps:
        raise ValueError("cannot score an empty set of attribution maps")
    # canonical trial order keeps the reduction bit-identical under permutation
    ordered = sorted(maps, key=lambda m: m.trial_id)
    stacked = np.stack([m.values for m in ordered])
    scores = np.abs(stacked).mean(axis=(0, 2))
    ranking = np.argsort(-scores, kind="stable")
    return ChannelScores(scores=scores, ranking=ranking)


def class_average_map(model, ts: TrialSet, class_id: int):
    """Mean attribution map over correctly classified trials of one class,
    plus the per-channel scores of those trials."""
    maps = correct_trial_attributions(model, ts, class_id=class_id)
    if not maps:
        n_class = int((ts.labels == class_id).sum())
        raise ValueError(f"no correctly classified trials of class {class_id} "
                         f"({n_class} trials of that class in the set)")
    mean_map = np.stack([m.values for m in maps]).mean(axis=0)
    return mean_map, channel_scores(maps)


def deletion_test(model, ts: TrialSet, scores: ChannelScores,
                  fractions, mode: str, class_id: int | None = None) -> DeletionCurve:
    """Zero ceil(f*C) whole channels, most or least important first, and
    record the mean and std of the true-class confidence over trials."""
    if mode not in ("most-important", "least-important"):
        raise ValueError(f"unknown deletion mode {mode!r}")
    fractions = list(fractions)
    if any(f > 1.0 or f < 0.0 for f in fractions):
        raise ValueError("deletion fractions must lie in [0, 1]")
    if fractions != sorted(fractions) or fractions[0] != 0.0:
        raise ValueError("fractions must be sorted ascending and start at 0")
    order = scores.ranking if mode == "most-important" else scores.ranking[::-1]
    n_channels = ts.n_channels
    base_pred = model.predict(ts.trials).argmax(axis=1)

    means, stds, flips = [], [], []
    for f in fractions:
        k = math.ceil(f * n_channels)
        x = ts.trials.copy()
        if k:
            x[:, order[:k], :] = 0.0
        probs = model.predict(x)
        conf = probs[np.arange(ts.n_trials), ts.labels.astype(np.intp)]
        means.append(float(conf.mean()))
        stds.append(float(conf.std(ddof=0)))
        flips.append(int((probs.argmax(axis=1) != base_pred).sum()))
    return DeletionCurve(fractions=fractions, mean_confidence=means, std=stds,
                         mode=mode, class_id=class_id, flips=flips)


def curve_auc(curve: DeletionCurve) -> float:
    """Trapezoidal area under mean confidence vs deletion fraction."""
    return float(np.trapezoid(curve.mean_confidence, curve.fractions))


def finetune_for_interpretation(model, ts: TrialSet, epochs: int = 50,
                                cfg: TrainConfig | None = None):
    """Continue training for a fixed number of epochs and keep the final
    weights (no validation checkpointing), sharpening confidence before
    attribution. Returns the model."""
    base = cfg or TrainConfig()
    run_cfg = dataclasses.replace(base, epochs=epochs)
    train(model, ts, None, run_cfg, restore_best=False)
    return model


# ----------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------
def default_channel_names(n: int) -> list[str]:
    return [f"ch{i:02d}" for i in range(n)]


def load_montage(path) -> list[str]:
    """Montage JSON: either a list of labels or {"index": "label"} pairs."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return [str(x) for x in data]
    items = sorted(((int(k), str(v)) for k, v in data.items()))
    if [i for i, _ in items] != list(range(len(items))):
        raise ValueError("montage indices must cover 0..C-1 without gaps")
    return [label for _, label in items]


def write_channel_scores_csv(path, scores: ChannelScores,
                             channel_names: list[str] | None = None) -> None:
    names = channel_names or default_channel_names(len(scores.scores))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "score"])
        for name, s in zip(names, scores.scores):
            writer.writerow([name, f"{s:.8g}"])


def write_map_csv(path, mean_map: np.ndarray,
                  channel_names: list[str] | None = None) -> None:
    names = channel_names or default_channel_names(mean_map.shape[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel"] + [f"t{j}" for j in range(mean_map.shape[1])])
        for name, row in zip(names, mean_map):
            writer.writerow([name] + [f"{v:.8g}" for v in row])


def write_deletion_csv(path, curves: list[DeletionCurve]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "mean_confidence", "std", "mode", "class"])
        for curve in curves:
            cls = "" if curve.class_id is None else curve.class_id
            for f, m, s in zip(curve.fractions, curve.mean_confidence, curve.std):
                writer.writerow([f"{f:.4f}", f"{m:.6f}", f"{s:.6f}", curve.mode, cls])
