"""End-to-end check across the packages: a model trained on trials with
class-specific planted channels exports per-class channel scores through
the decoder package, and the rendered topographies show laterally
mirrored hotspots when those channels sit on opposite scalp sides.
"""

import numpy as np
import pytest

from mftnet.data import synth_generate
from mftnet.interpret import (channel_scores, correct_trial_attributions,
                              write_channel_scores_csv)
from mftnet.model import build_model, reduced_config
from mftnet.training import TrainConfig, train

from mftnet_tools.plots import read_scores_csv, render_topomap


# left plants (channels 0,1) on left-scalp electrodes, right plants (2,3)
# on the mirrored right-scalp ones
MONTAGE16 = ["C3", "CP5", "C4", "CP6",
             "FP1", "FP2", "FZ", "F3", "F4", "F7", "F8",
             "PZ", "P3", "P4", "O1", "O2"]


def _peak_x(grid, extent):
    masked = np.where(np.isnan(grid), -np.inf, grid)
    _, ix = np.unravel_index(np.argmax(masked), grid.shape)
    lo, hi = extent[0], extent[1]
    return lo + (hi - lo) * ix / (grid.shape[1] - 1)


@pytest.mark.slow
def test_planted_exports_render_mirrored_hotspots(tmp_path):
    ts = synth_generate(32, 16, 64, seed=107, snr=50.0)
    assert ts.meta["left_channels"] == [0, 1]
    assert ts.meta["right_channels"] == [2, 3]
    model = build_model(reduced_config(n_channels=16, n_samples=64), seed=42)
    train(model, ts, None, TrainConfig(epochs=15, seed=42))

    peak = {}
    for class_id in (0, 1):
        maps = correct_trial_attributions(model, ts, class_id=class_id)
        scores = channel_scores(maps)
        csv_path = tmp_path / f"scores_class{class_id}.csv"
        write_channel_scores_csv(csv_path, scores, MONTAGE16)
        labels, values = read_scores_csv(csv_path)
        grid, extent = render_topomap(labels, values)
        peak[class_id] = _peak_x(grid, extent)

    assert peak[0] < 0 < peak[1], f"peaks at x={peak}"
