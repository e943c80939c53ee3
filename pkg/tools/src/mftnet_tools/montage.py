"""Electrode montage handling: label lists (index order) and standard
10-20 scalp positions for 2D topographic rendering.

The packaged ``montage_shu32.json`` carries the 32-channel ordering of the
SHU distribution as documented with the dataset; confirm it against your
copy before converting (recordings with a different storage order need
their own montage file).
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

# Unit-head 2D coordinates (x: left- / right+, y: front+ / back-).
# Old temporal names (T3/T4/T5/T6) and their 10-10 equivalents both appear.
POSITIONS = {
    "FP1": (-0.31, 0.95), "FPZ": (0.0, 1.0), "FP2": (0.31, 0.95),
    "AF3": (-0.35, 0.80), "AF4": (0.35, 0.80),
    "F7": (-0.81, 0.59), "F3": (-0.40, 0.51), "FZ": (0.0, 0.50),
    "F4": (0.40, 0.51), "F8": (0.81, 0.59),
    "FC5": (-0.66, 0.27), "FC1": (-0.22, 0.26), "FC2": (0.22, 0.26),
    "FC6": (0.66, 0.27),
    "T3": (-1.00, 0.0), "T7": (-1.00, 0.0),
    "C3": (-0.50, 0.0), "CZ": (0.0, 0.0), "C4": (0.50, 0.0),
    "T4": (1.00, 0.0), "T8": (1.00, 0.0),
    "A1": (-1.15, -0.10), "A2": (1.15, -0.10),
    "CP5": (-0.66, -0.27), "CP1": (-0.22, -0.26), "CP2": (0.22, -0.26),
    "CP6": (0.66, -0.27),
    "T5": (-0.81, -0.59), "P7": (-0.81, -0.59),
    "P3": (-0.40, -0.51), "PZ": (0.0, -0.50), "P4": (0.40, -0.51),
    "T6": (0.81, -0.59), "P8": (0.81, -0.59),
    "PO3": (-0.31, -0.73), "POZ": (0.0, -0.75), "PO4": (0.31, -0.73),
    "O1": (-0.31, -0.95), "OZ": (0.0, -0.98), "O2": (0.31, -0.95),
}


class MontageError(ValueError):
    """Unknown electrode label or malformed montage file."""


def load_montage(path) -> list[str]:
    """Read a montage JSON: a list of labels, or {"index": "label"}."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        labels = [str(x) for x in data]
    else:
        items = sorted(((int(k), str(v)) for k, v in data.items()))
        if [i for i, _ in items] != list(range(len(items))):
            raise MontageError("montage indices must cover 0..C-1 without gaps")
        labels = [label for _, label in items]
    return labels


def default_shu32() -> list[str]:
    """The packaged 32-channel ordering."""
    text = resources.files("mftnet_tools").joinpath("montage_shu32.json").read_text()
    return [str(x) for x in json.loads(text)]


def positions_for(labels: list[str]):
    """2D positions for each label; raises listing any unknown labels."""
    unknown = [lbl for lbl in labels if lbl.upper() not in POSITIONS]
    if unknown:
        raise MontageError(f"unknown electrode label(s): {', '.join(unknown)}")
    import numpy as np
    return np.array([POSITIONS[lbl.upper()] for lbl in labels], dtype=float)
