"""Convert MAT-file motor-imagery recordings into the decoder's canonical
binary trial format (ETF).

The converter probes a documented list of candidate variable names
(``data``/``eeg``/``x`` for trials, ``labels``/``label``/``y`` for labels)
and fails loudly on anything unexpected. Float samples pass through
unchanged apart from the format's float32 storage; labels are remapped
from the distribution's {1=left, 2=right} to {0=left, 1=right}. Nothing
is written unless every validation passes.
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import loadmat

ETF_MAGIC = b"EEGT"
ETF_VERSION = 1
_HEADER = struct.Struct("<4sIIIIfII")

DATA_KEYS = ("data", "eeg", "x", "X", "EEG")
LABEL_KEYS = ("labels", "label", "y", "Y")


class ConversionError(ValueError):
    """The MAT file does not look like a session recording."""


@dataclass
class ConversionReport:
    source: str
    subject_id: int
    session_id: int
    trials_written: int
    channel_order: list[str]
    checksum: int           # CRC32 of the emitted file's payload
    out_path: str


def _probe(mat: dict, keys) -> tuple[str, np.ndarray]:
    for key in keys:
        if key in mat:
            return key, np.asarray(mat[key])
    found = [k for k in mat if not k.startswith("__")]
    raise ConversionError(f"none of {keys} present; file holds {found}")


def parse_ids_from_name(path) -> tuple[int | None, int | None]:
    """Subject/session ids from names like sub-001_ses-02_task_....mat."""
    name = Path(path).name
    sub = re.search(r"sub-?(\d+)", name, re.IGNORECASE)
    ses = re.search(r"ses(?:sion)?-?(\d+)", name, re.IGNORECASE)
    return (int(sub.group(1)) if sub else None,
            int(ses.group(1)) if ses else None)


def convert_shu(mat_path, montage: list[str], out_path,
                subject_id: int | None = None, session_id: int | None = None,
                sample_rate: float = 250.0) -> ConversionReport:
    """Validate and convert one session MAT file. Emits the ETF plus a JSON
    sidecar recording provenance; returns the conversion report."""
    mat_path = Path(mat_path)
    out_path = Path(out_path)
    mat = loadmat(str(mat_path))
    data_key, data = _probe(mat, DATA_KEYS)
    label_key, labels = _probe(mat, LABEL_KEYS)

    if data.ndim != 3:
        raise ConversionError(
            f"{data_key!r} must be [trials, channels, samples]; found shape {data.shape}")
    n, c, t = data.shape
    if c != len(montage):
        raise ConversionError(
            f"recording has {c} channels but the montage lists {len(montage)}")
    labels = np.squeeze(labels)
    if labels.ndim != 1 or len(labels) != n:
        raise ConversionError(
            f"{label_key!r} must hold one label per trial; found shape {labels.shape} "
            f"for {n} trials")
    values = set(np.unique(labels).tolist())
    if values <= {1, 2}:
        remapped = (labels - 1).astype(np.uint8)
    elif values <= {0, 1}:
        remapped = labels.astype(np.uint8)
    else:
        raise ConversionError(f"labels must be {{1,2}} (left/right), found {sorted(values)}")
    if not np.all(np.isfinite(data)):
        raise ConversionError("recording contains non-finite samples")

    file_sub, file_ses = parse_ids_from_name(mat_path)
    subject_id = subject_id if subject_id is not None else file_sub
    session_id = session_id if session_id is not None else file_ses
    if subject_id is None or session_id is None:
        raise ConversionError(
            "subject/session ids are neither in the filename (sub-XXX_ses-YY) "
            "nor given explicitly")

    header = _HEADER.pack(ETF_MAGIC, ETF_VERSION, n, c, t, sample_rate,
                          subject_id, session_id)
    body = header + remapped.tobytes() + data.astype("<f4").tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(body + struct.pack("<I", crc))
    out_path.with_suffix(".json").write_text(json.dumps({
        "source": mat_path.name,
        "converter": "mftnet-tools",
        "channel_order": montage,
        "data_key": data_key,
        "label_key": label_key,
    }, indent=2, sort_keys=True))
    return ConversionReport(source=str(mat_path), subject_id=subject_id,
                            session_id=session_id, trials_written=n,
                            channel_order=list(montage), checksum=crc,
                            out_path=str(out_path))
