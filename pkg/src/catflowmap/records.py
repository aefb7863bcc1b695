"""Line-delimited JSON records for samples and datasets.

A record file starts with one header object::

    {"format": "cfm-samples", "version": 1, "D": 4, "K": 3, ...metadata}

followed by one object per state, ``{"state": [i_0, ..., i_{D-1}]}`` with
integer category indices.  Guided runs add a ``"reward"`` field per line.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write

FORMAT = "cfm-samples"
VERSION = 1


class RecordError(ValueError):
    pass


def dumps_states(states: np.ndarray, K: int, meta: dict | None = None,
                 rewards: np.ndarray | None = None) -> str:
    states = np.asarray(states, dtype=np.int64)
    if states.ndim != 2:
        raise RecordError("states must be [N, D] integers")
    head = {"format": FORMAT, "version": VERSION, "D": int(states.shape[1]), "K": int(K),
            "n": int(len(states)), **(meta or {})}
    buf = io.StringIO()
    buf.write(json.dumps(head, sort_keys=True) + "\n")
    for i, s in enumerate(states.tolist()):
        rec = {"state": s}
        if rewards is not None:
            rec["reward"] = float(rewards[i])
        buf.write(json.dumps(rec) + "\n")
    return buf.getvalue()


def write_states(path: str | Path, states: np.ndarray, K: int, meta: dict | None = None,
                 rewards: np.ndarray | None = None) -> None:
    atomic_write(path, dumps_states(states, K, meta, rewards))


def read_states(path: str | Path) -> tuple[dict, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise RecordError("empty record file")
    head = json.loads(lines[0])
    if head.get("format") != FORMAT:
        raise RecordError(f"not a sample record file: {head.get('format')!r}")
    if head.get("version", 0) > VERSION:
        raise RecordError(f"record version {head['version']} is newer than supported {VERSION}")
    states = np.array([json.loads(ln)["state"] for ln in lines[1:]], dtype=np.int64)
    states = states.reshape(len(lines) - 1, head["D"])
    if len(states) != head.get("n", len(states)):
        raise RecordError("record count does not match header")
    if states.size and (states.min() < 0 or states.max() >= head["K"]):
        raise RecordError("category index out of range")
    return head, states


def write_json(path: str | Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
