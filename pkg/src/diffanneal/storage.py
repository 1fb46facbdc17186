"""Flat-file persistence: sample batches as CSV, metadata as JSON.

Batches are written as one row per sample with ``%.17g`` formatting, which
round-trips doubles exactly, so a rerun under the same seed produces
byte-identical files.  Wall-clock runtimes never enter the replayed
artifacts; they are collected separately (see the harness timings file).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import SampleBatch

__all__ = ["save_batch", "load_batch", "write_json", "read_json"]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_batch(batch: SampleBatch, csv_path) -> Path:
    """Write samples to ``csv_path`` and a metadata sidecar next to it.

    The sidecar (same stem, ``.json``) records method, seeds, trial and
    discard count plus any extras; runtime is deliberately left out so the
    pair is reproducible byte for byte.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(csv_path, batch.samples, fmt="%.17g", delimiter=",")
    meta = {
        "method": batch.method,
        "seed": int(batch.seed),
        "trial": int(batch.trial),
        "discarded": int(batch.discarded),
        "n": int(batch.n),
        "dim": int(batch.dim),
        "extras": batch.extras,
    }
    write_json(csv_path.with_suffix(".json"), meta)
    return csv_path


def load_batch(csv_path) -> SampleBatch:
    csv_path = Path(csv_path)
    samples = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    meta_path = csv_path.with_suffix(".json")
    meta = read_json(meta_path) if meta_path.exists() else {}
    return SampleBatch(
        samples,
        meta.get("method", csv_path.stem),
        seed=meta.get("seed", 0),
        trial=meta.get("trial", 0),
        discarded=meta.get("discarded", 0),
        extras=meta.get("extras", {}),
    )
