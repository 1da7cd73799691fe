"""Array and table files: NPY v1.0 (little-endian float64), CSV, manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def save_npy(path, arr) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
    return path


def load_npy(path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.float64)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root, files, extra=None) -> Path:
    """``manifest.json`` listing every file (relative path) with its SHA-256."""
    root = Path(root)
    entries = sorted(
        ({"path": str(Path(f).relative_to(root)), "sha256": sha256(f)} for f in files),
        key=lambda e: e["path"],
    )
    doc = {"files": entries}
    if extra:
        doc.update(extra)
    out = root / "manifest.json"
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def fmt(value) -> str:
    """Fixed 6-decimal formatting for floats; plain str otherwise."""
    if isinstance(value, (float, np.floating)):
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
