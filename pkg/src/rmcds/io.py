"""Text formats: mask files, CSV matrices, key=value reports."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .core import SamplingMask


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def format_kv(d: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in d.items())


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def write_mask(mask: SamplingMask, path) -> None:
    """``n <n>`` header, then one ``i j`` pair per line (0-based)."""
    lines = [f"n {mask.n}"]
    lines += [f"{i} {j}" for i, j in zip(mask.rows.tolist(), mask.cols.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_mask(path) -> SamplingMask:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty mask file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "n":
        raise ValueError(f"{path}: first line must be 'n <n>'")
    n = int(head[1])
    pairs = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: bad line {ln!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    return SamplingMask.from_pairs(n, pairs)


def write_matrix(X, path) -> None:
    """CSV, one row per line, 17 significant digits."""
    X = np.asarray(X, dtype=np.float64)
    rows = [",".join(f"{x:.17g}" for x in row) for row in X]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def read_matrix(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln.strip()]
    X = np.array([[float(x) for x in ln.split(",")] for ln in rows], dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"{path}: expected a square matrix, got {X.shape}")
    return X
