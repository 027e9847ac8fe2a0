"""Generic numeric CSV ingestion with deterministic splits."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .rng import STREAM_DATASPLIT, derive_stream

_STD_FLOOR = 1e-12


def load_csv_dataset(path: str, has_header: bool = False, standardize: bool = True,
                     split=(0.8, 0.1, 0.1), seed: int = 0):
    """Read a rectangular numeric CSV and split it train/val/test.

    The shuffle is a seeded permutation, so split membership is a pure
    function of (file, split, seed). Standardization statistics come from
    the training rows only and are applied to all three splits; they are
    returned so checkpoints can standardize future inputs identically.

    Returns ``(train, val, test, stats)`` with ``stats`` either None or a
    dict with per-column ``mean`` and ``std``.
    """
    split = tuple(float(f) for f in split)
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise DataError("split must be three non-negative fractions summing to 1")
    rows = []
    width = None
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if has_header and line_no == 1:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(
                    f"row {line_no}: expected {width} columns, found {len(cells)}"
                )
            parsed = np.empty(width)
            for j, cell in enumerate(cells):
                try:
                    parsed[j] = float(cell)
                except ValueError as exc:
                    raise DataError(f"row {line_no}, column {j + 1}: non-numeric cell {cell.strip()!r}") from exc
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.vstack(rows)
    n = data.shape[0]
    perm = derive_stream(seed, STREAM_DATASPLIT, 0).permutation(n)
    data = data[perm]
    n_train = int(round(n * split[0]))
    n_val = int(round(n * split[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    train, val, test = data[:n_train], data[n_train : n_train + n_val], data[n_train + n_val :]
    stats = None
    if standardize:
        if n_train < 1:
            raise DataError("standardization requires a non-empty training split")
        mean = train.mean(axis=0)
        std = np.maximum(train.std(axis=0), _STD_FLOOR)
        stats = {"mean": mean, "std": std}
        train = (train - mean) / std
        val = (val - mean) / std if val.size else val
        test = (test - mean) / std if test.size else test
    return train, val, test, stats


def apply_standardization(data: np.ndarray, stats) -> np.ndarray:
    if stats is None:
        return data
    return (np.asarray(data, dtype=np.float64) - stats["mean"]) / stats["std"]
