"""Plain-text matrix files: one row per grid line, whitespace-separated decimals."""

from pathlib import Path

import numpy as np


def write_matrix(path, values):
    """Write a 1-D or 2-D array.

    1-D arrays are written as a single row. Values use 17 significant digits so a
    read-back is bit-identical.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"matrix files hold 1-D or 2-D data, got ndim={arr.ndim}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(repr(float(v)) for v in row) for row in arr]
    path.write_text("\n".join(lines) + "\n")


def read_matrix(path):
    """Read a matrix file; a single row or single column comes back 1-D."""
    arr = np.loadtxt(path, dtype=float, ndmin=2)
    if arr.shape[0] == 1 or arr.shape[1] == 1:
        return arr.ravel()
    return arr
