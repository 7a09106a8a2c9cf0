"""Atomic CSV/text writers with a fixed 17-significant-digit number format."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = ["fmt", "write_csv", "write_text", "write_arc_csv", "write_matrix_arc_csv"]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_text(path, text: str):
    _atomic_write(path, text)


def write_arc_csv(path, arc):
    """Vector arc as ``t,v1,...,vm`` rows."""
    m = arc.values.shape[1]
    header = ["t"] + [f"v{i + 1}" for i in range(m)]
    rows = (np.concatenate([[t], v]) for t, v in zip(arc.grid, arc.values))
    write_csv(path, header, rows)


def write_matrix_arc_csv(path, arc):
    """Matrix arc as ``t,a11,...,amm`` rows (row-major)."""
    m = arc.dim
    header = ["t"] + [f"a{i + 1}{j + 1}" for i in range(m) for j in range(m)]
    rows = (np.concatenate([[t], A.ravel()]) for t, A in zip(arc.grid, arc.values))
    write_csv(path, header, rows)
