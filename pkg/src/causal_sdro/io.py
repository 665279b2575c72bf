"""Atomic file output and CSV helpers shared by the command line tools."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(v) -> str:
    """Stable text form for CSV cells (round-trips floats exactly)."""
    if isinstance(v, float):
        return repr(float(v))
    if hasattr(v, "item"):
        return fmt(v.item())
    return str(v)


def csv_text(header, rows, comments=(), footer=()) -> str:
    out = [f"# {c}" for c in comments]
    out.append(",".join(header))
    out += [",".join(fmt(v) for v in row) for row in rows]
    out += [f"# {c}" for c in footer]
    return "\n".join(out) + "\n"


def write_csv(path, header, rows, comments=(), footer=()) -> None:
    atomic_write_text(path, csv_text(header, rows, comments, footer))


def data_rows(path) -> list[str]:
    """Non-comment lines of a CSV file, header included."""
    with open(path) as fh:
        return [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
