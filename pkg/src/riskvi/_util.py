"""Small shared helpers."""

from __future__ import annotations

import os
import tempfile


def atomic_write(path, text: str) -> None:
    """Write text to path via a temp file + rename in the same directory."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def fmt(x) -> str:
    """Deterministic float formatting for CSV output."""
    return f"{x:.17g}"
