"""Small file-format helpers: escaped TSV records and atomic writes.

Text fields in pair/triples files may contain tabs and newlines, so every
field is escaped with backslash sequences (\\t, \\n, \\\\) before joining
with literal tabs. All files are UTF-8.
"""

import os
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

from .errors import CorpusFormatError


def escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def unescape_field(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "t":
                out.append("\t")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "r":
                out.append("\r")
            elif nxt == "\\":
                out.append("\\")
            else:
                out.append(nxt)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def write_tsv(path: str | Path, rows: list[tuple[str, ...]]) -> None:
    with atomic_write(path) as f:
        for row in rows:
            f.write("\t".join(escape_field(field) for field in row) + "\n")


def read_tsv(path: str | Path, num_fields: int) -> Iterator[tuple[int, tuple[str, ...]]]:
    """Yield (line_number, fields) pairs; line numbers are 1-based.

    Raises CorpusFormatError when a line has the wrong field count.
    """
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != num_fields:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: expected {num_fields} fields, got {len(parts)}"
                )
            yield lineno, tuple(unescape_field(p) for p in parts)


@contextmanager
def atomic_write(path: str | Path, mode: str = "w"):
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
