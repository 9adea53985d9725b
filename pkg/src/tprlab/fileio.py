"""Config-hash stamping shared by the text artifact formats.

Every file the pipeline writes may carry a leading comment line of the form
``#config_hash=<hex>``. Loaders skip comment lines; the CLI stamps each
artifact it produces so later stages can refuse mismatched inputs.
"""

from __future__ import annotations

from pathlib import Path as FilePath
from typing import Iterable, Iterator

CONFIG_HASH_PREFIX = "#config_hash="


def numbered_rows(reader: Iterable[list[str]]) -> Iterator[tuple[int, list[str]]]:
    """(1-based line number, csv row) pairs with comment lines skipped."""
    for line_no, row in enumerate(reader, start=1):
        if row and row[0].startswith("#"):
            continue
        yield line_no, row


def stamp_file(path: str | FilePath, config_hash: str) -> None:
    """Prepend a config-hash comment line to an existing text artifact."""
    path = FilePath(path)
    body = path.read_text(encoding="utf-8")
    path.write_text(f"{CONFIG_HASH_PREFIX}{config_hash}\n{body}", encoding="utf-8")


def read_stamp(path: str | FilePath) -> str | None:
    """The stamped config hash, or None when the file has no stamp."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
    if first.startswith(CONFIG_HASH_PREFIX):
        return first[len(CONFIG_HASH_PREFIX) :]
    return None
