"""Versioned JSON-lines files.

Every file written by this package starts with a header record
``{"format": <name>, "version": <int>}``. Readers reject a header whose
format or version they do not know. User-authored inputs (documents and
labeled statements) may omit the header.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

FORMAT_VERSIONS = {
    "mtb.documents": 1,
    "mtb.gold": 1,
    "mtb.statements": 1,
    "mtb.pairs": 1,
    "mtb.labeled": 1,
    "mtb.metrics": 1,
    "mtb.sweep": 1,
}
HEADER_OPTIONAL = {"mtb.documents", "mtb.labeled"}


class FormatError(ValueError):
    """Malformed or unsupported input file; ``line`` is 1-based."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


def dumps(record: Any) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: str | Path, fmt: str, records: Iterable[Any]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps({"format": fmt, "version": FORMAT_VERSIONS[fmt]}) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path, fmt: str) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` pairs, validating the header."""
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        first = True
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(rec, dict):
                raise FormatError("record is not a JSON object", path, lineno)
            if first:
                first = False
                if "format" in rec and "version" in rec and len(rec) == 2:
                    if rec["format"] != fmt:
                        raise FormatError(f"expected format {fmt!r}, found {rec['format']!r}", path, lineno)
                    if rec["version"] != FORMAT_VERSIONS[fmt]:
                        raise FormatError(f"unsupported {fmt} version {rec['version']!r}", path, lineno)
                    continue
                if fmt not in HEADER_OPTIONAL:
                    raise FormatError(f"missing {fmt} header", path, lineno)
            yield lineno, rec


def field(rec: dict, key: str, path: str | None, lineno: int):
    try:
        return rec[key]
    except KeyError:
        raise FormatError(f"missing field {key!r}", path, lineno) from None
