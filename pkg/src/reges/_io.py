"""Line-delimited JSON helpers shared by every stage."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Iterator, Union

HEADER_KEY = "__header__"

Source = Union[str, Path, BinaryIO, bytes]


def dumps(record: Any) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def iter_lines(source: Source) -> Iterator[tuple[int, str]]:
    """Yield ``(line_number, text)`` for each non-blank line, 1-based."""
    if isinstance(source, bytes):
        stream: BinaryIO = io.BytesIO(source)
    elif isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            yield from iter_lines(fh.read())
        return
    else:
        stream = source
    for lineno, raw in enumerate(stream, start=1):
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        text = text.strip("\r\n")
        if text.strip():
            yield lineno, text


def write_jsonl(path: str | Path, records: Iterable[Any], header: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(dumps({HEADER_KEY: header}) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")
    return path


def read_jsonl(path: Source) -> list[Any]:
    """Read records, skipping a leading artifact header if present."""
    out = []
    for _, text in iter_lines(path):
        rec = json.loads(text)
        if isinstance(rec, dict) and HEADER_KEY in rec:
            continue
        out.append(rec)
    return out


def read_header(path: str | Path) -> dict | None:
    for _, text in iter_lines(path):
        rec = json.loads(text)
        if isinstance(rec, dict) and HEADER_KEY in rec:
            return rec[HEADER_KEY]
        return None
    return None


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
