"""Canonical serialization helpers.

Every persisted artifact (stores, exports, reports, episode records) goes
through `canonical_dumps` so that re-emission of identical data is
byte-identical across platforms and runs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator


def canonical_dumps(obj: Any) -> str:
    """Deterministic JSON encoding: sorted keys, tight separators, ASCII."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_jsonl(path: str | Path, records: Iterable[Any]) -> int:
    """Write records as one canonical JSON document per line. Returns count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(canonical_dumps(rec))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[Any]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def fmt6(value: float) -> str:
    """Fixed 6-place decimal formatting used in all human-facing reports."""
    return f"{value:.6f}"


def split_preserving(text: str) -> list[str]:
    """Split text into whitespace-delimited chunks that concatenate back.

    Each chunk is a run of non-space characters plus the whitespace that
    follows it; leading whitespace attaches to the first chunk. Used as the
    tokenizer-free proxy for token accounting.
    """
    import re

    if not text:
        return []
    chunks = re.findall(r"\s*\S+\s*", text)
    if not chunks:
        return [text]
    consumed = sum(len(c) for c in chunks)
    if consumed < len(text):
        chunks[-1] = chunks[-1] + text[consumed:]
    return chunks
