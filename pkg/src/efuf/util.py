"""Hashing, seeded substreams, and line-delimited artifact I/O.

All artifact files are UTF-8 JSON lines. Files written by pipeline stages
start with a single ``{"_meta": {...}}`` line that embeds the config hash of
the producing run; readers skip it transparently. Timestamps never appear in
artifacts, only in the per-stage ``*_meta.json`` sidecars, so reruns with the
same config and seed are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def stable_digest(*parts: Any, length: int = 12) -> str:
    """Hex digest of a tuple of values, stable across processes and platforms."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:length]


def stable_int(*parts: Any) -> int:
    """64-bit integer derived from sha256; used to key RNG substreams."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG substream so every module draws from the one run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stable_int(name)]))


def file_digest(path: Path | str, length: int = 12) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()[:length]


def write_jsonl(path: Path | str, records: Iterable[dict], meta: dict | None = None) -> int:
    """Write records one JSON object per line; optional leading _meta line.

    Returns the number of data records written (meta line excluded).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        if meta is not None:
            f.write(json.dumps({"_meta": meta}, ensure_ascii=False) + "\n")
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: Path | str) -> Iterator[dict]:
    """Yield data records, skipping any leading _meta line."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_meta" in rec and len(rec) == 1:
                continue
            yield rec


def read_jsonl_meta(path: Path | str) -> dict | None:
    """Return the _meta header of an artifact file, if present."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_meta" in rec and len(rec) == 1:
                return rec["_meta"]
            return None
    return None


def write_json(path: Path | str, obj: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=2)
        f.write("\n")


def read_json(path: Path | str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
