"""
File helpers shared by every ReadLens writer.

Every artifact is written through a temporary file in the target directory
and renamed into place, so readers never see a half-written report.
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes to path via temp file + rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(temp_path, target)
    except Exception:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(payload: Any, indent: Union[int, None] = None) -> str:
    # json uses repr() for floats, which round-trips float64 exactly
    return json.dumps(payload, ensure_ascii=False, indent=indent, allow_nan=False)


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    return atomic_write_text(path, dumps_json(payload, indent=2) + "\n")


def append_jsonl(path: PathLike, record: Dict[str, Any]) -> None:
    """Append one record to a JSON-lines log."""
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(dumps_json(record) + "\n")


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
