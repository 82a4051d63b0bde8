"""
File formats and small persistence helpers

Binary containers share one framing: 8 magic bytes, a little-endian uint32 header length,
a UTF-8 JSON header, then the raw payload.
"""
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import pandas as pd

from .. import FormatError, StorageError

PathLike = Union[str, Path]

_LENGTH = struct.Struct("<I")


def canonical_json(obj: Any) -> str:
    """Stable JSON text, the basis for config hashes and reproducible outputs

    >>> canonical_json({"b": 1, "a": [1.5, None]})
    '{"a":[1.5,null],"b":1}'
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """First 16 hex characters of the SHA-256 of the canonical JSON

    >>> len(config_hash({"seed": 0}))
    16
    """
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def write_container(path: PathLike, magic: bytes, header: Dict, payload: bytes) -> Path:
    if len(magic) != 8:
        raise ValueError(f"magic must be 8 bytes, got {magic!r}")
    path = Path(path)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(magic)
            fh.write(_LENGTH.pack(len(head)))
            fh.write(head)
            fh.write(payload)
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}") from e
    return path


def peek_magic(path: PathLike) -> bytes:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return fh.read(8)
    except OSError as e:
        raise StorageError(f"Could not read {path}: {e}") from e


def read_container(path: PathLike, magic: bytes) -> Tuple[Dict, bytes]:
    """Read a framed file, checking the magic bytes

    Returns:
      (header dict, payload bytes)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Could not read {path}: {e}") from e
    if raw[:8] != magic:
        raise FormatError(f"{path} is not a {magic!r} file (magic {raw[:8]!r})")
    if len(raw) < 8 + _LENGTH.size:
        raise FormatError(f"{path} is truncated")
    (length,) = _LENGTH.unpack_from(raw, 8)
    start = 8 + _LENGTH.size
    try:
        header = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} has a corrupt header") from e
    return header, raw[start + length :]


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}") from e
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise StorageError(f"{path} does not exist") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e


def save_csv(df: pd.DataFrame, path: PathLike, comment: Optional[str] = None, **kwargs) -> Path:
    """Write a DataFrame as CSV with a fixed float format so reruns are byte-identical

    A `comment` goes on a leading `# ` line; read such files back with
    `pd.read_csv(path, comment="#")`.
    """
    path = Path(path)
    kwargs.setdefault("index", False)
    kwargs.setdefault("float_format", "%.9g")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if comment is not None:
                fh.write(f"# {comment}\n")
            df.to_csv(fh, **kwargs)
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}") from e
    return path
