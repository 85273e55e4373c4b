"""On-disk artifact helpers: manifests, raw tensor blobs, digests, atomic writes."""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping

import numpy as np

MANIFEST = "manifest.json"

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u16": "<u2", "u8": "u1"}
_TAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class DigestMismatch(RuntimeError):
    """An upstream artifact no longer matches the digest recorded downstream."""


def dumps(obj: Any) -> str:
    # Canonical form: byte-identical output for identical content.
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_text_atomic(path: os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: os.PathLike, obj: Any) -> None:
    write_text_atomic(path, dumps(obj))


def read_json(path: os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def dtype_tag(arr: np.ndarray) -> str:
    tag = _TAGS.get(arr.dtype.newbyteorder("<").str) or _TAGS.get(arr.dtype.str)
    if tag is None:
        raise TypeError(f"unsupported blob dtype {arr.dtype}")
    return tag


def write_blob(path: os.PathLike, arr: np.ndarray, tag: str | None = None) -> Dict[str, Any]:
    """Write ``arr`` as a little-endian C-order blob and return its manifest entry."""
    arr = np.asarray(arr)
    if tag is None:
        tag = dtype_tag(arr)
    data = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data.tobytes(order="C"))
    return {"file": path.name, "dtype": tag, "shape": list(arr.shape)}


def read_blob(path: os.PathLike, tag: str, shape) -> np.ndarray:
    raw = Path(path).read_bytes()
    dt = np.dtype(_DTYPES[tag])
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensors(directory: os.PathLike, tensors: Mapping[str, np.ndarray], tag: str | None = None) -> Dict[str, Any]:
    directory = Path(directory)
    entries = {}
    for name, arr in tensors.items():
        entry = write_blob(directory / (name + ".bin"), arr, tag)
        entry["file"] = name + ".bin"
        entries[name] = entry
    return entries


def load_tensors(directory: os.PathLike, entries: Mapping[str, Mapping[str, Any]]) -> Dict[str, np.ndarray]:
    directory = Path(directory)
    return {name: read_blob(directory / e["file"], e["dtype"], e["shape"]) for name, e in entries.items()}


def dir_digest(path: os.PathLike) -> str:
    """sha256 over every file below ``path`` (relative names and bytes, sorted)."""
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(root)
    h = hashlib.sha256()
    files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
    for p in files:
        if p.name.startswith(".lock") or p.name.startswith(".tmp-"):
            continue
        rel = p.name if root.is_file() else p.relative_to(root).as_posix()
        h.update(rel.encode())
        h.update(b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def verify_digest(path: os.PathLike, expected: str, what: str = "artifact") -> None:
    actual = dir_digest(path)
    if actual != expected:
        raise DigestMismatch(f"{what} at {path} has digest {actual[:12]}, expected {expected[:12]}")


@contextlib.contextmanager
def atomic_dir(final: os.PathLike, overwrite: bool = True) -> Iterator[Path]:
    """Build a directory under a temporary name, then rename it into place."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=".tmp-" + final.name + "-"))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        if not overwrite:
            shutil.rmtree(tmp, ignore_errors=True)
            raise FileExistsError(final)
        old = final.with_name(".tmp-old-" + final.name)
        shutil.rmtree(old, ignore_errors=True)
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, final)


@contextlib.contextmanager
def stage_lock(directory: os.PathLike, stage: str) -> Iterator[None]:
    """One writer per stage within a run directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / f".lock-{stage}"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"stage {stage!r} is locked by another writer ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()
