"""
Content-addressed on-disk cache.

An entry is ``MAGIC + sha256(payload) + payload`` stored under the hex key.
A digest mismatch (bit rot, truncated write) counts as a miss: the entry is
discarded and the caller recomputes.  Writes go to a temporary file in the
same directory and are renamed into place, so readers never see partial
entries.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .quantum import FloquetMatrix, matrix_bytes, matrix_from_bytes

log = logging.getLogger(__name__)

MAGIC = b"QAMC\x01"
FORMAT_VERSION = 1


def cache_key(*parts) -> str:
    """sha256 of a canonical JSON record (floats by repr, keys sorted)."""
    rec = json.dumps([FORMAT_VERSION, *parts], sort_keys=True, default=_jsonable)
    return hashlib.sha256(rec.encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return {k: getattr(obj, k) for k in obj.__dataclass_fields__}
    raise TypeError(f"cannot key {type(obj).__name__}")


class Cache:
    """
    Key-value store of byte payloads with checksum verification.

    With ``enabled=False`` every lookup misses and nothing is written, so
    results are recomputed from scratch.
    """

    def __init__(self, directory, enabled: bool = True):
        self.directory = Path(directory)
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self.corrupt = 0

    def path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.bin"

    def get(self, key: str) -> Optional[bytes]:
        if not self.enabled:
            self.misses += 1
            return None
        path = self.path(key)
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            self.misses += 1
            return None
        head = len(MAGIC)
        payload = blob[head + 32:]
        if blob[:head] != MAGIC or hashlib.sha256(payload).digest() != blob[head:head + 32]:
            log.warning("cache entry %s failed its checksum; recomputing", key)
            self.corrupt += 1
            self.misses += 1
            path.unlink(missing_ok=True)
            return None
        self.hits += 1
        return payload

    def put(self, key: str, payload: bytes) -> None:
        if not self.enabled:
            return
        path = self.path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(MAGIC + hashlib.sha256(payload).digest() + payload)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    # typed helpers ---------------------------------------------------------

    def json(self, key: str, compute: Callable[[], object]):
        """Cached JSON-serializable value."""
        raw = self.get(key)
        if raw is not None:
            return json.loads(raw.decode())
        value = compute()
        self.put(key, json.dumps(value, sort_keys=True, default=_jsonable).encode())
        return value

    def matrix(self, key: str, compute: Callable[[], FloquetMatrix]) -> FloquetMatrix:
        """Cached Floquet matrix in the binary matrix layout."""
        raw = self.get(key)
        if raw is not None:
            try:
                return matrix_from_bytes(raw, key)
            except ValueError:
                self.corrupt += 1
        U = compute()
        self.put(key, matrix_bytes(U))
        return U

    def arrays(self, key: str, compute: Callable[[], dict]) -> dict:
        """Cached dict of numpy arrays (npy records concatenated with a JSON index)."""
        raw = self.get(key)
        if raw is not None:
            n = int.from_bytes(raw[:8], "little")
            index = json.loads(raw[8:8 + n].decode())
            out, pos = {}, 8 + n
            for name, dtype, shape, size in index:
                out[name] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)),
                                          offset=pos).reshape(shape).copy()
                pos += size
            return out
        value = compute()
        index, chunks = [], []
        for name in sorted(value):
            arr = np.ascontiguousarray(value[name])
            dt = arr.dtype.newbyteorder("<").str
            data = arr.astype(dt).tobytes()
            index.append((name, dt, list(arr.shape), len(data)))
            chunks.append(data)
        head = json.dumps(index).encode()
        self.put(key, len(head).to_bytes(8, "little") + head + b"".join(chunks))
        return value
