"""
Utility functions for rtdesk.

Seed handling, text normalisation, stable hashing, timing statistics and
atomic file writes shared by the rest of the package.
"""
import hashlib
import json
import os
import re
import tempfile
import zlib
from typing import Any, Dict, Iterable, Sequence

import numpy as np


class SeedStream:
    """
    Named-stream splitter for a single root seed.

    Every subsystem asks for its own child stream by name, so adding a new
    consumer of randomness never shifts the draws of an existing one.

    Examples:
        >>> root = SeedStream(7)
        >>> rng = root.rng("collect")
        >>> child = root.child("eval").child("trial-3")
    """

    def __init__(self, root: int, path: Sequence[str] = ()):
        self.root = int(root)
        self.path = tuple(path)

    def child(self, name: str) -> "SeedStream":
        return SeedStream(self.root, self.path + (str(name),))

    def seed_sequence(self) -> np.random.SeedSequence:
        key = tuple(zlib.crc32(part.encode("utf-8")) for part in self.path)
        return np.random.SeedSequence(entropy=self.root, spawn_key=key)

    def rng(self, name: str = "") -> np.random.Generator:
        stream = self.child(name) if name else self
        return np.random.default_rng(stream.seed_sequence())

    def integer(self, name: str = "") -> int:
        """Derive a plain integer seed, for APIs that take an ``int``."""
        return int(self.rng(name).integers(0, 2**31 - 1))

    def __repr__(self) -> str:
        return f"SeedStream(root={self.root}, path={'/'.join(self.path) or '-'})"


def root_seed(default: int = 0) -> int:
    """Root seed from the ``RTX_SEED`` environment variable, if set."""
    value = os.environ.get("RTX_SEED")
    return int(value) if value not in (None, "") else default


_WORD = re.compile(r"[a-z0-9]+")


def normalize_text(text: str) -> str:
    """
    Lowercase and collapse whitespace/punctuation.

    Examples:
        >>> normalize_text("  Pick  the Coke-can! ")
        'pick the coke can'
    """
    return " ".join(_WORD.findall(text.lower()))


def stable_hash(text: str, buckets: int = 2**32) -> int:
    """Process-independent hash of a string (Python's ``hash`` is salted)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


def fingerprint(payload: Dict[str, Any]) -> str:
    """Short hex digest of a JSON-serialisable configuration."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def percentile_ms(durations_s: Iterable[float], q: float) -> float:
    values = np.asarray(list(durations_s), dtype=np.float64)
    if values.size == 0:
        return float("nan")
    return float(np.percentile(values, q) * 1000.0)


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_json(path: str, payload: Any) -> None:
    atomic_write_bytes(path, json.dumps(payload, indent=2, sort_keys=True, default=str).encode("utf-8"))
