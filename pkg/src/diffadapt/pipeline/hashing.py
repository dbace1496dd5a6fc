"""Content hashing and the append-only per-item hash log used for resumability."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from arbitrary labeled parts."""
    blob = json.dumps([str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "big") >> 1


class HashLog:
    """Append-only jsonl of {key, sha256}; the last entry per key wins.

    A stage marks each produced file here; on re-run, files whose recorded
    hash matches the bytes on disk are skipped, anything else is redone.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.entries: dict[str, str] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                self.entries[rec["key"]] = rec["sha256"]

    def is_current(self, key: str, file_path: Path) -> bool:
        if key not in self.entries or not file_path.exists():
            return False
        return sha256_file(file_path) == self.entries[key]

    def record(self, key: str, file_path: Path) -> None:
        digest = sha256_file(file_path)
        self.entries[key] = digest
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps({"key": key, "sha256": digest}) + "\n")
