"""Generation manifest: one JSON record per generated image, append-only.

Paths are stored relative to the manifest's directory. The tuple
(seed, label, checkpoint, subdomain) is unique across records.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path


@dataclass
class ManifestRecord:
    label_path: str
    sketch_path: str
    prompt: str
    subdomain: str
    seed: int
    checkpoint_id: str
    image_path: str

    def key(self) -> tuple:
        return (self.seed, self.label_path, self.checkpoint_id, self.subdomain)


class GenerationManifest:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.records: list[ManifestRecord] = []
        self._keys: set[tuple] = set()
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._add(ManifestRecord(**json.loads(line)))

    def _add(self, record: ManifestRecord) -> None:
        if record.key() in self._keys:
            raise ValueError(f"manifest collision on {record.key()}")
        self.records.append(record)
        self._keys.add(record.key())

    def append(self, record: ManifestRecord) -> None:
        """Validate and persist one record; referenced files must already exist."""
        base = self.path.parent
        for rel in (record.image_path, record.label_path, record.sketch_path):
            if not (base / rel).exists():
                raise FileNotFoundError(f"manifest record references missing file {rel}")
        self._add(record)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(record)) + "\n")

    def resolve(self, rel: str) -> Path:
        return self.path.parent / rel

    def check_complete(self, images_dir: str | Path) -> None:
        """Every image file under images_dir must be referenced exactly once."""
        referenced = {}
        for rec in self.records:
            referenced[self.resolve(rec.image_path).resolve()] = referenced.get(
                self.resolve(rec.image_path).resolve(), 0
            ) + 1
        on_disk = {p.resolve() for p in Path(images_dir).glob("*.png")}
        multi = [p for p, n in referenced.items() if n > 1]
        missing = on_disk - set(referenced)
        if multi or missing:
            raise ValueError(
                f"manifest incomplete: {len(missing)} unreferenced files, {len(multi)} referenced twice"
            )
