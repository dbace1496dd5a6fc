"""Folder-layout adapters for real datasets.

Mirrors the Cityscapes/ACDC-style trees behind the same item lists the
synthetic generator produces, so real data can be mounted by setting
dataset.kind to "folders". Expected layout under dataset.root:

    source/images/*.png            8-bit RGB
    source/labels/*.png            8-bit indexed trainIds, 255 = ignore
    target/train/images/<subdomain>/*.png      (or flat *_<subdomain>.png)
    target/val/images/...  target/val/labels/...

Not exercised in CI; the synthetic path is the tested one.
"""

from __future__ import annotations

from pathlib import Path

from .synthetic import SourceItem, TargetItem


def scan_source(root: str | Path) -> list[SourceItem]:
    root = Path(root)
    items = []
    for p in sorted((root / "source" / "images").glob("*.png")):
        label = root / "source" / "labels" / p.name
        if label.exists():
            items.append(SourceItem(p.stem, p, label))
    return items


def _subdomain_of(path: Path, images_root: Path) -> str:
    rel = path.relative_to(images_root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    return path.stem.rsplit("_", 1)[-1]


def scan_target(root: str | Path, split: str) -> list[TargetItem]:
    root = Path(root)
    images_root = root / "target" / split / "images"
    labels_root = root / "target" / split / "labels"
    items = []
    for p in sorted(images_root.rglob("*.png")):
        label = labels_root / p.relative_to(images_root)
        items.append(TargetItem(
            stem=p.stem,
            subdomain=_subdomain_of(p, images_root),
            image_path=p,
            label_path=label if label.exists() else None,
        ))
    return items
