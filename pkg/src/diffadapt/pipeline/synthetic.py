"""Procedural desk-scale dataset: colored-polygon street scenes with exact
labels, plus deterministic adverse-weather transforms for the target domain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..conditions import IGNORE, LabelMap, save_image, save_label
from .config import PipelineConfig

ROAD, CAR, SKY, BUILDING, VEGETATION, SIDEWALK = range(6)

_BASE_COLORS = {
    ROAD: (0.33, 0.33, 0.36),
    SKY: (0.55, 0.72, 0.92),
    BUILDING: (0.58, 0.42, 0.34),
    VEGETATION: (0.22, 0.48, 0.24),
    SIDEWALK: (0.62, 0.60, 0.55),
}
_CAR_COLORS = [(0.75, 0.15, 0.12), (0.15, 0.25, 0.7), (0.85, 0.82, 0.8), (0.9, 0.7, 0.15)]


def render_scene(
    rng: np.random.Generator,
    size: tuple[int, int] = (192, 192),
    smoothing_sigma: float = 1.2,
    ignore_patch_prob: float = 0.0,
) -> tuple[np.ndarray, LabelMap]:
    """One street scene: image (H, W, 3) in [0, 1] and its exact label map."""
    w, h = size
    label = np.full((h, w), SIDEWALK, dtype=np.int64)
    horizon = int(h * rng.uniform(0.36, 0.5))
    label[:horizon] = SKY

    # road trapezoid widening toward the bottom
    cx = w * rng.uniform(0.4, 0.6)
    top_half = w * rng.uniform(0.05, 0.1)
    bot_half = w * rng.uniform(0.28, 0.42)
    rows = np.arange(horizon, h)
    halves = top_half + (bot_half - top_half) * (rows - horizon) / max(h - horizon - 1, 1)
    cols = np.arange(w)[None, :]
    road_mask = np.abs(cols - cx) < halves[:, None]
    label[horizon:][road_mask] = ROAD

    # buildings: side rectangles standing on the horizon
    for _ in range(rng.integers(1, 4)):
        bw = int(w * rng.uniform(0.12, 0.3))
        x0 = int(rng.uniform(0, w - bw))
        y0 = int(horizon * rng.uniform(0.15, 0.75))
        label[y0:horizon, x0:x0 + bw] = BUILDING

    # vegetation blobs straddling the horizon line
    for _ in range(rng.integers(1, 3)):
        ry = int(h * rng.uniform(0.04, 0.1))
        rx = int(w * rng.uniform(0.06, 0.16))
        cy = horizon + int(rng.uniform(-0.5, 0.5) * ry)
        cxx = rng.uniform(0, w)
        yy, xx = np.ogrid[:h, :w]
        blob = ((yy - cy) / max(ry, 1)) ** 2 + ((xx - cxx) / max(rx, 1)) ** 2 <= 1.0
        blob &= label != ROAD
        label[blob] = VEGETATION

    # cars on the lower road
    car_colors = {}
    for _ in range(rng.integers(1, 4)):
        ch = int(rng.uniform(9, 18))
        cw = int(ch * rng.uniform(1.4, 2.1))
        y1 = int(rng.uniform(horizon + 0.25 * (h - horizon), h - ch))
        row_half = top_half + (bot_half - top_half) * (y1 - horizon) / max(h - horizon - 1, 1)
        x1 = int(np.clip(cx + rng.uniform(-1, 1) * max(row_half - cw, 1), 0, w - cw))
        label[y1:y1 + ch, x1:x1 + cw] = CAR
        car_colors[(y1, x1)] = _CAR_COLORS[int(rng.integers(len(_CAR_COLORS)))]

    image = np.zeros((h, w, 3), dtype=np.float64)
    jitter = rng.uniform(-0.04, 0.04, size=3)
    for cls, color in _BASE_COLORS.items():
        image[label == cls] = np.clip(np.asarray(color) + jitter, 0, 1)
    car_color = _CAR_COLORS[int(rng.integers(len(_CAR_COLORS)))]
    image[label == CAR] = np.clip(np.asarray(car_color) + jitter, 0, 1)
    # sky gradient and mild texture
    grad = np.linspace(0.06, 0.0, h)[:, None, None]
    image[:horizon] += grad[:horizon]
    image += rng.normal(0.0, 0.012, size=image.shape)
    if smoothing_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(smoothing_sigma, smoothing_sigma, 0))
    image = np.clip(image, 0.0, 1.0)

    if rng.random() < ignore_patch_prob:
        ph = int(h * rng.uniform(0.08, 0.18))
        pw = int(w * rng.uniform(0.08, 0.18))
        py = int(rng.uniform(0, h - ph))
        px = int(rng.uniform(0, w - pw))
        label[py:py + ph, px:px + pw] = IGNORE

    return image.astype(np.float32), LabelMap(label, 6)


def apply_subdomain(image: np.ndarray, subdomain: str, rng: np.random.Generator) -> np.ndarray:
    """Deterministic adverse transform: darkening / whitening + noise + blur."""
    img = np.asarray(image, dtype=np.float64)
    if subdomain == "night":
        out = img * 0.22
        out[:, :, 2] += 0.03
        out = ndimage.gaussian_filter(out, sigma=(0.6, 0.6, 0)) + rng.normal(0, 0.02, img.shape)
    elif subdomain == "foggy":
        out = img * 0.45 + 0.52
        out = ndimage.gaussian_filter(out, sigma=(1.6, 1.6, 0)) + rng.normal(0, 0.01, img.shape)
    elif subdomain == "rainy":
        streaks = rng.normal(0, 0.05, img.shape[:2])
        streaks = ndimage.gaussian_filter(streaks, sigma=(3.0, 0.4))
        out = img * 0.55 + 0.02 + streaks[:, :, None]
        out = ndimage.gaussian_filter(out, sigma=(0.7, 0.7, 0)) + rng.normal(0, 0.02, img.shape)
    elif subdomain == "snowy":
        out = img * 0.6 + 0.33
        flakes = (rng.random(img.shape[:2]) < 0.004).astype(np.float64)
        flakes = ndimage.gaussian_filter(flakes, sigma=0.7) * 2.5
        out = out + flakes[:, :, None] + rng.normal(0, 0.015, img.shape)
    else:
        raise ValueError(f"unknown subdomain {subdomain!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class SourceItem:
    stem: str
    image_path: Path
    label_path: Path


@dataclass
class TargetItem:
    stem: str
    subdomain: str
    image_path: Path
    label_path: Path | None = None  # val split only


def dataset_root(config: PipelineConfig) -> Path:
    root = Path(config.dataset.root)
    if not root.is_absolute():
        root = Path(config.output_root) / root
    return root


def ensure_dataset(config: PipelineConfig) -> Path:
    """Materialize the synthetic dataset if missing; no-op when complete."""
    root = dataset_root(config)
    marker = root / "dataset.json"
    spec = {
        "hash": config.section_hash("dataset", "classes", "prompt"),
        "kind": config.dataset.kind,
    }
    if marker.exists():
        existing = json.loads(marker.read_text())
        if existing != spec:
            raise ValueError(
                f"dataset at {root} was generated under a different configuration; "
                "remove it or point dataset.root elsewhere"
            )
        return root
    if config.dataset.kind != "synthetic":
        raise FileNotFoundError(
            f"dataset.kind={config.dataset.kind!r} expects an existing dataset at {root}"
        )

    ds = config.dataset
    subdomains = config.prompt.subdomains
    (root / "source" / "images").mkdir(parents=True, exist_ok=True)
    (root / "source" / "labels").mkdir(parents=True, exist_ok=True)
    for split in ("train", "val"):
        (root / "target" / split / "images").mkdir(parents=True, exist_ok=True)
        if split == "val":
            (root / "target" / split / "labels").mkdir(parents=True, exist_ok=True)

    for i in range(ds.num_source):
        rng = np.random.default_rng([ds.seed, 0, i])
        image, label = render_scene(rng, ds.native_size, ds.smoothing_sigma, ds.ignore_patch_prob)
        save_image(root / "source" / "images" / f"{i:04d}.png", image)
        save_label(root / "source" / "labels" / f"{i:04d}.png", label)

    for split_idx, (split, count) in enumerate((("train", ds.num_target_train), ("val", ds.num_target_val))):
        for i in range(count):
            rng = np.random.default_rng([ds.seed, 1 + split_idx, i])
            image, label = render_scene(rng, ds.native_size, ds.smoothing_sigma, 0.0)
            sub = subdomains[int(rng.integers(len(subdomains)))]
            image = apply_subdomain(image, sub, rng)
            stem = f"{i:04d}_{sub}"
            save_image(root / "target" / split / "images" / f"{stem}.png", image)
            if split == "val":
                save_label(root / "target" / split / "labels" / f"{stem}.png", label)

    marker.write_text(json.dumps(spec))
    return root


def list_source(config: PipelineConfig) -> list[SourceItem]:
    root = dataset_root(config)
    items = []
    for p in sorted((root / "source" / "images").glob("*.png")):
        items.append(SourceItem(p.stem, p, root / "source" / "labels" / p.name))
    return items


def list_target(config: PipelineConfig, split: str) -> list[TargetItem]:
    root = dataset_root(config)
    items = []
    for p in sorted((root / "target" / split / "images").glob("*.png")):
        sub = p.stem.split("_", 1)[1]
        label = root / "target" / split / "labels" / p.name
        items.append(TargetItem(p.stem, sub, p, label if label.exists() else None))
    return items
