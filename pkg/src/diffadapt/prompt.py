"""Enhanced prompt composition: "<subdomain>, <caption>, with <classes>."

The subdomain names the adverse condition being generated, the caption comes
from a pluggable provider, and the label guidance lists the classes present
in the conditioning label ordered by pixel count. A hashed bag-of-tokens
embedder maps the composed text to the fixed conditioning width.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conditions import IGNORE, LabelMap

CaptionProvider = Callable[[np.ndarray], str]


def canonical_caption(caption: str) -> str:
    """Strip commas (replaced by spaces) and collapse whitespace.

    Commas are reserved as prompt separators; removing them from captions
    keeps compose_prompt injective over its parts.
    """
    return " ".join(caption.replace(",", " ").split())


@dataclass
class PromptRecord:
    subdomain: str
    caption: str
    label_guidance: list[str]
    composed: str = field(init=False)

    def __post_init__(self):
        if len(set(self.label_guidance)) != len(self.label_guidance):
            raise ValueError("label guidance contains duplicates")
        self.caption = canonical_caption(self.caption)
        self.composed = compose_prompt(self.subdomain, self.caption, self.label_guidance)


def label_guidance(
    label: LabelMap,
    class_names: Sequence[str],
    min_fraction: float = 0.0,
) -> list[str]:
    """Class names present in the label, ordered by descending pixel count.

    A class is mentioned iff its fraction of non-IGNORE pixels is at least
    min_fraction (and it covers at least one pixel). Ties in count break by
    ascending class index.
    """
    if len(class_names) != label.num_classes:
        raise ValueError(f"expected {label.num_classes} class names, got {len(class_names)}")
    cls = label.classes
    valid = cls != IGNORE
    total = int(valid.sum())
    if total == 0:
        return []
    counts = np.bincount(cls[valid], minlength=label.num_classes)
    order = sorted(range(label.num_classes), key=lambda c: (-counts[c], c))
    return [class_names[c] for c in order if counts[c] > 0 and counts[c] / total >= min_fraction]


def compose_prompt(subdomain: str, caption: str, guidance_list: Sequence[str]) -> str:
    """Join the three prompt parts; empty parts and their separators are elided."""
    parts = []
    if subdomain:
        parts.append(subdomain)
    caption = canonical_caption(caption)
    if caption:
        parts.append(caption)
    if guidance_list:
        parts.append("with " + ", ".join(guidance_list))
    if not parts:
        return ""
    return ", ".join(parts) + "."


def apply_prompt_dropout(text: str, p: float, rng: np.random.Generator) -> str:
    """Return empty text with probability p, otherwise the input unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    return "" if rng.random() < p else text


class ConstantCaption:
    """Reference caption provider: a configured constant, any image."""

    def __init__(self, caption: str = "a photo of a street scene"):
        self.caption = caption

    def __call__(self, image: np.ndarray) -> str:
        return self.caption


class HashedTextEmbedder:
    """Deterministic stand-in for a text encoder.

    Tokens are hashed into a fixed bucket space (crc32, not Python's salted
    hash) and the normalized bag-of-tokens vector is projected to the
    conditioning width with a frozen Gaussian matrix. Empty text embeds to
    the zero vector, which the denoiser treats as the unconditional path.
    """

    def __init__(self, dim: int = 64, buckets: int = 512, seed: int = 0x5EED):
        self.dim = dim
        self.buckets = buckets
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((buckets, dim)) / np.sqrt(buckets)

    def encode(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            return np.zeros(self.dim, dtype=np.float32)
        counts = np.zeros(self.buckets, dtype=np.float64)
        for tok in tokens:
            counts[zlib.crc32(tok.encode()) % self.buckets] += 1.0
        counts /= np.linalg.norm(counts)
        emb = counts @ self.projection
        norm = np.linalg.norm(emb)
        if norm > 0:
            emb = emb / norm
        return emb.astype(np.float32)
