"""Spatial input conditions: one-hot semantic maps, sketch extraction,
label fusion, resolution checks and multi-scale training batches.

Conventions: images are float32 arrays (H, W, 3) in [0, 1], sketches are
float32 (H, W) in [0, 1], labels are integer (H, W) with IGNORE = 255.
Everything here is a pure function of its inputs plus an explicit rng.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
from PIL import Image

IGNORE = 255

# Reference sketch extractor constants: Sobel magnitude for a full-contrast
# step edge is 4*sqrt(2) with the unnormalized 3x3 kernels.
SKETCH_SOFT_SCALE = 2.0
SKETCH_FLOOR = 0.1

_SOBEL_X = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


class FrameTooSmallError(ValueError):
    """Source frame is smaller than the requested crop size."""


@dataclass
class LabelMap:
    """Per-pixel class indices in [0, num_classes) with IGNORE allowed."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label map must be integer-typed, got {arr.dtype}")
        if not (2 <= self.num_classes <= IGNORE):
            raise ValueError(f"num_classes must be in [2, {IGNORE}], got {self.num_classes}")
        valid = (arr == IGNORE) | ((arr >= 0) & (arr < self.num_classes))
        if not valid.all():
            bad = np.unique(arr[~valid])
            raise ValueError(f"label values {bad.tolist()} outside [0, {self.num_classes}) and not IGNORE")
        self.classes = arr.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]


@dataclass
class View:
    """One training view: image, its label and derived conditions, aligned."""

    image: np.ndarray       # (H, W, 3) float32
    label: LabelMap
    one_hot: np.ndarray     # (K, H, W) float32
    sketch: np.ndarray      # (H, W) float32


@dataclass
class MultiScaleBatch:
    """Reduced full-frame view plus a native-scale crop, same resolution."""

    global_view: View
    local_view: View
    crop_offset: tuple[int, int]  # (x, y) in native pixels


@dataclass
class ResolutionCheck:
    ok: bool
    reason: str = ""


def one_hot_encode(label: LabelMap, num_classes: int | None = None) -> np.ndarray:
    """Encode a label map into K channels; IGNORE pixels become all-zero.

    Returns a float32 array of shape (K, H, W).
    """
    k = label.num_classes if num_classes is None else num_classes
    cls = label.classes
    if ((cls != IGNORE) & (cls >= k)).any():
        raise ValueError(f"label contains class indices >= {k}")
    out = np.zeros((k, cls.shape[0], cls.shape[1]), dtype=np.float32)
    for c in range(k):
        out[c] = cls == c
    return out


def argmax_label(one_hot: np.ndarray, num_classes: int | None = None) -> LabelMap:
    """Inverse of one_hot_encode on non-IGNORE pixels; all-zero pixels map to IGNORE."""
    k = one_hot.shape[0] if num_classes is None else num_classes
    cls = one_hot.argmax(axis=0).astype(np.int64)
    cls[one_hot.sum(axis=0) == 0] = IGNORE
    return LabelMap(cls, k)


def extract_sketch(
    image: np.ndarray,
    soft_scale: float = SKETCH_SOFT_SCALE,
    floor: float = SKETCH_FLOOR,
) -> np.ndarray:
    """Domain-agnostic structure map: normalized Sobel gradient magnitude.

    The magnitude is soft-thresholded (floor subtracted, tanh squashed) so
    weak texture gradients are suppressed while real edges saturate near 1.
    Deterministic; a constant image yields an all-zero sketch.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    if img.ndim == 3:
        gray = img.mean(axis=2)
    elif img.ndim == 2:
        gray = img
    else:
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {img.shape}")
    padded = np.pad(gray, 1, mode="edge")
    gx = _correlate3(padded, _SOBEL_X)
    gy = _correlate3(padded, _SOBEL_Y)
    mag = np.hypot(gx, gy)
    sketch = np.tanh(np.maximum(mag - floor, 0.0) / soft_scale)
    return sketch.astype(np.float32)


def _correlate3(padded: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx] != 0:
                out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


SketchExtractor = Callable[[np.ndarray], np.ndarray]


def fuse_labels(gt: LabelMap, predicted: LabelMap) -> LabelMap:
    """Fill the ground truth's IGNORE regions with predicted classes."""
    if gt.classes.shape != predicted.classes.shape:
        raise ValueError(f"shape mismatch: {gt.classes.shape} vs {predicted.classes.shape}")
    if gt.num_classes != predicted.num_classes:
        raise ValueError(f"class count mismatch: {gt.num_classes} vs {predicted.num_classes}")
    fused = np.where(gt.classes == IGNORE, predicted.classes, gt.classes)
    return LabelMap(fused, gt.num_classes)


def validate_resolution(
    width: int,
    height: int,
    native_aspect: float | tuple[int, int],
    multiple: int = 64,
    aspect_tol: float = 0.02,
) -> ResolutionCheck:
    """Accept a training resolution iff both sides are multiples of 64 and
    the aspect ratio matches the native frames within a relative tolerance."""
    if width <= 0 or height <= 0:
        return ResolutionCheck(False, f"non-positive resolution {width}x{height}")
    if isinstance(native_aspect, tuple):
        native_aspect = native_aspect[0] / native_aspect[1]
    if width % multiple != 0 or height % multiple != 0:
        return ResolutionCheck(False, f"{width}x{height} is not a multiple of {multiple}")
    aspect = width / height
    if abs(aspect - native_aspect) / native_aspect > aspect_tol:
        return ResolutionCheck(
            False, f"aspect {aspect:.4f} differs from native {native_aspect:.4f} by more than {aspect_tol:.0%}"
        )
    return ResolutionCheck(True)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Averaging (area) resize for images and sketches; size is (w, h)."""
    out = cv2.resize(np.asarray(image, dtype=np.float32), size, interpolation=cv2.INTER_AREA)
    return out


def resize_label(label: LabelMap, size: tuple[int, int]) -> LabelMap:
    """Nearest-neighbor resize; class indices are categorical."""
    out = cv2.resize(label.classes, size, interpolation=cv2.INTER_NEAREST)
    return LabelMap(out, label.num_classes)


def build_multiscale_batch(
    image: np.ndarray,
    label: LabelMap,
    sketch: np.ndarray,
    train_res: tuple[int, int],
    rng: np.random.Generator,
    aspect_tol: float = 0.02,
    sketch_extractor: SketchExtractor | None = None,
) -> MultiScaleBatch:
    """Build a (global resized view, local native crop) pair at train_res.

    train_res is (w, h). The crop offset is drawn uniformly over valid
    positions from rng; all three modalities are cropped pixel-aligned.
    """
    h, w = image.shape[:2]
    tw, th = train_res
    if label.classes.shape != (h, w) or sketch.shape != (h, w):
        raise ValueError("image, label and sketch must share a spatial size")
    check = validate_resolution(tw, th, w / h, aspect_tol=aspect_tol)
    if not check.ok:
        raise ValueError(f"invalid training resolution: {check.reason}")
    if h < th or w < tw:
        raise FrameTooSmallError(f"frame {w}x{h} smaller than crop {tw}x{th}")

    g_image = resize_image(image, train_res)
    g_label = resize_label(label, train_res)
    g_sketch = resize_image(sketch, train_res)

    x0 = int(rng.integers(0, w - tw + 1))
    y0 = int(rng.integers(0, h - th + 1))
    l_image = image[y0:y0 + th, x0:x0 + tw].astype(np.float32)
    l_label = LabelMap(label.classes[y0:y0 + th, x0:x0 + tw], label.num_classes)
    l_sketch = sketch[y0:y0 + th, x0:x0 + tw].astype(np.float32)

    def _view(img, lab, sk):
        return View(image=img, label=lab, one_hot=one_hot_encode(lab), sketch=sk)

    return MultiScaleBatch(
        global_view=_view(g_image, g_label, g_sketch),
        local_view=_view(l_image, l_label, l_sketch),
        crop_offset=(x0, y0),
    )


# --- file conventions -------------------------------------------------------
# labels: single-channel 8-bit indexed PNG, IGNORE = 255
# images: 8-bit RGB PNG, mapped to [0, 1] floats on load
# sketches: single-channel 8-bit PNG

def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_label(path: str | Path, num_classes: int) -> LabelMap:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    return LabelMap(arr, num_classes)


def save_label(path: str | Path, label: LabelMap) -> None:
    Image.fromarray(label.classes, mode="L").save(path)


def load_sketch(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return arr / 255.0


def save_sketch(path: str | Path, sketch: np.ndarray) -> None:
    arr = np.clip(np.asarray(sketch, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
