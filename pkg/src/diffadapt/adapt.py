"""Target-prior acquisition and selective supervision for refinement.

The selection rule decides which source-GT pixels supervise a generated
image: agreements always do; disagreements do only while the segmentor's
confidence stays below the threshold (presumed misclassification of an
undertrained model); confident disagreements are treated as false generation
and excluded from the loss.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .conditions import IGNORE, LabelMap, load_image, save_label

logger = logging.getLogger(__name__)


@runtime_checkable
class Segmentor(Protocol):
    trainable: bool

    def predict(self, image: np.ndarray) -> tuple[LabelMap, np.ndarray]:
        """Per-pixel argmax label and max-softmax confidence in [0, 1]."""
        ...


class ToySegmentor(nn.Module):
    """Small encoder-decoder segmentor; same interface as a full UDA model."""

    trainable = True

    def __init__(self, num_classes: int, width: int = 32, in_channels: int = 3):
        super().__init__()
        self.num_classes = num_classes
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, num_classes, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> tuple[LabelMap, np.ndarray]:
        was_training = self.training
        self.eval()
        x = torch.from_numpy(np.asarray(image, dtype=np.float32).transpose(2, 0, 1))[None]
        probs = F.softmax(self.forward(x)[0], dim=0)
        conf, cls = probs.max(dim=0)
        if was_training:
            self.train()
        return LabelMap(cls.numpy().astype(np.int64), self.num_classes), conf.numpy().astype(np.float32)


@dataclass
class PriorRecord:
    name: str
    label_path: Path
    confidence_path: Path
    provenance_path: Path


def save_confidence(path: str | Path, confidence: np.ndarray) -> None:
    """16-bit grayscale; stored value / 65535 recovers the confidence."""
    arr = np.clip(np.asarray(confidence, dtype=np.float64) * 65535.0 + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_confidence(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32)
    return arr / 65535.0


def generate_target_prior(
    dataset: Iterable[tuple[str, np.ndarray | str | Path]],
    segmentor: Segmentor,
    out_dir: str | Path,
    checkpoint_id: str,
) -> list[PriorRecord]:
    """Predict pseudo labels + confidences for target images and persist them.

    dataset yields (name, image) pairs where image may be an array or a path;
    unreadable paths are skipped with a warning. Rejects an empty result set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for name, image in dataset:
        if not isinstance(image, np.ndarray):
            try:
                image = load_image(image)
            except (OSError, ValueError) as exc:
                logger.warning("skipping unreadable target image %s: %s", name, exc)
                continue
        label, conf = segmentor.predict(image)
        rec = PriorRecord(
            name=name,
            label_path=out_dir / f"{name}.png",
            confidence_path=out_dir / f"{name}.conf.png",
            provenance_path=out_dir / f"{name}.json",
        )
        save_label(rec.label_path, label)
        save_confidence(rec.confidence_path, conf)
        rec.provenance_path.write_text(json.dumps({"segmentor_checkpoint": checkpoint_id}))
        records.append(rec)
    if not records:
        raise ValueError("target prior generation produced no records")
    return records


@dataclass
class MaskStats:
    agree: int
    low_confidence_disagree: int
    high_confidence_disagree: int
    ignored: int

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class SelectionMask:
    mask: np.ndarray  # bool (H, W); True = pixel supervises the loss
    stats: MaskStats


def build_selection_mask(
    y_s: LabelMap,
    y_pred: LabelMap,
    confidence: np.ndarray,
    lam: float,
) -> SelectionMask:
    """Per-pixel supervision decision for a generated image against source GT."""
    if y_s.classes.shape != y_pred.classes.shape or y_s.classes.shape != confidence.shape:
        raise ValueError(
            f"shape mismatch: gt {y_s.classes.shape}, pred {y_pred.classes.shape}, conf {confidence.shape}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    ignored = y_s.classes == IGNORE
    agree = ~ignored & (y_pred.classes == y_s.classes)
    disagree = ~ignored & ~agree
    low = disagree & (confidence < lam)
    high = disagree & (confidence >= lam)
    mask = agree | low
    stats = MaskStats(
        agree=int(agree.sum()),
        low_confidence_disagree=int(low.sum()),
        high_confidence_disagree=int(high.sum()),
        ignored=int(ignored.sum()),
    )
    return SelectionMask(mask=mask, stats=stats)


def masked_cross_entropy(
    logits: torch.Tensor,
    y_s: torch.Tensor | np.ndarray | LabelMap,
    mask: torch.Tensor | np.ndarray,
) -> torch.Tensor:
    """Mean -log softmax(logits)[y_s] over masked pixels; 0 for an empty mask.

    logits: (K, H, W) or (B, K, H, W); y_s and mask spatially aligned.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if isinstance(y_s, LabelMap):
        y_s = y_s.classes
    if isinstance(y_s, np.ndarray):
        y_s = torch.from_numpy(np.ascontiguousarray(y_s.astype(np.int64)))
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(np.ascontiguousarray(mask))
    if logits.ndim == 3:
        logits, y_s, mask = logits[None], y_s[None], mask[None]
    mask = mask.to(torch.bool)
    if int(mask.sum()) == 0:
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=1)
    safe = torch.where(mask, y_s.long(), torch.zeros_like(y_s, dtype=torch.long))
    picked = logp.gather(1, safe[:, None]).squeeze(1)
    return -(picked[mask]).mean()


def total_uda_loss(base_loss, s2t_loss):
    """Unweighted sum of the baseline objective and the selective s2t loss."""
    for name, value in (("base_loss", base_loss), ("s2t_loss", s2t_loss)):
        v = float(value.detach() if torch.is_tensor(value) else value)
        if not np.isfinite(v):
            raise ValueError(f"{name} is non-finite ({v})")
    return base_loss + s2t_loss


def baseline_loss(
    segmentor: nn.Module,
    source_batch: tuple[torch.Tensor, torch.Tensor],
    target_batch: torch.Tensor,
    pseudo_threshold: float = 0.9,
) -> torch.Tensor:
    """Stand-in for a full UDA objective: supervised CE on the source batch
    plus confidence-thresholded self-training CE on the target batch with
    pseudo labels computed on the fly from the current model state."""
    images, labels = source_batch
    loss = logits_cross_entropy(segmentor(images), labels)
    if target_batch is not None and target_batch.shape[0] > 0:
        t_logits = segmentor(target_batch)
        with torch.no_grad():
            probs = F.softmax(t_logits, dim=1)
            conf, pseudo = probs.max(dim=1)
            keep = conf >= pseudo_threshold
        loss = loss + masked_cross_entropy(t_logits, pseudo, keep)
    if not torch.isfinite(loss):
        raise ValueError("non-finite baseline loss")
    return loss


def logits_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """CE over non-IGNORE pixels; 0 when every pixel is IGNORE."""
    valid = labels != IGNORE
    if int(valid.sum()) == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels.long(), ignore_index=IGNORE)


def mean_iou(
    pred_labels: Iterable[np.ndarray | LabelMap],
    gt_labels: Iterable[np.ndarray | LabelMap],
    num_classes: int,
) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with nonzero union, ignoring IGNORE pixels.

    Returns (miou in [0, 1], per-class IoU with NaN for absent classes).
    """
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, gt in zip(pred_labels, gt_labels):
        p = pred.classes if isinstance(pred, LabelMap) else np.asarray(pred)
        g = gt.classes if isinstance(gt, LabelMap) else np.asarray(gt)
        valid = g != IGNORE
        idx = num_classes * g[valid].astype(np.int64) + p[valid].astype(np.int64)
        conf += np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return float(np.nanmean(iou)), iou
