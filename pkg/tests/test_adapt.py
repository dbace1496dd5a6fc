import math

import numpy as np
import pytest
import torch

from diffadapt.adapt import (
    MaskStats, ToySegmentor, baseline_loss, build_selection_mask,
    generate_target_prior, load_confidence, masked_cross_entropy, mean_iou,
    total_uda_loss,
)
from diffadapt.conditions import IGNORE, LabelMap, load_label, save_image


def lm(rows, k=6):
    return LabelMap(np.array(rows, dtype=np.int64), k)


# --- selection mask -------------------------------------------------------------

def test_selection_mask_spec_example():
    y_s = lm([[1, 2], [3, IGNORE]])
    y_pred = lm([[1, 0], [0, 0]])
    conf = np.array([[0.9, 0.9], [0.5, 0.2]], dtype=np.float32)
    sel = build_selection_mask(y_s, y_pred, conf, 0.85)
    np.testing.assert_array_equal(sel.mask, [[True, False], [True, False]])
    assert sel.stats == MaskStats(agree=1, low_confidence_disagree=1,
                                  high_confidence_disagree=1, ignored=1)


def test_selection_mask_full_agreement():
    y = lm([[0, 1], [IGNORE, 2]])
    conf = np.random.default_rng(0).random((2, 2)).astype(np.float32)
    for lam in (0.0, 0.5, 0.85, 1.0):
        sel = build_selection_mask(y, y, conf, lam)
        np.testing.assert_array_equal(sel.mask, y.classes != IGNORE)


def test_selection_mask_lambda_zero_is_agreement_only():
    rng = np.random.default_rng(1)
    y_s = LabelMap(rng.integers(0, 4, (8, 8)), 4)
    y_pred = LabelMap(rng.integers(0, 4, (8, 8)), 4)
    conf = rng.random((8, 8)).astype(np.float32)
    sel = build_selection_mask(y_s, y_pred, conf, 0.0)
    np.testing.assert_array_equal(sel.mask, y_s.classes == y_pred.classes)


def test_selection_mask_lambda_one_excludes_only_exact_confidence():
    y_s = lm([[0, 0, IGNORE]], 3)
    y_pred = lm([[1, 1, 1]], 3)
    conf = np.array([[0.999999, 1.0, 1.0]], dtype=np.float64)
    sel = build_selection_mask(y_s, y_pred, conf, 1.0)
    np.testing.assert_array_equal(sel.mask, [[True, False, False]])


def test_selection_mask_monotone_in_lambda():
    rng = np.random.default_rng(2)
    y_s = LabelMap(rng.integers(0, 4, (8, 8)), 4)
    y_pred = LabelMap(rng.integers(0, 4, (8, 8)), 4)
    conf = rng.random((8, 8)).astype(np.float32)
    prev = None
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        mask = build_selection_mask(y_s, y_pred, conf, lam).mask
        if prev is not None:
            assert (mask | prev == mask).all(), "mask must grow with lambda"
        prev = mask


def _mask_oracle(y_s, y_pred, conf, lam, num_classes):
    # independent pixel-by-pixel rule evaluation
    h, w = y_s.shape
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if y_s[i, j] == IGNORE:
                out[i, j] = False
            elif y_pred[i, j] == y_s[i, j]:
                out[i, j] = True
            else:
                out[i, j] = conf[i, j] < lam
    return out


def test_selection_mask_matches_oracle():
    rng = np.random.default_rng(3)
    for trial in range(200):
        grid = rng.integers(0, 6, (8, 8))
        grid[rng.random((8, 8)) < 0.15] = IGNORE
        y_s = LabelMap(grid, 6)
        y_pred = LabelMap(rng.integers(0, 6, (8, 8)), 6)
        conf = rng.random((8, 8))
        conf[rng.random((8, 8)) < 0.05] = 1.0
        for lam in (0.0, 0.65, 0.85, 1.0):
            sel = build_selection_mask(y_s, y_pred, conf, lam)
            np.testing.assert_array_equal(
                sel.mask, _mask_oracle(grid, y_pred.classes, conf, lam, 6))
            total = sum(sel.stats.as_dict().values())
            assert total == 64


def test_selection_mask_validation():
    with pytest.raises(ValueError):
        build_selection_mask(lm([[0]]), lm([[0, 1]]), np.zeros((1, 2)), 0.5)
    with pytest.raises(ValueError):
        build_selection_mask(lm([[0]]), lm([[0]]), np.zeros((1, 1)), 1.5)


# --- masked cross-entropy ----------------------------------------------------------

def test_masked_ce_uniform_logits():
    k = 19
    logits = torch.zeros(k, 4, 4)
    y = torch.zeros(4, 4, dtype=torch.long)
    mask = torch.ones(4, 4, dtype=torch.bool)
    loss = masked_cross_entropy(logits, y, mask)
    assert abs(float(loss) - math.log(19)) < 1e-6


def test_masked_ce_empty_mask_zero_loss_and_grad():
    logits = torch.randn(3, 2, 2, requires_grad=True)
    loss = masked_cross_entropy(logits, torch.zeros(2, 2, dtype=torch.long),
                                torch.zeros(2, 2, dtype=torch.bool))
    assert float(loss.detach()) == 0.0
    loss.backward()
    assert torch.equal(logits.grad, torch.zeros_like(logits))


def test_masked_ce_one_hot_logits():
    # logits 10 at the true class: -log softmax = log(1 + (K-1) e^-10)
    k = 19
    y = torch.arange(4).remainder(k).reshape(2, 2)
    logits = torch.zeros(k, 2, 2)
    for i in range(2):
        for j in range(2):
            logits[y[i, j], i, j] = 10.0
    expected = math.log(1.0 + (k - 1) * math.exp(-10.0))
    loss = masked_cross_entropy(logits, y, torch.ones(2, 2, dtype=torch.bool))
    assert abs(float(loss) - expected) < 1e-6


def test_masked_ce_gradient_zero_outside_mask():
    logits = torch.randn(4, 3, 3, requires_grad=True)
    mask = torch.zeros(3, 3, dtype=torch.bool)
    mask[0, 0] = True
    mask[2, 1] = True
    loss = masked_cross_entropy(logits, torch.ones(3, 3, dtype=torch.long), mask)
    loss.backward()
    outside = ~mask.expand(4, 3, 3)
    assert torch.equal(logits.grad[outside], torch.zeros_like(logits.grad[outside]))
    assert logits.grad[:, 0, 0].abs().sum() > 0


def test_masked_ce_rejects_non_finite():
    logits = torch.full((2, 2, 2), float("inf"))
    with pytest.raises(ValueError):
        masked_cross_entropy(logits, torch.zeros(2, 2, dtype=torch.long),
                             torch.ones(2, 2, dtype=torch.bool))


def test_masked_ce_accepts_numpy_and_batched():
    logits = torch.randn(2, 5, 4, 4)
    y = np.zeros((2, 4, 4), dtype=np.int64)
    mask = np.ones((2, 4, 4), dtype=bool)
    loss = masked_cross_entropy(logits, y, mask)
    assert torch.isfinite(loss)


# --- total loss ------------------------------------------------------------------------

def test_total_uda_loss():
    assert total_uda_loss(0.0, 3.0) == 3.0
    assert total_uda_loss(2.5, 0.0) == 2.5
    assert total_uda_loss(2.0, 3.0) == 5.0
    with pytest.raises(ValueError):
        total_uda_loss(float("nan"), 1.0)


# --- baseline loss -----------------------------------------------------------------------

class PerfectSegmentor(torch.nn.Module):
    """Returns huge one-hot logits for a fixed label plan."""

    def __init__(self, labels, k):
        super().__init__()
        self.labels = labels
        self.k = k
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, images):
        b = images.shape[0]
        out = torch.full((b, self.k, *self.labels.shape[-2:]), 0.0) + self.dummy
        for i in range(b):
            out[i] = out[i].scatter(0, self.labels[None].clamp(max=self.k - 1), 50.0)
        return out


def test_baseline_loss_perfect_double_is_zero():
    labels = torch.randint(0, 4, (6, 6))
    model = PerfectSegmentor(labels, 4)
    images = torch.rand(2, 3, 6, 6)
    batch_labels = labels[None].expand(2, -1, -1).clone()
    loss = baseline_loss(model, (images, batch_labels), torch.rand(2, 3, 6, 6))
    assert float(loss.detach()) < 1e-6


def test_baseline_loss_empty_target():
    labels = torch.randint(0, 4, (2, 6, 6))
    model = ToySegmentor(4, width=8)
    images = torch.rand(2, 3, 6, 6)
    with_t = baseline_loss(model, (images, labels), torch.zeros(0, 3, 6, 6))
    source_only = baseline_loss(model, (images, labels), None)
    assert torch.equal(with_t, source_only)


def test_baseline_loss_deterministic():
    torch.manual_seed(0)
    model = ToySegmentor(4, width=8)
    images = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    labels = torch.randint(0, 4, (2, 8, 8), generator=torch.Generator().manual_seed(2))
    target = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(3))
    a = baseline_loss(model, (images, labels), target)
    b = baseline_loss(model, (images, labels), target)
    assert torch.equal(a, b)


# --- target prior generation -----------------------------------------------------------

class ThresholdSegmentor:
    """Toy double that classifies by mean intensity threshold."""

    trainable = False

    def __init__(self, threshold=0.5, num_classes=6):
        self.threshold = threshold
        self.num_classes = num_classes

    def predict(self, image):
        gray = image.mean(axis=2)
        label = (gray >= self.threshold).astype(np.int64)
        conf = np.clip(np.abs(gray - self.threshold) + 0.5, 0.0, 1.0).astype(np.float32)
        return LabelMap(label, self.num_classes), conf


def test_prior_matches_analytic_threshold_map(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.random((16, 16, 3)).astype(np.float32)
    seg = ThresholdSegmentor(0.5)
    records = generate_target_prior([("img0", image)], seg, tmp_path, "ckpt-a")
    assert len(records) == 1
    stored = load_label(records[0].label_path, 6)
    expected = (image.mean(axis=2) >= 0.5).astype(np.uint8)
    np.testing.assert_array_equal(stored.classes, expected)
    conf = load_confidence(records[0].confidence_path)
    assert conf.shape == (16, 16) and conf.max() <= 1.0
    assert records[0].provenance_path.read_text().find("ckpt-a") > 0


def test_prior_rerun_is_identical(tmp_path):
    rng = np.random.default_rng(1)
    image = rng.random((8, 8, 3)).astype(np.float32)
    seg = ThresholdSegmentor()
    r1 = generate_target_prior([("x", image)], seg, tmp_path / "a", "c")
    r2 = generate_target_prior([("x", image)], seg, tmp_path / "b", "c")
    assert r1[0].label_path.read_bytes() == r2[0].label_path.read_bytes()
    assert r1[0].confidence_path.read_bytes() == r2[0].confidence_path.read_bytes()


def test_prior_skips_unreadable_and_rejects_empty(tmp_path, caplog):
    seg = ThresholdSegmentor()
    good = np.random.default_rng(2).random((8, 8, 3)).astype(np.float32)
    img_path = tmp_path / "ok.png"
    save_image(img_path, good)
    records = generate_target_prior(
        [("bad", tmp_path / "missing.png"), ("ok", img_path)], seg, tmp_path / "out", "c")
    assert [r.name for r in records] == ["ok"]
    with pytest.raises(ValueError):
        generate_target_prior([("bad", tmp_path / "missing.png")], seg, tmp_path / "out2", "c")


# --- mIoU --------------------------------------------------------------------------------

def test_mean_iou_perfect():
    rng = np.random.default_rng(4)
    gt = rng.integers(0, 4, (10, 10))
    miou, per_class = mean_iou([gt], [gt], 4)
    assert miou == 1.0


def test_mean_iou_hand_example():
    gt = np.array([[0, 0], [1, IGNORE]])
    pred = np.array([[0, 1], [1, 1]])
    miou, per_class = mean_iou([pred], [gt], 3)
    # class 0: inter 1, union 2 -> 0.5 ; class 1: inter 1, union 2 -> 0.5 ; class 2 absent
    assert abs(per_class[0] - 0.5) < 1e-12
    assert abs(per_class[1] - 0.5) < 1e-12
    assert np.isnan(per_class[2])
    assert abs(miou - 0.5) < 1e-12
