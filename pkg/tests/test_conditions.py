import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffadapt.conditions import (
    IGNORE, FrameTooSmallError, LabelMap, argmax_label, build_multiscale_batch,
    extract_sketch, fuse_labels, one_hot_encode, validate_resolution,
)


def lm(rows, k):
    return LabelMap(np.array(rows, dtype=np.int64), k)


# --- one-hot encoding --------------------------------------------------------

def test_one_hot_basic():
    out = one_hot_encode(lm([[0, 1]], 2))
    assert out.shape == (2, 1, 2)
    np.testing.assert_array_equal(out[0], [[1, 0]])
    np.testing.assert_array_equal(out[1], [[0, 1]])


def test_one_hot_ignore_is_all_zero():
    out = one_hot_encode(lm([[IGNORE]], 3))
    np.testing.assert_array_equal(out, np.zeros((3, 1, 1)))


def test_one_hot_channel_sums():
    # per-pixel enumeration: class 0 once, class 1 never, class 2 twice, one ignore
    out = one_hot_encode(lm([[0, 2], [2, IGNORE]], 3))
    assert out.sum(axis=(1, 2)).tolist() == [1.0, 0.0, 2.0]
    assert out[:, 1, 1].tolist() == [0.0, 0.0, 0.0]


def test_one_hot_rejects_class_out_of_range():
    label = lm([[0, 3]], 4)
    with pytest.raises(ValueError):
        one_hot_encode(label, 3)


@given(hnp.arrays(np.int64, (5, 7), elements=st.sampled_from([0, 1, 2, 3, IGNORE])))
@settings(max_examples=30, deadline=None)
def test_one_hot_argmax_round_trip(grid):
    label = LabelMap(grid, 4)
    recovered = argmax_label(one_hot_encode(label))
    keep = grid != IGNORE
    np.testing.assert_array_equal(recovered.classes[keep], grid[keep].astype(np.uint8))


def test_label_map_validation():
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 9]]), 4)
    with pytest.raises(ValueError):
        LabelMap(np.zeros((2, 2), dtype=np.float32), 4)
    with pytest.raises(ValueError):
        LabelMap(np.zeros((2, 2, 2), dtype=np.int64), 4)


# --- sketch extraction --------------------------------------------------------

def test_sketch_constant_image_is_zero():
    img = np.full((6, 6, 3), 0.37, dtype=np.float32)
    np.testing.assert_array_equal(extract_sketch(img), np.zeros((6, 6), dtype=np.float32))


def _sketch_oracle(gray, soft_scale=2.0, floor=0.1):
    # literal re-derivation: pad-edge, 3x3 correlation, soft threshold
    kx = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64)
    h, w = gray.shape
    padded = np.pad(gray.astype(np.float64), 1, mode="edge")
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            patch = padded[y:y + 3, x:x + 3]
            gx[y, x] = (patch * kx).sum()
            gy[y, x] = (patch * kx.T).sum()
    mag = np.hypot(gx, gy)
    return np.tanh(np.maximum(mag - floor, 0.0) / soft_scale)


def test_sketch_step_edge_peaks_at_boundary():
    # vertical step between columns 1 and 2 of a 4x4 image
    gray = np.zeros((4, 4), dtype=np.float64)
    gray[:, 2:] = 1.0
    sketch = extract_sketch(gray)
    expected = _sketch_oracle(gray)
    np.testing.assert_allclose(sketch, expected, atol=1e-6)
    per_column = sketch.mean(axis=0)
    assert set(np.flatnonzero(per_column == per_column.max())) == {1, 2}
    assert per_column[0] < per_column.max()


def test_sketch_range_closure():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16, 3), dtype=np.float32)
    once = extract_sketch(img)
    twice = extract_sketch(once)
    for s in (once, twice):
        assert s.min() >= 0.0 and s.max() <= 1.0


def test_sketch_rejects_empty():
    with pytest.raises(ValueError):
        extract_sketch(np.zeros((0, 4)))


# --- label fusion --------------------------------------------------------------

def test_fuse_all_ignore_returns_prediction():
    gt = lm([[IGNORE, IGNORE]], 4)
    pred = lm([[2, 3]], 4)
    np.testing.assert_array_equal(fuse_labels(gt, pred).classes, [[2, 3]])


def test_fuse_no_ignore_returns_gt():
    gt = lm([[1, 0]], 4)
    pred = lm([[2, 3]], 4)
    np.testing.assert_array_equal(fuse_labels(gt, pred).classes, [[1, 0]])


def test_fuse_per_pixel_rule():
    fused = fuse_labels(lm([[1, IGNORE]], 4), lm([[2, 3]], 4))
    np.testing.assert_array_equal(fused.classes, [[1, 3]])


def test_fuse_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_labels(lm([[1]], 4), lm([[1, 2]], 4))


@given(
    hnp.arrays(np.int64, (4, 4), elements=st.sampled_from([0, 1, 2, IGNORE])),
    hnp.arrays(np.int64, (4, 4), elements=st.sampled_from([0, 1, 2])),
)
@settings(max_examples=30, deadline=None)
def test_fuse_idempotent(gt_grid, pred_grid):
    gt, pred = LabelMap(gt_grid, 3), LabelMap(pred_grid, 3)
    once = fuse_labels(gt, pred)
    twice = fuse_labels(once, pred)
    np.testing.assert_array_equal(once.classes, twice.classes)


# --- resolution validation ------------------------------------------------------

def test_resolution_paper_configuration_accepted():
    assert validate_resolution(1344, 768, (16, 9)).ok


def test_resolution_rejects_non_multiple():
    check = validate_resolution(1000, 768, (16, 9))
    assert not check.ok and "multiple" in check.reason


def test_resolution_rejects_aspect_mismatch():
    # 1280/768 = 5:3, far from 16:9
    check = validate_resolution(1280, 768, (16, 9))
    assert not check.ok and "aspect" in check.reason


# --- multi-scale batches ----------------------------------------------------------

def _frame(h, w, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.random((h, w, 3), dtype=np.float32)
    label = LabelMap(rng.integers(0, 4, size=(h, w)), 4)
    sketch = rng.random((h, w), dtype=np.float32)
    return image, label, sketch


def test_multiscale_degenerate_crop():
    image, label, sketch = _frame(128, 128)
    batch = build_multiscale_batch(image, label, sketch, (128, 128), np.random.default_rng(0))
    assert batch.crop_offset == (0, 0)
    np.testing.assert_array_equal(batch.global_view.label.classes, batch.local_view.label.classes)
    np.testing.assert_allclose(batch.global_view.image, batch.local_view.image, atol=1e-6)


def test_multiscale_paper_resolution():
    image, label, sketch = _frame(1080, 1920, seed=1)
    batch = build_multiscale_batch(image, label, sketch, (1344, 768), np.random.default_rng(0))
    for view in (batch.global_view, batch.local_view):
        assert view.image.shape == (768, 1344, 3)
        assert view.label.classes.shape == (768, 1344)
        assert view.one_hot.shape == (4, 768, 1344)
        assert view.sketch.shape == (768, 1344)


def test_multiscale_deterministic_offsets():
    image, label, sketch = _frame(192, 192, seed=2)
    b1 = build_multiscale_batch(image, label, sketch, (128, 128), np.random.default_rng(7))
    b2 = build_multiscale_batch(image, label, sketch, (128, 128), np.random.default_rng(7))
    assert b1.crop_offset == b2.crop_offset
    np.testing.assert_array_equal(b1.local_view.image, b2.local_view.image)


def test_multiscale_local_view_alignment():
    image, label, sketch = _frame(192, 192, seed=3)
    batch = build_multiscale_batch(image, label, sketch, (128, 128), np.random.default_rng(5))
    x0, y0 = batch.crop_offset
    np.testing.assert_array_equal(
        batch.local_view.label.classes, label.classes[y0:y0 + 128, x0:x0 + 128])
    np.testing.assert_array_equal(
        batch.local_view.image, image[y0:y0 + 128, x0:x0 + 128])


def test_multiscale_rejects_small_frame():
    image, label, sketch = _frame(96, 96)
    with pytest.raises(FrameTooSmallError):
        build_multiscale_batch(image, label, sketch, (128, 128), np.random.default_rng(0))
