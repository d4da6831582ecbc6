"""Smoke tests for the python bindings."""

import json
import math
import os
import tempfile

import numpy as np
import pytest

import cosam


def test_dice_iou_pinned_values():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    assert cosam.dice(a, b) == 1.0
    assert cosam.iou(a, b) == 1.0

    a[0:2, 0:2] = 1
    b[1:3, 0:2] = 1
    assert math.isclose(cosam.dice(a, b), 0.5, abs_tol=1e-12)
    assert math.isclose(cosam.iou(a, b), 1.0 / 3.0, abs_tol=1e-12)


def test_truncate_and_normalize_window():
    vol = np.array([[[-100.0, 0.0, 100.0, 250.0]]], dtype=np.float32)
    out = cosam.truncate_and_normalize(vol)
    assert out.shape == vol.shape
    np.testing.assert_allclose(out[0, 0], [0.0, 0.5, 1.0, 1.0])


def test_boxes_from_mask_round_trip():
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[2:5, 5:8] = 1
    boxes = cosam.boxes_from_mask(mask)
    assert boxes == [(5.0, 2.0, 8.0, 5.0)]


def test_phantom_is_deterministic_and_normalized():
    cfg = json.dumps({"seed": 3, "n_targets_range": [2, 2]})
    img1, lbl1 = cosam.generate_phantom(cfg)
    img2, lbl2 = cosam.generate_phantom(cfg)
    np.testing.assert_array_equal(img1, img2)
    np.testing.assert_array_equal(lbl1, lbl2)
    assert img1.min() >= 0.0 and img1.max() <= 1.0
    assert lbl1.sum() > 0


def test_dataset_round_trip_through_load_volume():
    with tempfile.TemporaryDirectory() as tmp:
        manifest = cosam.generate_dataset(os.path.join(tmp, "data"), 3, json.dumps({"seed": 1}))
        assert os.path.exists(manifest)
        vol = cosam.load_volume(os.path.join(tmp, "data", "vol_0000"))
        assert vol["image"].ndim == 3
        assert vol["normalized"]
        lo, hi = vol["roi_slab"]
        assert 0 <= lo < hi <= vol["image"].shape[0]


def test_split_dataset_partition():
    ids = [f"v{i}" for i in range(269)]
    train, test = cosam.split_dataset(ids, 214.0 / 269.0, 7)
    assert len(train) == 214 and len(test) == 55
    assert not set(train) & set(test)


def test_ap50_hand_case():
    gts = [("v", 0, (10.0, 10.0, 20.0, 20.0))]
    tp_then_fp = [
        ("v", 0, (10.0, 10.0, 20.0, 20.0), 0.9),
        ("v", 0, (40.0, 40.0, 50.0, 50.0), 0.8),
    ]
    assert math.isclose(cosam.ap50(tp_then_fp, gts), 1.0, abs_tol=1e-12)
    fp_then_tp = [
        ("v", 0, (40.0, 40.0, 50.0, 50.0), 0.9),
        ("v", 0, (10.0, 10.0, 20.0, 20.0), 0.8),
    ]
    assert math.isclose(cosam.ap50(fp_then_tp, gts), 0.5, abs_tol=1e-12)


def test_model_forward_shapes():
    model = cosam.Cosam.from_config(json.dumps({"window_size": 5}), seed=11)
    assert model.window_size == 5

    img, _ = cosam.generate_phantom(json.dumps({"seed": 2}))
    window, pad = cosam.extract_window(img, img.shape[0] // 2, 5)
    assert window.shape == (5, img.shape[1], img.shape[2])
    assert pad == [False] * 5

    mask, detections = model.predict_window(window, emit_floor=0.05)
    assert mask.shape == (img.shape[1], img.shape[2])
    assert set(np.unique(mask)).issubset({0, 1})
    for (box, score) in detections:
        x1, y1, x2, y2 = box
        assert x1 < x2 and y1 < y2
        assert 0.0 <= score <= 1.0
