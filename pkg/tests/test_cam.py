import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subcam.cam import (ActivationMap, cam_from_features, cam_to_mask, compute_cam, confusion_matrix, evaluate_split,
                        metrics_from_confusion, normalize_cam, segmentation_metrics)
from subcam.data import Sample
from subcam.model import init_network

from conftest import tiny_arch


def brute_force_metrics(gts, preds, num_classes):
    n = num_classes + 1
    conf = [[0] * n for _ in range(n)]
    for g, p in zip(gts, preds):
        for gv, pv in zip(np.ravel(g), np.ravel(p)):
            conf[int(gv)][int(pv)] += 1
    ious = []
    for c in range(n):
        tp = conf[c][c]
        fn = sum(conf[c]) - tp
        fp = sum(conf[r][c] for r in range(n)) - tp
        ious.append(tp / (tp + fn + fp) if tp + fn + fp else None)
    defined = [v for v in ious if v is not None]
    tp = sum(conf[c][c] for c in range(1, n))
    pred_fg = sum(conf[r][c] for r in range(n) for c in range(1, n))
    gt_fg = sum(conf[r][c] for r in range(1, n) for c in range(n))
    p = tp / pred_fg if pred_fg else 0.0
    r = tp / gt_fg if gt_fg else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return conf, ious, sum(defined) / len(defined), p, r, f


def test_constant_feature_map_gives_uniform_map():
    net = init_network(tiny_arch(), seed=0)
    fmap = np.ones((4, 4, 16))
    w = np.abs(net.params["head_p.w"].data[:1])
    norm = normalize_cam(cam_from_features(fmap, w))
    np.testing.assert_array_equal(norm, 1.0)


def test_orthogonal_weights_give_zero_map():
    fmap = np.zeros((3, 3, 2))
    fmap[..., 0] = np.arange(9).reshape(3, 3)
    norm = normalize_cam(cam_from_features(fmap, np.array([[0.0, 1.0]])))
    assert np.all(norm == 0)


def test_raw_map_is_location_wise_dot_product():
    fmap = np.array([[[1.0, 2.0], [0.0, -1.0]], [[3.0, 1.0], [2.0, 2.0]]])
    theta = np.array([[0.5, -1.0]])
    expected = np.array([[0.5 * 1 - 2, 0 + 1], [1.5 - 1, 1 - 2]])
    np.testing.assert_allclose(cam_from_features(fmap, theta)[0], expected)


def test_compute_cam_shapes_and_normalisation(rng):
    net = init_network(tiny_arch(), seed=0)
    am = compute_cam(net, rng.random((32, 32, 3)), [2, 0])
    assert am.categories == [0, 2]
    assert am.raw.shape == (2, 8, 8) and am.upsampled.shape == (2, 32, 32)
    for m in am.normalized:
        assert m.max() in (0.0, 1.0) and m.min() >= 0
    with pytest.raises(ValueError, match="unknown category"):
        compute_cam(net, np.zeros((32, 32, 3)), [3])


def test_scale_covariance(rng):
    net = init_network(tiny_arch(), seed=0)
    img = rng.random((32, 32, 3))
    a = compute_cam(net, img, [0, 1])
    net.params["head_p.w"].data *= 3.5
    b = compute_cam(net, img, [0, 1])
    np.testing.assert_allclose(b.raw, 3.5 * a.raw, rtol=1e-12)
    np.testing.assert_allclose(b.normalized, a.normalized, rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalisation_idempotent(seed):
    raw = np.random.default_rng(seed).normal(size=(2, 5, 5))
    once = normalize_cam(raw)
    np.testing.assert_allclose(normalize_cam(once), once, rtol=0, atol=1e-15)


def test_mask_half_covered():
    m = np.zeros((4, 4))
    m[:2] = 0.8
    m[2:] = 0.2
    mask = cam_to_mask({1: m}, 0.5)
    assert np.array_equal(mask[:2], np.full((2, 4), 2)) and np.all(mask[2:] == 0)


def test_overlapping_maps_pick_larger(rng):
    a, b = rng.random((6, 6)), rng.random((6, 6))
    mask = cam_to_mask({0: a, 2: b}, 0.3)
    for i, j in np.ndindex(6, 6):
        best, val = (0, a[i, j]) if a[i, j] >= b[i, j] else (2, b[i, j])
        assert mask[i, j] == (best + 1 if val >= 0.3 else 0)


def test_ties_go_to_lowest_category():
    m = np.full((2, 2), 0.7)
    assert np.all(cam_to_mask({2: m, 1: m.copy()}, 0.5) == 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_raising_threshold_never_adds_foreground(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    rng = np.random.default_rng(seed)
    maps = {0: rng.random((8, 8)), 1: rng.random((8, 8))}
    assert not np.any((cam_to_mask(maps, hi) > 0) & (cam_to_mask(maps, lo) == 0))


def test_threshold_near_one_keeps_only_peak():
    m = np.linspace(0, 1, 16).reshape(4, 4)
    mask = cam_to_mask({0: m}, 0.999)
    assert mask.sum() == 1 and mask[3, 3] == 1


def test_identical_prediction_is_perfect():
    g = np.array([[0, 1], [2, 2]])
    m = segmentation_metrics([g], [g.copy()], 2)
    assert m.miou == 1.0 and m.fscore == 1.0


def test_all_background_prediction():
    g = np.array([[0, 1], [2, 2]])
    m = segmentation_metrics([g], [np.zeros_like(g)], 2)
    assert m.iou[1] == 0 and m.iou[2] == 0 and m.fscore == 0.0


def test_absent_class_excluded_from_mean():
    g = np.array([[0, 1], [1, 0]])
    m = segmentation_metrics([g], [g], 3)
    assert np.isnan(m.iou[2]) and np.isnan(m.iou[3]) and m.miou == 1.0


def test_random_masks_match_brute_force(rng):
    gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(5)]
    preds = [rng.integers(0, 4, size=(8, 8)) for _ in range(5)]
    m = segmentation_metrics(gts, preds, 3)
    conf, ious, miou, p, r, f = brute_force_metrics(gts, preds, 3)
    assert m.confusion.tolist() == conf
    np.testing.assert_allclose(m.iou, ious, rtol=0, atol=1e-12)
    assert m.miou == pytest.approx(miou, abs=1e-12)
    assert (m.precision, m.recall, m.fscore) == pytest.approx((p, r, f), abs=1e-12)


def test_confusion_rejects_size_mismatch():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros(4), np.zeros(5), 2)


def test_evaluate_split_requires_masks(rng):
    net = init_network(tiny_arch(), seed=0)
    s = Sample("a", rng.random((32, 32, 3)), np.array([1, 0, 0]), None)
    with pytest.raises(ValueError, match="masks"):
        evaluate_split(net, [s])
    s.gt_mask = np.zeros((32, 32), dtype=int)
    s.gt_mask[:8] = 1
    m = evaluate_split(net, [s])
    assert m.confusion.sum() == 32 * 32
