import math

import numpy as np
import pytest

from clinmtl import metrics as MT


def oracle_boundary(mask):
    """Foreground pixels with any 8-neighbour outside the mask (or off-image)."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == dx == 0:
                        continue
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                        out[y, x] = True
    return out


def oracle_hd95(pred, ref):
    """Independent oracle: explicit loops over boundary pixel pairs."""
    pred = pred.astype(bool)
    ref = ref.astype(bool)
    if not pred.any() and not ref.any():
        return 0.0
    if pred.any() != ref.any():
        return float(math.hypot(*pred.shape))
    pa = [tuple(p) for p in np.argwhere(oracle_boundary(pred))]
    pb = [tuple(p) for p in np.argwhere(oracle_boundary(ref))]
    directed = []
    for a in pa:
        directed.append(min(math.dist(a, b) for b in pb))
    for b in pb:
        directed.append(min(math.dist(b, a) for a in pa))
    return float(np.percentile(directed, 95, method="linear"))


class TestHd95:
    def test_matches_oracle_on_random_shapes(self):
        rng = np.random.default_rng(17)
        done = 0
        while done < 20:
            pred = rng.uniform(size=(12, 12)) < 0.4
            ref = rng.uniform(size=(12, 12)) < 0.4
            assert abs(MT.hd95(pred, ref) - oracle_hd95(pred, ref)) <= 1e-9
            done += 1

    def test_two_pixel_distance_five(self):
        pred = np.zeros((16, 16), bool)
        ref = np.zeros((16, 16), bool)
        pred[5, 5] = True
        ref[8, 9] = True  # offset (3, 4) -> distance exactly 5
        assert MT.hd95(pred, ref) == 5.0

    def test_identical_masks_zero(self):
        rng = np.random.default_rng(1)
        m = rng.uniform(size=(10, 10)) < 0.5
        assert MT.hd95(m, m) == 0.0

    def test_empty_cases(self):
        empty = np.zeros((10, 12), bool)
        full = np.ones((10, 12), bool)
        assert MT.hd95(empty, empty) == 0.0
        assert MT.hd95(empty, full) == pytest.approx(math.hypot(10, 12))
        assert MT.hd95(full, empty) == pytest.approx(math.hypot(10, 12))

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(14, 14)) < 0.3
        b = rng.uniform(size=(14, 14)) < 0.3
        assert MT.hd95(a, b) == MT.hd95(b, a)


class TestOverlapMetrics:
    def test_dice_iou_relationship(self):
        # dice = 2*iou / (1 + iou) for any pair of masks
        rng = np.random.default_rng(9)
        for _ in range(20):
            a = rng.uniform(size=(8, 8)) < 0.5
            b = rng.uniform(size=(8, 8)) < 0.5
            d = MT.dice_binary(a, b)
            j = MT.iou_binary(a, b)
            assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)

    def test_both_empty_is_one(self):
        empty = np.zeros((4, 4), bool)
        assert MT.dice_binary(empty, empty) == 1.0
        assert MT.iou_binary(empty, empty) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert MT.dice_binary(a, b) == 0.0
        assert MT.iou_binary(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, :2] = True
        b[0, 1:3] = True
        assert MT.dice_binary(a, b) == 0.5
        assert MT.iou_binary(a, b) == pytest.approx(1 / 3)


class TestPrecisionRecallF1:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 3, 4, 0, 1])
        out = MT.precision_recall_f1(labels, labels, 5)
        assert out["f1_macro"] == 1.0
        assert out["per_class"]["precision"] == [1.0] * 5

    def test_constant_predictor_macro_f1(self):
        # all predictions = class 3; per-class F1 nonzero only for class 3
        labels = np.array([3] * 6 + [0, 1, 2, 4])
        preds = np.full(10, 3)
        out = MT.precision_recall_f1(labels, preds, 5)
        p3 = 6 / 10
        f3 = 2 * p3 * 1.0 / (p3 + 1.0)
        assert out["f1_macro"] == pytest.approx(f3 / 5, abs=1e-12)
        assert out["per_class"]["recall"][3] == 1.0

    def test_absent_class_zero_division(self):
        labels = np.array([0, 0, 1])
        preds = np.array([0, 1, 1])
        out = MT.precision_recall_f1(labels, preds, 5)
        for c in (2, 3, 4):
            assert out["per_class"]["f1"][c] == 0.0

    def test_against_confusion_matrix_oracle(self):
        rng = np.random.default_rng(23)
        labels = rng.integers(0, 5, size=200)
        preds = rng.integers(0, 5, size=200)
        out = MT.precision_recall_f1(labels, preds, 5)
        cm = np.zeros((5, 5), dtype=int)
        for t, p in zip(labels, preds):
            cm[t, p] += 1
        for c in range(5):
            tp = cm[c, c]
            p = tp / cm[:, c].sum() if cm[:, c].sum() else 0.0
            r = tp / cm[c, :].sum() if cm[c, :].sum() else 0.0
            assert out["per_class"]["precision"][c] == pytest.approx(p, abs=1e-12)
            assert out["per_class"]["recall"][c] == pytest.approx(r, abs=1e-12)
