import numpy as np
import pytest
import metrics
from metrics import CiwTable, ConfusionMatrix, compute_report
from errors import ConfigurationError, DataError, UndefinedMetricError

GT = np.array([[0, 0], [1, 1]])
PRED = np.array([[0, 1], [1, 1]])


@pytest.fixture
def example():
    return ConfusionMatrix(2).accumulate(PRED, GT)


def bruteIou(pred, gt, k):
    union = np.logical_or(pred == k, gt == k).sum()
    return None if union == 0 else np.logical_and(pred == k, gt == k).sum() / union


def bruteScores(pred, gt, k, ciw):
    present = [c for c in range(k) if ((pred == c) | (gt == c)).any()]
    inGt = [c for c in range(k) if (gt == c).any()]
    iou = {c: bruteIou(pred, gt, c) for c in present}
    f1 = {c: 2 * ((pred == c) & (gt == c)).sum() / ((pred == c).sum() + (gt == c).sum()) for c in present}
    recall = {c: ((pred == c) & (gt == c)).sum() / (gt == c).sum() for c in inGt}
    n = float(gt.size)
    p = np.array([(pred == c).sum() for c in range(k)], dtype=float)
    t = np.array([(gt == c).sum() for c in range(k)], dtype=float)
    weights = {c: ciw[c] * t[c] / n for c in inGt if c > 0}
    return {
        'iou_with_bg': np.mean([iou[c] for c in present]),
        'iou_without_bg': np.mean([iou[c] for c in present if c > 0]),
        'fwiou': sum(w * iou[c] for c, w in weights.items()) / sum(weights.values()),
        'f1': np.mean([f1[c] for c in present]),
        'balanced_accuracy': np.mean([recall[c] for c in inGt]),
        'mcc': ((pred == gt).sum() * n - (p * t).sum()) / np.sqrt((n * n - (p * p).sum()) * (n * n - (t * t).sum())),
    }


def test_two_by_two_counts(example):
    np.testing.assert_array_equal(example.counts, [[1, 1], [0, 2]])
    assert example.total == 4


def test_perfect_prediction_is_diagonal(rng):
    mask = rng.integers(0, 5, (6, 6))
    cm = ConfusionMatrix(5).accumulate(mask, mask)
    assert cm.counts.sum() == np.trace(cm.counts) == 36


def test_accumulation_order_does_not_matter(rng):
    a = [rng.integers(0, 4, (5, 5)) for _ in range(4)]
    one = ConfusionMatrix(4).accumulate(a[0], a[1]).accumulate(a[2], a[3])
    two = ConfusionMatrix(4).accumulate(a[2], a[3]).accumulate(a[0], a[1])
    np.testing.assert_array_equal(one.counts, two.counts)
    np.testing.assert_array_equal(one.counts, ConfusionMatrix(4).accumulate(a[0], a[1]).merge(
        ConfusionMatrix(4).accumulate(a[2], a[3])).counts)


def test_accumulate_rejects_bad_input():
    with pytest.raises(DataError, match='shape'):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(DataError, match=r'pixel \(1, 0\)'):
        ConfusionMatrix(2).accumulate(np.array([[0, 1], [2, 0]]), GT)


def test_iou_example(example):
    assert metrics.iou_per_class(example) == pytest.approx([0.5, 2 / 3])


def test_iou_absent_class_is_none():
    cm = ConfusionMatrix(3).accumulate(PRED, GT)
    assert metrics.iou_per_class(cm)[2] is None
    assert metrics.mean_iou(cm) == pytest.approx((0.5 + 2 / 3) / 2)


def test_mean_iou_example(example):
    assert metrics.mean_iou(example) == pytest.approx(0.5833, abs=1e-4)
    assert metrics.mean_iou(example, includeBackground=False) == pytest.approx(0.6667, abs=1e-4)


def test_perfect_prediction_metrics(rng):
    mask = rng.integers(0, 3, (8, 8))
    cm = ConfusionMatrix(3).accumulate(mask, mask)
    assert metrics.mean_iou(cm) == metrics.mean_iou(cm, False) == 1.0
    assert metrics.f1_macro(cm) == metrics.balanced_accuracy(cm) == 1.0
    assert metrics.mcc(cm) == pytest.approx(1.0)


def test_fwiou_single_defect_class_equals_its_iou(example):
    for weight in (0.2, 1.0):
        assert metrics.fwiou_ciw(example, CiwTable(['Background', 'Crack'], [0.0, weight])) == pytest.approx(2 / 3)


def test_fwiou_weighted_example():
    # Equal ground-truth frequency, IoU 0.5 for Cracks and 1.0 for Water Level
    cm = ConfusionMatrix(3, np.array([[1, 0, 0], [1, 1, 0], [0, 0, 2]]))
    assert metrics.iou_per_class(cm)[1:] == pytest.approx([0.5, 1.0])
    ciw = CiwTable.resolve(['Background', 'Cracks', 'Water Level'])
    assert metrics.fwiou_ciw(cm, ciw) == pytest.approx(0.5150, abs=1e-4)


def test_fwiou_zero_weight_contributes_nothing():
    cm = ConfusionMatrix(3, np.array([[1, 0, 0], [1, 1, 0], [0, 0, 2]]))
    assert metrics.fwiou_ciw(cm, CiwTable(['Background', 'A', 'B'], [0.0, 1.0, 0.0])) == pytest.approx(0.5)


def test_fwiou_undefined_without_defects():
    cm = ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 2), int))
    with pytest.raises(UndefinedMetricError):
        metrics.fwiou_ciw(cm, CiwTable(['Background', 'Crack'], [0.0, 1.0]))
    with pytest.raises(ConfigurationError):
        metrics.fwiou_ciw(cm, CiwTable(['Background'], [0.0]))


def test_f1_example_and_identity(example, rng):
    assert metrics.f1_per_class(example) == pytest.approx([2 / 3, 4 / 5])
    assert metrics.f1_macro(example) == pytest.approx(0.7333, abs=1e-4)
    cm = ConfusionMatrix(4).accumulate(rng.integers(0, 4, (9, 9)), rng.integers(0, 4, (9, 9)))
    for iou, f1 in zip(metrics.iou_per_class(cm), metrics.f1_per_class(cm)):
        if iou is None:
            continue
        assert f1 == pytest.approx(2 * iou / (1 + iou))


def test_balanced_accuracy(example):
    assert metrics.balanced_accuracy(example) == pytest.approx(0.75)
    gt = np.repeat(np.arange(4), 4).reshape(4, 4)
    collapsed = ConfusionMatrix(4).accumulate(np.zeros((4, 4), int), gt)
    assert metrics.balanced_accuracy(collapsed) == pytest.approx(0.25)


def test_mcc_example(example):
    assert metrics.mcc(example) == pytest.approx(4 / np.sqrt(48))


def test_mcc_degenerate_is_zero_with_warning():
    cm = ConfusionMatrix(2).accumulate(np.ones((2, 2), int), GT)
    assert metrics.mccDegenerate(cm)
    with pytest.warns(UserWarning, match='degenerate'):
        assert metrics.mcc(cm) == 0.0


def test_pixel_accuracy(example):
    assert metrics.pixel_accuracy(example) == pytest.approx(0.75)
    with pytest.raises(UndefinedMetricError):
        metrics.pixel_accuracy(ConfusionMatrix(2))


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(7)
    ciw = CiwTable([f'class{k}' for k in range(10)], [0.0] + list(np.linspace(0.1, 1.0, 9)))
    for _ in range(200):
        gt = rng.integers(0, 10, (8, 8))
        pred = np.where(rng.uniform(size=(8, 8)) < 0.5, gt, rng.integers(0, 10, (8, 8)))
        cm = ConfusionMatrix(10).accumulate(pred, gt)
        assert cm.total == 64
        iou = metrics.iou_per_class(cm)
        for k in range(10):
            expected = bruteIou(pred, gt, k)
            if expected is None:
                assert iou[k] is None
            else:
                assert iou[k] == pytest.approx(expected)
        assert metrics.pixel_accuracy(cm) == pytest.approx((pred == gt).mean(), abs=1e-9)
        expected = bruteScores(pred, gt, 10, ciw.weights)
        assert metrics.mean_iou(cm) == pytest.approx(expected['iou_with_bg'], abs=1e-9)
        assert metrics.mean_iou(cm, False) == pytest.approx(expected['iou_without_bg'], abs=1e-9)
        assert metrics.fwiou_ciw(cm, ciw) == pytest.approx(expected['fwiou'], abs=1e-9)
        assert metrics.f1_macro(cm) == pytest.approx(expected['f1'], abs=1e-9)
        assert metrics.balanced_accuracy(cm) == pytest.approx(expected['balanced_accuracy'], abs=1e-9)
        assert metrics.mcc(cm) == pytest.approx(expected['mcc'], abs=1e-9)


def test_ciw_resolve_is_alias_tolerant():
    ciw = CiwTable.resolve(['Background', 'Crack', 'Encrustation', 'Joint Problems', 'Obstacle'])
    np.testing.assert_allclose(ciw.weights, [0.0, 1.0, 0.3518, 0.6419, 1.0])
    assert ciw.weightOf('encrustations') == pytest.approx(0.3518)


def test_ciw_rejects_out_of_range_weight():
    with pytest.raises(ConfigurationError):
        CiwTable(['Background', 'Crack'], [0.0, 1.5])


def test_report_fields(example):
    report = compute_report(example, CiwTable(['Background', 'Crack'], [0.0, 1.0]), seed=3)
    values = report.toDict()
    assert values['iou_with_bg'] == pytest.approx(0.5833, abs=1e-4)
    assert values['fwiou'] == pytest.approx(2 / 3)
    assert values['seed'] == 3
    assert not values['mcc_degenerate']


def test_report_of_empty_matrix_has_no_aggregates():
    report = compute_report(ConfusionMatrix(2), CiwTable(['Background', 'Crack'], [0.0, 1.0]))
    assert report.iouWithBg is None and report.fwiou is None and report.pixelAccuracy is None
    assert report.mcc == 0.0 and report.mccDegenerate


@pytest.mark.parametrize('seed', range(5))
def test_metrics_invariant_under_label_permutation(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 6, (10, 10))
    pred = np.where(rng.uniform(size=(10, 10)) < 0.6, gt, rng.integers(0, 6, (10, 10)))
    # Background stays at index 0
    permutation = np.concatenate([[0], 1 + rng.permutation(5)])
    weights = np.concatenate([[0.0], rng.uniform(0.1, 1.0, 5)])
    names = [f'class{k}' for k in range(6)]
    cm = ConfusionMatrix(6).accumulate(pred, gt)
    moved = ConfusionMatrix(6).accumulate(permutation[pred], permutation[gt])
    movedWeights = np.empty(6)
    movedWeights[permutation] = weights
    iou = metrics.iou_per_class(cm)
    movedIou = metrics.iou_per_class(moved)
    for k in range(6):
        assert movedIou[permutation[k]] == pytest.approx(iou[k], abs=1e-12)
    assert metrics.mean_iou(moved) == pytest.approx(metrics.mean_iou(cm), abs=1e-12)
    assert metrics.mean_iou(moved, False) == pytest.approx(metrics.mean_iou(cm, False), abs=1e-12)
    assert metrics.fwiou_ciw(moved, CiwTable(names, movedWeights)) == pytest.approx(
        metrics.fwiou_ciw(cm, CiwTable(names, weights)), abs=1e-12)
    for metric in (metrics.f1_macro, metrics.balanced_accuracy, metrics.mcc, metrics.pixel_accuracy):
        assert metric(moved) == pytest.approx(metric(cm), abs=1e-12)
