import numpy as np
import pytest
import imbalance
from imbalance import BalancePlan, ClassStats, EnsembleBundle, GroupSpec, ImbalanceConfig
from augmentation import AugmentationSpec
from augmentation_op import AugmentationOp
from data_io import SegSample
from efpn_model import EfpnConfig, build
from synthetic import SyntheticConfig, generate_synthetic
from trainer import TrainConfig, split
from errors import ConfigurationError, PlanningError, UsageError

SYMMETRIC = [0, 100, 100, 100, 1, 1, 1, 50, 50, 50]


def maskSample(sampleId, mask):
    mask = np.asarray(mask, dtype=np.int64)
    return SegSample(sampleId, np.full((3,) + mask.shape, 0.5, dtype=np.float32), mask)


def test_nine_classes_make_three_groups_of_three():
    spec = imbalance.decompose(ClassStats(SYMMETRIC), groupSize=3)
    assert len(spec.groups) == 3
    assert all(len(g) == 3 for g in spec.groups)
    assert sorted(c for g in spec.groups for c in g) == list(range(1, 10))


def test_symmetric_counts_balance_perfectly():
    spec = imbalance.decompose(ClassStats(SYMMETRIC), groupSize=3)
    assert spec.groups == [(1, 4, 7), (2, 5, 8), (3, 6, 9)]
    assert [sum(SYMMETRIC[c] for c in g) for g in spec.groups] == [151, 151, 151]


def test_remainder_group():
    spec = imbalance.decompose(ClassStats([0, 5, 4, 3, 2]), groupSize=3)
    assert sorted(len(g) for g in spec.groups) == [1, 3]


def test_conflicting_classes_are_separated():
    spec = imbalance.decompose(ClassStats(SYMMETRIC), groupSize=3, conflicts=[(1, 4), (2, 3)])
    for group in spec.groups:
        assert not {1, 4} <= set(group)
        assert not {2, 3} <= set(group)
    assert spec.toDict()['conflicts'] == [[1, 4], [2, 3]]


def test_backtracking_resolves_a_greedy_dead_end():
    # Greedy puts 1 and 2 in the two groups, 3 conflicts with both and 4 fills the last free slot first
    counts = [0, 10, 9, 1, 8]
    spec = imbalance.decompose(ClassStats(counts), groupSize=2, conflicts=[(3, 1), (3, 2)])
    assert len(spec.groups) == 2
    for group in spec.groups:
        assert 3 not in group or not ({1, 2} & set(group))


def test_unsatisfiable_conflicts_name_the_pair():
    with pytest.raises(PlanningError, match=r'\(1, 2\)'):
        imbalance.decompose(ClassStats([0, 3, 2, 1]), groupSize=3, conflicts=[(1, 2)])


def test_blocking_pair_comes_from_the_last_dead_end():
    # The search first puts 1 in the open group and ends with 2 there, blocked by 3
    with pytest.raises(PlanningError, match=r'\(2, 3\)'):
        imbalance.decompose(ClassStats([0, 4, 3, 2, 1]), groupSize=3, conflicts=[(1, 2), (1, 3), (2, 3)])


@pytest.mark.parametrize('seed', range(25))
def test_decompose_partition_over_random_stats(seed):
    rng = np.random.default_rng(seed)
    numClasses = int(rng.integers(3, 12))
    counts = [0] + rng.integers(0, 500, size=numClasses - 1).tolist()
    groupSize = int(rng.integers(1, 5))
    defects = range(1, numClasses)
    conflicts = {tuple(sorted(int(c) for c in rng.choice(list(defects), size=2, replace=False)))
                 for _ in range(int(rng.integers(0, numClasses)))}
    try:
        spec = imbalance.decompose(ClassStats(counts), groupSize, sorted(conflicts))
    except PlanningError as e:
        assert any(f'({a}, {b})' in str(e) for a, b in conflicts)
        return
    assert sorted(c for g in spec.groups for c in g) == list(defects)
    sizes = [len(g) for g in spec.groups]
    assert all(s == groupSize for s in sizes[:-1]) and 1 <= sizes[-1] <= groupSize
    for a, b in conflicts:
        assert spec.groupOf(a) != spec.groupOf(b)
    assert imbalance.decompose(ClassStats(counts), groupSize, sorted(conflicts)).groups == spec.groups


def test_invalid_decompose_arguments():
    with pytest.raises(ConfigurationError):
        imbalance.decompose(ClassStats(SYMMETRIC), groupSize=0)
    with pytest.raises(ConfigurationError):
        imbalance.decompose(ClassStats(SYMMETRIC), conflicts=[(0, 1)])
    with pytest.raises(ConfigurationError):
        imbalance.decompose(ClassStats([10]))


def test_class_stats_from_samples():
    samples = [maskSample('a', [[0, 1], [2, 2]]), maskSample('b', [[1, 1], [0, 0]]), maskSample('c', [[0, 0], [0, 0]])]
    stats = ClassStats.fromSamples(samples, 3)
    assert stats.imageCounts.tolist() == [3, 2, 1]
    assert stats.pixelCounts.tolist() == [7, 3, 2]
    # Sample a belongs to its rarest class
    assert stats.attributedCounts.tolist() == [0, 1, 1]


def test_project_remaps_and_drops():
    samples = [maskSample('a', [[2, 5], [7, 3]]), maskSample('b', [[0, 3], [4, 0]])]
    projected = imbalance.project_dataset(samples, (2, 5, 7), 8)
    assert [s.id for s in projected] == ['a']
    np.testing.assert_array_equal(projected[0].mask, [[1, 2], [3, 0]])
    np.testing.assert_array_equal(imbalance.unprojectMask(projected[0].mask, (2, 5, 7)), [[2, 5], [7, 0]])
    with pytest.raises(ConfigurationError):
        imbalance.project_dataset(samples, (0, 2), 8)


def bundleFor(groups, numClasses=3):
    config = EfpnConfig.simple(numStages=1, baseChannels=4, inputSize=4)
    models = [build(EfpnConfig(config.stages, numClasses=len(g) + 1, inputSize=4, baseChannels=4), 0) for g in groups]
    return EnsembleBundle(GroupSpec(groups), numClasses, models)


def test_fusion_hand_example():
    bundle = bundleFor([(1,), (2,)])
    a = np.array([0.2, 0.8]).reshape(1, 2, 1, 1)
    b = np.array([0.9, 0.1]).reshape(1, 2, 1, 1)
    labels, fused = imbalance.fuse_predictions(bundle, [a, b])
    assert labels[0, 0, 0] == 1
    np.testing.assert_allclose(fused[0, :, 0, 0], np.array([0.55, 0.8, 0.1]) / 1.45)


@pytest.mark.parametrize('seed', range(5))
def test_fused_probabilities_are_a_distribution(seed):
    rng = np.random.default_rng(seed)
    groups = [(1, 4, 7), (2, 5, 8), (3, 6), (9,)]
    bundle = EnsembleBundle(GroupSpec(groups), 10)
    maps = [rng.dirichlet(np.ones(len(g) + 1), size=(2, 4, 4)).transpose(0, 3, 1, 2) for g in groups]
    labels, fused = imbalance.fuse_predictions(bundle, maps)
    assert fused.shape == (2, 10, 4, 4)
    np.testing.assert_allclose(fused.sum(axis=1), 1.0, atol=1e-12)
    assert (fused >= 0).all()
    np.testing.assert_array_equal(labels, fused.argmax(axis=1))


def test_fusion_single_group_is_plain_argmax(rng):
    bundle = bundleFor([(1, 2)])
    probs = rng.dirichlet(np.ones(3), size=(2, 5, 5)).transpose(0, 3, 1, 2)
    labels, _ = imbalance.fuse_predictions(bundle, [probs])
    np.testing.assert_array_equal(labels, probs.argmax(axis=1))


def test_fusion_confident_background():
    bundle = bundleFor([(1,), (2,)])
    confident = np.zeros((1, 2, 2, 2))
    confident[:, 0] = 1.0
    labels, _ = imbalance.fuse_predictions(bundle, [confident, confident])
    np.testing.assert_array_equal(labels, 0)


def test_fusion_arity_is_checked():
    bundle = bundleFor([(1,), (2,)])
    with pytest.raises(UsageError):
        imbalance.fuse_predictions(bundle, [np.zeros((1, 2, 1, 1))])
    with pytest.raises(UsageError):
        imbalance.fuse_predictions(bundle, [np.zeros((1, 2, 1, 1)), np.zeros((1, 3, 1, 1))])


def test_bundle_checks_model_class_counts():
    with pytest.raises(UsageError):
        EnsembleBundle(GroupSpec([(1, 2)]), 3, bundleFor([(1,)]).models)


def test_balance_plan_cap_and_target():
    stats = ClassStats([0, 2340, 104, 500], attributedCounts=[0, 2340, 104, 500])
    plan = imbalance.balance_plan(stats, cap=2000)
    assert plan.target == 2000
    assert plan.entryFor(1).undersampleTo == 2000
    assert plan.entryFor(2).augmentBy == 1896
    assert plan.entryFor(3).augmentBy == 1500


def test_balanced_dataset_gives_empty_plan():
    assert imbalance.balance_plan(ClassStats([0, 50, 50, 50]), cap=2000).isEmpty


def test_empty_class_is_a_warning():
    with pytest.warns(UserWarning, match='class 2 has no images'):
        plan = imbalance.balance_plan(ClassStats([0, 10, 0]), cap=20)
    assert plan.isEmpty
    assert plan.warnings


def test_apply_balance_plan():
    samples = [maskSample(f'crack{i}', [[0, 1], [1, 1]]) for i in range(4)] + [maskSample('hole', [[2, 0], [0, 0]])]
    plan = imbalance.balance_plan(ClassStats.fromSamples(samples, 3), cap=3)
    assert plan.entryFor(1).undersampleTo == 3 and plan.entryFor(2).augmentBy == 2
    spec = AugmentationSpec(enabledOps=(AugmentationOp.HORIZONTAL_FLIP, AugmentationOp.GAUSSIAN_BLUR))
    balanced = imbalance.apply_balance_plan(samples, plan, spec, seed=1, numClasses=3)
    ids = [s.id for s in balanced]
    assert len(ids) == 6
    assert sum(i.startswith('crack') for i in ids) == 3
    assert ids[-2:] == ['hole_aug_horizontal_flip_0', 'hole_aug_gaussian_blur_1']
    np.testing.assert_array_equal(balanced[-2].mask, [[0, 2], [0, 0]])
    again = imbalance.apply_balance_plan(samples, plan, spec, seed=1, numClasses=3)
    assert [s.id for s in again] == ids


def test_plan_serialization():
    plan = BalancePlan(10, 10)
    plan.entries.append(imbalance.BalanceEntry(2, 4, augmentBy=6))
    assert plan.toDict(['Background', 'Crack', 'Hole'])['entries'] == [
        {'class_index': 2, 'count': 4, 'class_name': 'Hole', 'augment_by': 6}]


def test_minority_classes():
    stats = ClassStats([0, 10, 5, 1, 7])
    assert imbalance.minorityClasses(stats, 0.34) == [2, 3]
    assert imbalance.minorityClasses(stats, 0.01) == [3]


def test_imbalance_config(toyPalette):
    assert ImbalanceConfig(conflicts=[('crack', 'Root')]).conflictIndices(toyPalette) == [(1, 3)]
    with pytest.raises(ConfigurationError):
        ImbalanceConfig(conflicts=[('Crack', 'Fracture')]).conflictIndices(toyPalette)
    with pytest.raises(ConfigurationError):
        ImbalanceConfig(minorityFraction=0.0).validate()


def test_combined_workflow_end_to_end(toyPalette):
    samples = generate_synthetic(SyntheticConfig([0.6, 0.5, 0.5], imageSize=16, samples=16, seed=2,
                                                 classNames=toyPalette.names[1:]))
    train, val, test = split(samples, (0.5, 0.25, 0.25), seed=2)
    template = EfpnConfig.simple(numStages=2, baseChannels=4, inputSize=16, lateralChannels=4)
    trainConfig = TrainConfig(learningRate=0.01, epochs=1, batchSize=4, splitRatios=(0.5, 0.25, 0.25))
    config = ImbalanceConfig(groupSize=2, conflicts=[('Crack', 'Hole')], balanceCap=100)
    bundle, report, record = imbalance.combined_workflow(train, val, test, toyPalette, template, trainConfig,
                                                         AugmentationSpec(), config, seed=2)
    assert len(bundle.models) == 2
    assert not {1, 2} <= set(bundle.groupSpec.groups[0])
    assert [m.config.numClasses for m in bundle.models] == [len(g) + 1 for g in bundle.groupSpec.groups]
    assert len(report.perClassIou) == 4
    assert len(record['balance_plans']) == 2
    assert record['groups']['group_names']
