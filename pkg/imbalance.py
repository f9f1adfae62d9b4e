'''
Class-imbalance mitigation: class decomposition into small groups with one model per group and fused predictions,
balancing by under-sampling and augmented copies, and the workflow combining both.
'''
from __future__ import annotations
import dataclasses
import json
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from math import ceil
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple
import numpy as np
from tqdm import tqdm
from augmentation import AugmentationSpec, augment_sample
from data_io import ClassPalette, SegSample, imageCounts, pixelCounts
from efpn_model import EfpnConfig, EfpnModel, build
from metrics import ConfusionMatrix, MetricsReport, compute_report
from trainer import TrainConfig, TrainHistory, predictProbabilities, restoreParams, split, train
from errors import ConfigurationError, PlanningError, UsageError
from logger import print


@dataclass
class ClassStats:
    '''
    Per-class image and pixel counts, index 0 being the background. attributedCounts counts every image once, for
    the rarest defect class it contains.
    '''
    imageCounts: np.ndarray
    pixelCounts: Optional[np.ndarray] = None
    attributedCounts: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.imageCounts = np.asarray(self.imageCounts, dtype=np.int64)
        if (self.imageCounts < 0).any():
            raise ConfigurationError(f'ClassStats: image counts must be non-negative, got {self.imageCounts.tolist()}')
        if self.pixelCounts is None:
            self.pixelCounts = np.zeros_like(self.imageCounts)
        if self.attributedCounts is None:
            self.attributedCounts = self.imageCounts.copy()

    @property
    def numClasses(self) -> int:
        return len(self.imageCounts)

    @property
    def defectClasses(self) -> List[int]:
        return list(range(1, self.numClasses))

    @classmethod
    def fromSamples(cls, samples: Sequence[SegSample], numClasses: int) -> 'ClassStats':
        counts = imageCounts(samples, numClasses)
        attributed = np.zeros(numClasses, dtype=np.int64)
        for owner in attribute(samples, counts):
            if owner > 0:
                attributed[owner] += 1
        return cls(counts, pixelCounts(samples, numClasses), attributed)


def attribute(samples: Sequence[SegSample], counts: np.ndarray) -> List[int]:
    '''
    The rarest defect class (fewest images, lowest index on ties) of every sample, 0 for background-only samples.
    '''
    owners = []
    for sample in samples:
        defects = [int(c) for c in sample.classesPresent() if c > 0]
        owners.append(min(defects, key=lambda c: (counts[c], c)) if defects else 0)
    return owners


@dataclass
class GroupSpec:
    groups: List[Tuple[int, ...]]
    conflictPairs: Set[FrozenSet[int]] = field(default_factory=set)
    groupSize: int = 3

    def groupOf(self, classIndex: int) -> int:
        for g, members in enumerate(self.groups):
            if classIndex in members:
                return g
        raise UsageError(f'Class {classIndex} belongs to no group')

    def toDict(self, classNames: Optional[Sequence[str]] = None) -> Dict:
        values = {'group_size': self.groupSize, 'groups': [list(g) for g in self.groups],
                  'conflicts': sorted(sorted(pair) for pair in self.conflictPairs)}
        if classNames is not None:
            values['group_names'] = [[classNames[c] for c in g] for g in self.groups]
        return values

    def toJson(self, classNames: Optional[Sequence[str]] = None) -> str:
        return json.dumps(self.toDict(classNames), indent=2)


def _capacities(classCount: int, groupSize: int) -> List[int]:
    groupCount = ceil(classCount / groupSize)
    return [groupSize] * (groupCount - 1) + [classCount - groupSize * (groupCount - 1)]


def _conflicts(classIndex: int, members: Iterable[int], conflicts: Set[FrozenSet[int]]) -> bool:
    return any(frozenset((classIndex, m)) in conflicts for m in members)


def decompose(stats: ClassStats, groupSize: int = 3, conflicts: Iterable[Tuple[int, int]] = ()) -> GroupSpec:
    '''
    Partitions the defect classes into groups of groupSize (the last group takes the remainder).
    Classes are taken by image count, largest first, and each goes to the group with the smallest running image count
    that has room and holds no conflicting class (lowest group index on ties). When that greedy pass gets stuck,
    a backtracking search over the same preference order is used. An unsatisfiable instance raises PlanningError
    naming the conflict pair that blocked the last dead end of that search.
    '''
    if groupSize < 1:
        raise ConfigurationError(f'decompose: group size must be positive, got {groupSize}')
    classes = stats.defectClasses
    if not classes:
        raise ConfigurationError('decompose: there are no defect classes')
    pairs: Set[FrozenSet[int]] = set()
    for a, b in conflicts:
        if a == b or a not in classes or b not in classes:
            raise ConfigurationError(f'decompose: conflict pair ({a}, {b}) must name two different defect classes')
        pairs.add(frozenset((a, b)))

    order = sorted(classes, key=lambda c: (-int(stats.imageCounts[c]), c))
    capacities = _capacities(len(classes), groupSize)
    members: List[List[int]] = [[] for _ in capacities]
    totals = [0] * len(capacities)
    deadEnd: List[Tuple[int, int]] = []

    def candidates(c: int) -> List[int]:
        free = [g for g in range(len(capacities))
                if len(members[g]) < capacities[g] and not _conflicts(c, members[g], pairs)]
        return sorted(free, key=lambda g: (totals[g], g))

    def blockingPair(c: int) -> Tuple[int, int]:
        # Every group with room holds a class conflicting with c
        for g in range(len(capacities)):
            if len(members[g]) < capacities[g]:
                for m in sorted(members[g]):
                    if frozenset((c, m)) in pairs:
                        return min(c, m), max(c, m)
        raise AssertionError(f'decompose: class {c} has no place although no conflict blocks it')

    def place(position: int) -> bool:
        if position == len(order):
            return True
        c = order[position]
        options = candidates(c)
        if not options:
            deadEnd[:] = [blockingPair(c)]
        for g in options:
            members[g].append(c)
            totals[g] += int(stats.imageCounts[c])
            if place(position + 1):
                return True
            members[g].pop()
            totals[g] -= int(stats.imageCounts[c])
        return False

    for position, c in enumerate(order):
        options = candidates(c)
        if options:
            members[options[0]].append(c)
            totals[options[0]] += int(stats.imageCounts[c])
            continue
        # Greedy dead end: redo the whole assignment with backtracking
        members = [[] for _ in capacities]
        totals = [0] * len(capacities)
        if not place(0):
            pair = deadEnd[0]
            raise PlanningError(f'decompose: conflicts cannot be satisfied with groups of {groupSize}, '
                                f'blocking pair ({pair[0]}, {pair[1]})')
        break

    return GroupSpec([tuple(sorted(m)) for m in members], pairs, groupSize)


def remapTable(group: Sequence[int], numClasses: int) -> np.ndarray:
    '''Global class index -> group-local index (group classes in ascending order become 1..n, the rest 0).'''
    table = np.zeros(numClasses, dtype=np.int64)
    for local, c in enumerate(sorted(group), start=1):
        table[c] = local
    return table


def project_dataset(samples: Sequence[SegSample], group: Sequence[int], numClasses: int) -> List[SegSample]:
    '''
    Masks restricted to the group's classes. Samples left without any group pixel are dropped.
    '''
    if any(not 0 < c < numClasses for c in group):
        raise ConfigurationError(f'project_dataset: group {list(group)} contains classes outside 1..{numClasses - 1}')
    table = remapTable(group, numClasses)
    projected = []
    for s in samples:
        mask = table[s.mask]
        if mask.any():
            projected.append(SegSample(s.id, s.image, mask))
    return projected


def unprojectMask(mask: np.ndarray, group: Sequence[int]) -> np.ndarray:
    lookup = np.array([0] + sorted(group), dtype=np.int64)
    return lookup[mask]


@dataclass
class EnsembleBundle:
    groupSpec: GroupSpec
    numClasses: int
    models: List[EfpnModel] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.models and len(self.models) != len(self.groupSpec.groups):
            raise UsageError(f'EnsembleBundle: {len(self.models)} models for {len(self.groupSpec.groups)} groups')
        for g, (model, group) in enumerate(zip(self.models, self.groupSpec.groups)):
            if model.config.numClasses != len(group) + 1:
                raise UsageError(f'EnsembleBundle: model {g} predicts {model.config.numClasses} classes, '
                                 f'group {list(group)} needs {len(group) + 1}')

    def predictProbabilities(self, images: np.ndarray, batchSize: int = 8) -> List[np.ndarray]:
        return [predictProbabilities(model, images, batchSize) for model in self.models]


def fuse_predictions(bundle: EnsembleBundle, probMaps: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Per pixel: each defect class takes the probability of its own group's model, the background takes the mean
    background probability of all models; the vector is renormalized and the argmax (lowest index on ties) returned.

    Returns
    -------
    (N, H, W) class map and (N, K, H, W) fused probabilities.
    '''
    groups = bundle.groupSpec.groups
    if len(probMaps) != len(groups):
        raise UsageError(f'fuse_predictions: {len(probMaps)} probability maps for {len(groups)} groups')
    first = np.asarray(probMaps[0])
    n, _, h, w = first.shape
    fused = np.zeros((n, bundle.numClasses, h, w))
    for g, (probs, group) in enumerate(zip(probMaps, groups)):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (n, len(group) + 1, h, w):
            raise UsageError(f'fuse_predictions: map {g} has shape {probs.shape}, group {list(group)} needs '
                             f'{(n, len(group) + 1, h, w)}')
        fused[:, 0] += probs[:, 0] / len(groups)
        for local, c in enumerate(sorted(group), start=1):
            fused[:, c] = probs[:, local]
    fused /= np.maximum(fused.sum(axis=1, keepdims=True), 1e-300)
    return fused.argmax(axis=1), fused


@dataclass
class BalanceEntry:
    classIndex: int
    count: int
    undersampleTo: Optional[int] = None
    augmentBy: Optional[int] = None


@dataclass
class BalancePlan:
    cap: int
    target: int
    entries: List[BalanceEntry] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def isEmpty(self) -> bool:
        return not self.entries

    def entryFor(self, classIndex: int) -> Optional[BalanceEntry]:
        return next((e for e in self.entries if e.classIndex == classIndex), None)

    def toDict(self, classNames: Optional[Sequence[str]] = None) -> Dict:
        entries = []
        for e in self.entries:
            entry = {'class_index': e.classIndex, 'count': e.count}
            if classNames is not None:
                entry['class_name'] = classNames[e.classIndex]
            if e.undersampleTo is not None:
                entry['undersample_to'] = e.undersampleTo
            if e.augmentBy is not None:
                entry['augment_by'] = e.augmentBy
            entries.append(entry)
        return {'cap': self.cap, 'target': self.target, 'entries': entries, 'warnings': self.warnings}


def balance_plan(stats: ClassStats, cap: int = 2000) -> BalancePlan:
    '''
    Classes with more than cap attributed images are under-sampled to cap, classes below the target
    min(cap, largest surviving count) get target - count augmented copies.
    '''
    if cap < 1:
        raise ConfigurationError(f'balance_plan: cap must be positive, got {cap}')
    counts = stats.attributedCounts
    surviving = [min(int(counts[c]), cap) for c in stats.defectClasses]
    target = max(surviving) if surviving else 0
    plan = BalancePlan(cap, target)
    for c in stats.defectClasses:
        count = int(counts[c])
        if count == 0:
            message = f'imbalance: class {c} has no images, it cannot be balanced'
            plan.warnings.append(message)
            warnings.warn(message)
        elif count > cap:
            plan.entries.append(BalanceEntry(c, count, undersampleTo=cap))
        elif count < target:
            plan.entries.append(BalanceEntry(c, count, augmentBy=target - count))
    return plan


def _drawSeed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def apply_balance_plan(samples: Sequence[SegSample], plan: BalancePlan, spec: AugmentationSpec, seed: int,
                       numClasses: int) -> List[SegSample]:
    '''
    Executes a plan: seeded removal of the excess images of under-sampled classes, then augmented copies of the
    images of each augmented class, cycling through the source images and the enabled operations.
    Copies are named <source id>_aug_<operation>_<n>.
    '''
    owners = attribute(samples, imageCounts(samples, numClasses))
    rng = np.random.default_rng([seed, 0])
    dropped: Set[int] = set()
    for entry in plan.entries:
        if entry.undersampleTo is None:
            continue
        indices = [i for i, owner in enumerate(owners) if owner == entry.classIndex]
        keep = set(rng.choice(len(indices), size=entry.undersampleTo, replace=False).tolist())
        dropped.update(i for j, i in enumerate(indices) if j not in keep)
    result = [s for i, s in enumerate(samples) if i not in dropped]

    for entry in plan.entries:
        if entry.augmentBy is None:
            continue
        sources = [s for s, owner in zip(samples, owners) if owner == entry.classIndex]
        if not sources:
            continue
        for n in range(entry.augmentBy):
            source = sources[n % len(sources)]
            op = spec.enabledOps[n % len(spec.enabledOps)]
            image, mask = augment_sample(source.image, source.mask, spec, _drawSeed(seed, entry.classIndex, n), ops=[op])
            result.append(SegSample(f'{source.id}_aug_{op.label}_{n}', image, mask))
    return result


@dataclass
class ImbalanceConfig:
    groupSize: int = 3
    conflicts: List[Tuple[str, str]] = field(default_factory=lambda: [('Crack', 'Fracture')])
    minorityFraction: float = 0.34
    balanceCap: int = 2000

    def validate(self) -> None:
        if self.groupSize < 1:
            raise ConfigurationError(f'ImbalanceConfig.groupSize must be positive, got {self.groupSize}')
        if not 0.0 < self.minorityFraction <= 1.0:
            raise ConfigurationError(f'ImbalanceConfig.minorityFraction must lie in (0, 1], got {self.minorityFraction}')
        if self.balanceCap < 1:
            raise ConfigurationError(f'ImbalanceConfig.balanceCap must be positive, got {self.balanceCap}')

    def conflictIndices(self, palette: ClassPalette) -> List[Tuple[int, int]]:
        return [(palette.indexOf(a), palette.indexOf(b)) for a, b in self.conflicts]


def _groupConfig(template: EfpnConfig, group: Sequence[int]) -> EfpnConfig:
    return dataclasses.replace(template, numClasses=len(group) + 1)


def _trainGroup(groupIndex: int, group: Tuple[int, ...], trainSamples: List[SegSample], valSamples: List[SegSample],
                template: EfpnConfig, trainConfig: TrainConfig, augSpec: AugmentationSpec, cap: int, seed: int,
                numClasses: int, showProgress: bool) -> Tuple[int, Dict[str, np.ndarray], TrainHistory, Dict]:
    projectedTrain = project_dataset(trainSamples, group, numClasses)
    projectedVal = project_dataset(valSamples, group, numClasses)
    localClasses = len(group) + 1
    plan = balance_plan(ClassStats.fromSamples(projectedTrain, localClasses), cap)
    balanced = apply_balance_plan(projectedTrain, plan, augSpec, seed + groupIndex, localClasses)
    for s in balanced:
        # Group models only ever see their own labels
        assert int(s.mask.max()) <= len(group), f'{s.id} carries a label outside group {list(group)}'
    model = build(_groupConfig(template, group), seed)
    result = train(model, balanced, projectedVal, trainConfig, showProgress=showProgress)
    return groupIndex, result.bestParams, result.history, plan.toDict()


def combined_workflow(trainSamples: Sequence[SegSample], valSamples: Sequence[SegSample],
                      testSamples: Sequence[SegSample], palette: ClassPalette, template: EfpnConfig,
                      trainConfig: TrainConfig, augSpec: AugmentationSpec, imbalanceConfig: ImbalanceConfig,
                      seed: int, workers: int = 1) -> Tuple[EnsembleBundle, MetricsReport, Dict]:
    '''
    Decompose the classes, balance and train one model per group, and evaluate the fused predictions on the whole
    test split.

    Returns
    -------
    The trained bundle, the fused test metrics and a record with the group and balance plans.
    '''
    imbalanceConfig.validate()
    numClasses = palette.numClasses
    stats = ClassStats.fromSamples(trainSamples, numClasses)
    groupSpec = decompose(stats, imbalanceConfig.groupSize, imbalanceConfig.conflictIndices(palette))
    print(f'Class groups: {groupSpec.toDict(palette.names)["group_names"]}')

    tasks = [(g, group, list(trainSamples), list(valSamples), template, trainConfig, augSpec,
              imbalanceConfig.balanceCap, seed, numClasses, workers <= 1) for g, group in enumerate(groupSpec.groups)]
    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_trainGroup, *task) for task in tasks]
            for future in tqdm(as_completed(futures), total=len(futures), desc='Training groups'):
                g, bestParams, history, plan = future.result()
                results[g] = (bestParams, history, plan)
    else:
        for task in tasks:
            g, bestParams, history, plan = _trainGroup(*task)
            results[g] = (bestParams, history, plan)

    models = []
    for g, group in enumerate(groupSpec.groups):
        model = build(_groupConfig(template, group), seed)
        restoreParams(model, results[g][0])
        models.append(model)
    bundle = EnsembleBundle(groupSpec, numClasses, models)

    report = evaluateEnsemble(bundle, testSamples, palette, seed, trainConfig.batchSize)
    record = {'groups': groupSpec.toDict(palette.names), 'balance_plans': [results[g][2] for g in range(len(models))]}
    return bundle, report, record


def evaluateEnsemble(bundle: EnsembleBundle, samples: Sequence[SegSample], palette: ClassPalette, seed: int,
                     batchSize: int = 8) -> MetricsReport:
    cm = ConfusionMatrix(palette.numClasses)
    if samples:
        images = np.stack([s.image for s in samples])
        predicted, _ = fuse_predictions(bundle, bundle.predictProbabilities(images, batchSize))
        cm.accumulate(predicted, np.stack([s.mask for s in samples]))
    return compute_report(cm, palette.ciwTable(), seed)


def baseline_workflow(trainSamples: Sequence[SegSample], valSamples: Sequence[SegSample],
                      testSamples: Sequence[SegSample], palette: ClassPalette, template: EfpnConfig,
                      trainConfig: TrainConfig, seed: int, showProgress: bool = True) -> Tuple[EfpnModel, MetricsReport]:
    '''Plain single-model training on the unmodified training split.'''
    model = build(dataclasses.replace(template, numClasses=palette.numClasses), seed)
    result = train(model, trainSamples, valSamples, trainConfig, showProgress=showProgress)
    restoreParams(model, result.bestParams)
    cm = ConfusionMatrix(palette.numClasses)
    if testSamples:
        images = np.stack([s.image for s in testSamples])
        cm.accumulate(predictProbabilities(model, images, trainConfig.batchSize).argmax(axis=1),
                      np.stack([s.mask for s in testSamples]))
    return model, compute_report(cm, palette.ciwTable(), seed)


def minorityClasses(stats: ClassStats, fraction: float) -> List[int]:
    '''The rarest ceil(fraction * defect classes) classes by training image count.'''
    count = max(1, ceil(fraction * len(stats.defectClasses)))
    return sorted(sorted(stats.defectClasses, key=lambda c: (int(stats.imageCounts[c]), c))[:count])


def minorityIou(report: MetricsReport, classes: Sequence[int]) -> Optional[float]:
    values = [report.perClassIou[c] for c in classes if report.perClassIou[c] is not None]
    return float(np.mean(values)) if values else None


def runImbalanceExperiment(samples: Sequence[SegSample], palette: ClassPalette, template: EfpnConfig,
                           trainConfig: TrainConfig, augSpec: AugmentationSpec, imbalanceConfig: ImbalanceConfig,
                           seed: int, workers: int = 1) -> Dict:
    '''
    Baseline and combined workflow on one shared split, compared by the mean IoU of the minority classes.
    '''
    trainSamples, valSamples, testSamples = split(samples, trainConfig.splitRatios, seed)
    minority = minorityClasses(ClassStats.fromSamples(trainSamples, palette.numClasses), imbalanceConfig.minorityFraction)
    _, baselineReport = baseline_workflow(trainSamples, valSamples, testSamples, palette, template, trainConfig, seed,
                                          showProgress=workers <= 1)
    _, combinedReport, record = combined_workflow(trainSamples, valSamples, testSamples, palette, template,
                                                  trainConfig, augSpec, imbalanceConfig, seed, workers)
    result = {
        'seed': seed,
        'minority_classes': [palette.names[c] for c in minority],
        'baseline_minority_iou': minorityIou(baselineReport, minority),
        'combined_minority_iou': minorityIou(combinedReport, minority),
        'test_ids': [s.id for s in testSamples],
        'baseline': baselineReport.toDict(),
        'combined': combinedReport.toDict(),
    }
    result.update(record)
    return result
