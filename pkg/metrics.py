'''
Segmentation metrics computed from a pixel confusion matrix. Class index 0 is the background.
'''
from __future__ import annotations
import json
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence
import numpy as np
from errors import ConfigurationError, DataError, UndefinedMetricError

# Class importance weights per deficiency
DEFAULT_CIW: Dict[str, float] = {
    'Water Level': 0.0310,
    'Cracks': 1.0,
    'Roots': 1.0,
    'Holes': 1.0,
    'Joint Problems': 0.6419,
    'Deformation': 0.1622,
    'Fracture': 0.5100,
    'Encrustation/Deposits': 0.3518,
    'Loose Gasket': 0.5419,
}


def _aliases(name: str) -> set:
    result = set()
    for part in name.split('/'):
        part = ' '.join(part.lower().split())
        if part.endswith('s'):
            part = part[:-1]
        if part:
            result.add(part)
    return result


class CiwTable:
    '''
    Class importance weight for every class index. The background weight is always 0.
    '''
    def __init__(self, classNames: Sequence[str], weights: Sequence[float]) -> None:
        if len(classNames) != len(weights):
            raise ConfigurationError(f'CiwTable: {len(classNames)} class names but {len(weights)} weights')
        for name, w in zip(classNames, weights):
            if not 0.0 <= float(w) <= 1.0:
                raise ConfigurationError(f'CiwTable: weight {w} of class "{name}" is outside [0, 1]')
        self.classNames = list(classNames)
        self.weights = np.array(weights, dtype=np.float64)
        if len(self.weights):
            self.weights[0] = 0.0

    @classmethod
    def resolve(cls, classNames: Sequence[str], known: Mapping[str, float] = DEFAULT_CIW) -> 'CiwTable':
        '''
        Looks up every class name in known (case-insensitive, singular/plural tolerant, any "/" alias matches).
        Unmatched classes get 1.0.
        '''
        weights = []
        for index, name in enumerate(classNames):
            weight = 1.0
            for knownName, knownWeight in known.items():
                if _aliases(name) & _aliases(knownName):
                    weight = knownWeight
                    break
            weights.append(0.0 if index == 0 else weight)
        return cls(classNames, weights)

    def weightOf(self, name: str) -> float:
        for index, className in enumerate(self.classNames):
            if _aliases(name) & _aliases(className):
                return float(self.weights[index])
        return 1.0

    def toDict(self) -> Dict[str, float]:
        return {name: float(w) for name, w in zip(self.classNames, self.weights)}


class ConfusionMatrix:
    '''
    counts[g, p] is the number of pixels with ground truth g predicted as p.
    '''
    def __init__(self, numClasses: int, counts: Optional[np.ndarray] = None) -> None:
        if numClasses < 1:
            raise ConfigurationError(f'ConfusionMatrix: class count must be positive, got {numClasses}')
        self.numClasses = numClasses
        if counts is None:
            counts = np.zeros((numClasses, numClasses), dtype=np.int64)
        assert counts.shape == (numClasses, numClasses)
        self.counts = counts.astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _check(self, name: str, mask: np.ndarray) -> None:
        bad = (mask < 0) | (mask >= self.numClasses)
        if bad.any():
            location = tuple(int(v) for v in np.argwhere(bad)[0])
            raise DataError(f'accumulate: {name} value {int(mask[location])} at pixel {location} is outside [0, {self.numClasses})')

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> 'ConfusionMatrix':
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f'accumulate: prediction shape {pred.shape} does not match ground truth shape {gt.shape}')
        self._check('prediction', pred)
        self._check('ground truth', gt)
        k = self.numClasses
        flat = gt.astype(np.int64).reshape(-1) * k + pred.astype(np.int64).reshape(-1)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if other.numClasses != self.numClasses:
            raise ConfigurationError(f'merge: class counts differ ({self.numClasses} vs {other.numClasses})')
        return ConfusionMatrix(self.numClasses, self.counts + other.counts)

    def copy(self) -> 'ConfusionMatrix':
        return ConfusionMatrix(self.numClasses, self.counts.copy())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def _ratioOrNone(numerator: np.ndarray, denominator: np.ndarray) -> List[Optional[float]]:
    return [float(n) / float(d) if d > 0 else None for n, d in zip(numerator, denominator)]


def iou_per_class(cm: ConfusionMatrix) -> List[Optional[float]]:
    '''
    Intersection over union per class, None for classes absent from both prediction and ground truth.
    '''
    tp = np.diag(cm.counts)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    return _ratioOrNone(tp, union)


def f1_per_class(cm: ConfusionMatrix) -> List[Optional[float]]:
    tp = np.diag(cm.counts)
    return _ratioOrNone(2 * tp, cm.counts.sum(axis=1) + cm.counts.sum(axis=0))


def recall_per_class(cm: ConfusionMatrix) -> List[Optional[float]]:
    return _ratioOrNone(np.diag(cm.counts), cm.counts.sum(axis=1))


def _meanPresent(values: Sequence[Optional[float]], metricName: str, start: int = 0) -> float:
    present = [v for v in values[start:] if v is not None]
    if not present:
        raise UndefinedMetricError(f'{metricName}: no class is present')
    return float(np.mean(present))


def mean_iou(cm: ConfusionMatrix, includeBackground: bool = True) -> float:
    return _meanPresent(iou_per_class(cm), 'mean_iou', 0 if includeBackground else 1)


def fwiou_ciw(cm: ConfusionMatrix, ciw: CiwTable, useFrequency: bool = True) -> float:
    '''
    Sum(ciw_k * f_k * IoU_k) / Sum(ciw_k * f_k) over the defect classes present in the ground truth, f_k being the
    ground-truth pixel frequency. With useFrequency=False f_k is 1.
    '''
    if len(ciw.weights) != cm.numClasses:
        raise ConfigurationError(f'fwiou_ciw: CIW table has {len(ciw.weights)} classes, confusion matrix has {cm.numClasses}')
    rows = cm.counts.sum(axis=1)
    if rows[1:].sum() == 0:
        raise UndefinedMetricError('fwiou_ciw: the ground truth contains no defect pixel')
    iou = iou_per_class(cm)
    frequency = rows / rows.sum()
    numerator = 0.0
    denominator = 0.0
    for k in range(1, cm.numClasses):
        if rows[k] == 0:
            continue
        weight = ciw.weights[k] * (frequency[k] if useFrequency else 1.0)
        numerator += weight * iou[k]
        denominator += weight
    if denominator == 0:
        raise UndefinedMetricError('fwiou_ciw: every defect class present in the ground truth has weight 0')
    return numerator / denominator


def f1_macro(cm: ConfusionMatrix) -> float:
    return _meanPresent(f1_per_class(cm), 'f1_macro')


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    return _meanPresent(recall_per_class(cm), 'balanced_accuracy')


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError('pixel_accuracy: the confusion matrix is empty')
    return float(np.trace(cm.counts)) / cm.total


def mccDegenerate(cm: ConfusionMatrix) -> bool:
    s = float(cm.total)
    p = cm.counts.sum(axis=0).astype(np.float64)
    t = cm.counts.sum(axis=1).astype(np.float64)
    return (s * s - (p * p).sum()) == 0 or (s * s - (t * t).sum()) == 0


def mcc(cm: ConfusionMatrix) -> float:
    '''
    Multi-class Matthews correlation coefficient, 0 when the prediction or the ground truth holds a single class.
    '''
    if mccDegenerate(cm):
        warnings.warn('metrics: MCC is degenerate (single-class prediction or ground truth), reported as 0')
        return 0.0
    c = float(np.trace(cm.counts))
    s = float(cm.total)
    p = cm.counts.sum(axis=0).astype(np.float64)
    t = cm.counts.sum(axis=1).astype(np.float64)
    return (c * s - float((p * t).sum())) / np.sqrt((s * s - float((p * p).sum())) * (s * s - float((t * t).sum())))


@dataclass
class MetricsReport:
    classNames: List[str]
    perClassIou: List[Optional[float]]
    perClassF1: List[Optional[float]]
    perClassRecall: List[Optional[float]]
    iouWithBg: Optional[float]
    iouWithoutBg: Optional[float]
    fwiou: Optional[float]
    f1: Optional[float]
    balancedAccuracy: Optional[float]
    mcc: float
    mccDegenerate: bool
    pixelAccuracy: Optional[float]
    seed: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def toDict(self) -> Dict[str, Any]:
        values = {
            'iou_with_bg': self.iouWithBg,
            'iou_without_bg': self.iouWithoutBg,
            'fwiou': self.fwiou,
            'f1': self.f1,
            'balanced_accuracy': self.balancedAccuracy,
            'mcc': self.mcc,
            'mcc_degenerate': self.mccDegenerate,
            'pixel_accuracy': self.pixelAccuracy,
            'class_names': self.classNames,
            'per_class_iou': self.perClassIou,
            'per_class_f1': self.perClassF1,
            'per_class_recall': self.perClassRecall,
            'seed': self.seed,
        }
        values.update(self.extra)
        return values

    def toJson(self) -> str:
        return json.dumps(self.toDict(), indent=2)


def _orNone(metric, *args) -> Optional[float]:
    try:
        return metric(*args)
    except UndefinedMetricError:
        return None


def compute_report(cm: ConfusionMatrix, ciw: CiwTable, seed: Optional[int] = None) -> MetricsReport:
    '''
    All metrics of one confusion matrix. Aggregates that are undefined for this matrix are None.
    '''
    degenerate = mccDegenerate(cm)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        mccValue = mcc(cm)
    return MetricsReport(
        classNames=list(ciw.classNames),
        perClassIou=iou_per_class(cm),
        perClassF1=f1_per_class(cm),
        perClassRecall=recall_per_class(cm),
        iouWithBg=_orNone(mean_iou, cm, True),
        iouWithoutBg=_orNone(mean_iou, cm, False),
        fwiou=_orNone(fwiou_ciw, cm, ciw),
        f1=_orNone(f1_macro, cm),
        balancedAccuracy=_orNone(balanced_accuracy, cm),
        mcc=mccValue,
        mccDegenerate=degenerate,
        pixelAccuracy=_orNone(pixel_accuracy, cm),
        seed=seed,
    )
