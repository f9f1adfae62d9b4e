'''
Training: deterministic dataset split, Adam, the epoch loop with validation tracking and resumable training state.
'''
from __future__ import annotations
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from tqdm import tqdm
import ops
from tensor import Parameter, Tensor, backward, noGrad
from efpn_model import EfpnModel
from data_io import SegSample
from metrics import ConfusionMatrix, f1_macro, mean_iou
from errors import ConfigurationError, DataError, NumericError, UndefinedMetricError
from logger import print

HISTORY_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'val_iou', 'val_f1']


@dataclass
class TrainConfig:
    learningRate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    batchSize: int = 8
    splitRatios: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    weightDecay: float = 0.0
    gradClipNorm: float = 0.0
    earlyStoppingPatience: int = 0
    lrStepEpochs: int = 0
    lrGamma: float = 0.1
    classWeights: Optional[Sequence[float]] = None

    def validate(self) -> None:
        if self.learningRate < 0:
            raise ConfigurationError(f'TrainConfig.learningRate must be >= 0, got {self.learningRate}')
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigurationError(f'TrainConfig: betas must lie in [0, 1), got {self.beta1}, {self.beta2}')
        if self.epsilon <= 0:
            raise ConfigurationError(f'TrainConfig.epsilon must be positive, got {self.epsilon}')
        if self.epochs < 0:
            raise ConfigurationError(f'TrainConfig.epochs must be >= 0, got {self.epochs}')
        if self.batchSize < 1:
            raise ConfigurationError(f'TrainConfig.batchSize must be >= 1, got {self.batchSize}')
        validateRatios(self.splitRatios)
        for name in ('weightDecay', 'gradClipNorm', 'earlyStoppingPatience', 'lrStepEpochs'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f'TrainConfig.{name} must be >= 0, got {getattr(self, name)}')
        if not 0.0 < self.lrGamma <= 1.0:
            raise ConfigurationError(f'TrainConfig.lrGamma must lie in (0, 1], got {self.lrGamma}')

    def learningRateAt(self, epoch: int) -> float:
        if self.lrStepEpochs == 0:
            return self.learningRate
        return self.learningRate * self.lrGamma ** (epoch // self.lrStepEpochs)


def validateRatios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError(f'Split ratios must be three non-negative values, got {list(ratios)}')
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f'Split ratios must sum to 1, got {list(ratios)} (sum {sum(ratios)})')


def split(samples: Sequence[SegSample], ratios: Sequence[float] = (0.70, 0.15, 0.15),
          seed: int = 0) -> Tuple[List[SegSample], List[SegSample], List[SegSample]]:
    '''
    Seeded shuffle, then contiguous train/val/test parts. Validation and test sizes are floor(n * ratio), the
    remainder goes to training.
    '''
    validateRatios(ratios)
    n = len(samples)
    if n == 0:
        raise ConfigurationError('split: the dataset is empty')
    nVal = int(math.floor(n * ratios[1] + 1e-9))
    nTest = int(math.floor(n * ratios[2] + 1e-9))
    nTrain = n - nVal - nTest
    for name, size, ratio in (('train', nTrain, ratios[0]), ('val', nVal, ratios[1]), ('test', nTest, ratios[2])):
        if ratio > 0 and size == 0:
            raise ConfigurationError(f'split: {n} samples leave the {name} subset empty (ratio {ratio})')
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda indices: [samples[i] for i in indices]
    return pick(order[:nTrain]), pick(order[nTrain:nTrain + nVal]), pick(order[nTrain + nVal:])


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[Parameter], state: AdamState, config: TrainConfig,
              learningRate: Optional[float] = None) -> None:
    '''
    One bias-corrected Adam update, in place. Moments and the update are computed in float64.
    '''
    lr = config.learningRate if learningRate is None else learningRate
    trainable = [p for p in params if p.trainable]
    grads = {}
    for p in trainable:
        g = np.zeros(p.shape) if p.tensor.grad is None else p.tensor.grad.astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f'adam_step: gradient of {p.name} contains NaN or Inf')
        if config.weightDecay > 0:
            g = g + config.weightDecay * p.tensor.data.astype(np.float64)
        grads[p.name] = g
    if config.gradClipNorm > 0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > config.gradClipNorm:
            grads = {name: g * (config.gradClipNorm / norm) for name, g in grads.items()}

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p in trainable:
        g = grads[p.name]
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        assert m.shape == p.shape and v.shape == p.shape
        state.m[p.name] = m
        state.v[p.name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)
        p.tensor.data = (p.tensor.data.astype(np.float64) - update).astype(p.tensor.dtype)


@dataclass
class TrainHistory:
    records: List[Dict[str, Optional[float]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def toDataFrame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=HISTORY_COLUMNS)

    def toCsv(self, path: str, seed: Optional[int] = None) -> None:
        '''Writes the records with ";" separators. A given seed is repeated in a trailing "seed" column.'''
        df = self.toDataFrame()
        if seed is not None:
            df['seed'] = seed
        df.to_csv(path, sep=';', index=False)

    @classmethod
    def fromCsv(cls, path: str) -> 'TrainHistory':
        df = pd.read_csv(path, sep=';')
        records = [{c: (None if pd.isna(row[c]) else float(row[c])) for c in HISTORY_COLUMNS} for _, row in df.iterrows()]
        for r in records:
            r['epoch'] = int(r['epoch'])
        return cls(records)


@dataclass
class TrainResult:
    history: TrainHistory
    bestParams: Dict[str, np.ndarray]
    bestEpoch: int
    bestValIou: Optional[float]
    state: AdamState
    epochsRun: int
    stoppedEarly: bool = False


def _batch(samples: Sequence[SegSample]) -> Tuple[Tensor, np.ndarray]:
    return Tensor(np.stack([s.image for s in samples]).astype(np.float32)), np.stack([s.mask for s in samples])


def predictProbabilities(model: EfpnModel, images: np.ndarray, batchSize: int = 8) -> np.ndarray:
    '''
    Softmax class probabilities (N, K, H, W) for a stack of (N, 3, H, W) images.
    '''
    outputs = []
    with noGrad():
        for start in range(0, len(images), batchSize):
            logits = model.forward(Tensor(images[start:start + batchSize]))
            outputs.append(ops.softmax_channels(logits).data.astype(np.float64))
    return np.concatenate(outputs, axis=0)


def predict(model: EfpnModel, images: np.ndarray, batchSize: int = 8) -> np.ndarray:
    return predictProbabilities(model, images, batchSize).argmax(axis=1)


def evaluate(model: EfpnModel, samples: Sequence[SegSample], batchSize: int = 8,
             classWeights: Optional[Sequence[float]] = None) -> Tuple[float, ConfusionMatrix]:
    '''
    Mean cross-entropy over the samples and their confusion matrix.
    '''
    cm = ConfusionMatrix(model.config.numClasses)
    totalLoss = 0.0
    with noGrad():
        for start in range(0, len(samples), batchSize):
            x, y = _batch(samples[start:start + batchSize])
            logits = model.forward(x)
            totalLoss += ops.cross_entropy_loss(logits, y, classWeights).item() * len(y)
            cm.accumulate(logits.data.argmax(axis=1), y)
    return totalLoss / max(1, len(samples)), cm


def _snapshot(model: EfpnModel) -> Dict[str, np.ndarray]:
    return {name: p.tensor.data.copy() for name, p in model.parameters.items()}


def restoreParams(model: EfpnModel, values: Dict[str, np.ndarray]) -> None:
    for name, array in values.items():
        model.parameters[name].tensor.data = array.copy()


def _checkArity(model: EfpnModel, samples: Sequence[SegSample]) -> None:
    k = model.config.numClasses
    for s in samples:
        top = int(s.mask.max()) if s.mask.size else 0
        if top >= k:
            raise DataError(f'Sample {s.id} contains class {top} but the model predicts {k} classes')


def train(model: EfpnModel, trainSamples: Sequence[SegSample], valSamples: Sequence[SegSample], config: TrainConfig,
          callbacks: Sequence[Callable[[int, Dict[str, Optional[float]], EfpnModel], None]] = (),
          resume: Optional[TrainResult] = None, showProgress: bool = True) -> TrainResult:
    '''
    Mini-batch training with per-epoch validation. The parameters with the best validation IoU (with background)
    are kept in the result; the model itself holds the parameters of the last epoch.

    Parameters
    ----------
    model : EfpnModel
        Trained in place.
    trainSamples, valSamples : sequence of SegSample
        Training and validation data. Without validation data the last epoch is the best one.
    config : TrainConfig
        Hyperparameters. Epoch e shuffles with a generator seeded by (seed, e).
    callbacks : sequence of callables
        Called after every epoch with (epoch, record, model).
    resume : TrainResult, optional
        State of an interrupted run; training continues at its next epoch.
    showProgress : bool
        Show a tqdm bar over the epochs.

    Returns
    -------
    TrainResult
    '''
    config.validate()
    if len(trainSamples) == 0:
        raise ConfigurationError('train: no training samples')
    _checkArity(model, list(trainSamples) + list(valSamples))
    params = list(model.parameters.values())
    tensors = [p.tensor for p in params]

    if resume is None:
        history, state = TrainHistory(), AdamState()
        best, bestEpoch, bestIou, startEpoch, sinceBest = _snapshot(model), -1, None, 0, 0
    else:
        history, state = TrainHistory(list(resume.history.records)), resume.state
        best, bestEpoch, bestIou = resume.bestParams, resume.bestEpoch, resume.bestValIou
        startEpoch = resume.epochsRun
        sinceBest = startEpoch - 1 - bestEpoch
    stoppedEarly = False

    epochs = tqdm(range(startEpoch, config.epochs), desc='Training', unit='epoch', disable=not showProgress)
    for epoch in epochs:
        lr = config.learningRateAt(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(trainSamples))
        totalLoss = 0.0
        for b, start in enumerate(range(0, len(order), config.batchSize)):
            x, y = _batch([trainSamples[i] for i in order[start:start + config.batchSize]])
            try:
                for t in tensors:
                    t.grad = None
                loss = ops.cross_entropy_loss(model.forward(x), y, config.classWeights)
                backward(loss, tensors)
                adam_step(params, state, config, lr)
            except NumericError as e:
                raise NumericError(f'epoch {epoch} batch {b}: {e}') from e
            totalLoss += loss.item() * len(y)

        record: Dict[str, Optional[float]] = {'epoch': epoch, 'train_loss': totalLoss / len(trainSamples),
                                              'val_loss': None, 'val_iou': None, 'val_f1': None}
        if valSamples:
            valLoss, cm = evaluate(model, valSamples, config.batchSize, config.classWeights)
            record['val_loss'] = valLoss
            try:
                record['val_iou'] = mean_iou(cm, True)
                record['val_f1'] = f1_macro(cm)
            except UndefinedMetricError:
                pass
        history.records.append(record)

        valIou = record['val_iou']
        if not valSamples or (valIou is not None and (bestIou is None or valIou > bestIou)):
            best, bestEpoch, bestIou, sinceBest = _snapshot(model), epoch, valIou, 0
        else:
            sinceBest += 1
        epochs.set_postfix(loss=f"{record['train_loss']:.4f}", val_iou='-' if valIou is None else f'{valIou:.4f}')
        for callback in callbacks:
            callback(epoch, record, model)
        if config.earlyStoppingPatience and sinceBest >= config.earlyStoppingPatience:
            stoppedEarly = True
            tqdm.write(f'Early stopping after epoch {epoch}: no validation improvement for {sinceBest} epochs')
            break

    epochsRun = startEpoch + len(history.records) - (len(resume.history.records) if resume else 0)
    if showProgress and history.records:
        print(f'Training finished after {epochsRun} epochs, best validation IoU '
              f'{"n/a" if bestIou is None else f"{bestIou:.4f}"} at epoch {bestEpoch}')
    return TrainResult(history, best, bestEpoch, bestIou, state, epochsRun, stoppedEarly)


def save_training_state(path: str, model: EfpnModel, result: TrainResult) -> None:
    '''
    Everything needed to continue a run bit-exactly, as a numpy .npz archive.
    '''
    arrays = {'step': np.array(result.state.step), 'epochs_run': np.array(result.epochsRun),
              'best_epoch': np.array(result.bestEpoch),
              'best_val_iou': np.array(np.nan if result.bestValIou is None else result.bestValIou),
              'history': result.history.toDataFrame().astype(float).to_numpy()}
    for name, p in model.parameters.items():
        arrays[f'param/{name}'] = p.tensor.data
        arrays[f'best/{name}'] = result.bestParams[name]
        if name in result.state.m:
            arrays[f'm/{name}'] = result.state.m[name]
            arrays[f'v/{name}'] = result.state.v[name]
    np.savez(path, **arrays)


def load_training_state(path: str, model: EfpnModel) -> TrainResult:
    '''
    Restores the model parameters of the interrupted run and returns the state to pass as train(resume=...).
    '''
    with np.load(path) as archive:
        state = AdamState(step=int(archive['step']))
        best = {}
        for name in model.parameters:
            model.parameters[name].tensor.data = archive[f'param/{name}'].copy()
            best[name] = archive[f'best/{name}'].copy()
            if f'm/{name}' in archive.files:
                state.m[name] = archive[f'm/{name}'].copy()
                state.v[name] = archive[f'v/{name}'].copy()
        records = []
        for row in archive['history']:
            record = {c: (None if np.isnan(v) else float(v)) for c, v in zip(HISTORY_COLUMNS, row)}
            record['epoch'] = int(record['epoch'])
            records.append(record)
        bestIou = float(archive['best_val_iou'])
        return TrainResult(TrainHistory(records), best, int(archive['best_epoch']),
                           None if np.isnan(bestIou) else bestIou, state, int(archive['epochs_run']))
