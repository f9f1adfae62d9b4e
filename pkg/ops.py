'''
Differentiable operators on Tensor. All inner products and reductions accumulate in float64 and the result is
stored in the input dtype. Padding is zero padding everywhere.
'''
from __future__ import annotations
from typing import List, Optional, Sequence, Tuple
import numpy as np
from tensor import Tensor, makeResult
from errors import ConfigurationError, DataError, NumericError


def _float64(tensor: Tensor) -> np.ndarray:
    return tensor.data.astype(np.float64, copy=False)


def _checkFeatureMap(tensor: Tensor, opName: str, argName: str = 'input') -> None:
    if tensor.data.ndim != 4:
        raise ConfigurationError(f'{opName}: {argName} must be 4-D (N, C, H, W), got shape {tensor.shape}')


def _outputSize(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(x: np.ndarray, i: int, j: int, hOut: int, wOut: int, stride: int) -> Tuple[slice, slice, slice, slice]:
    return (slice(None), slice(None),
            slice(i, i + stride * (hOut - 1) + 1, stride),
            slice(j, j + stride * (wOut - 1) + 1, stride))


def _checkWindow(opName: str, shape: Tuple[int, ...], k: int, stride: int, padding: int) -> Tuple[int, int]:
    if stride < 1:
        raise ConfigurationError(f'{opName}: stride must be >= 1, got {stride}')
    if padding < 0:
        raise ConfigurationError(f'{opName}: padding must be >= 0, got {padding}')
    h, w = shape[2], shape[3]
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigurationError(f'{opName}: padded input {h + 2 * padding}x{w + 2 * padding} is smaller than kernel {k}x{k}')
    return _outputSize(h, k, stride, padding), _outputSize(w, k, stride, padding)


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    '''
    Standard 2-D convolution. weight is [Cout, Cin, k, k] with odd k, bias is [Cout].
    Computed as k*k channel contractions of shifted input views (im2col without materializing the columns).
    '''
    _checkFeatureMap(input, 'conv2d')
    if weight.data.ndim != 4:
        raise ConfigurationError(f'conv2d: weight must be [Cout, Cin, k, k], got shape {weight.shape}')
    cOut, cIn, kH, kW = weight.shape
    n, c, h, w = input.shape
    if c != cIn:
        raise ConfigurationError(f'conv2d: input shape {input.shape} does not match weight shape {weight.shape}')
    if kH != kW or kH % 2 == 0:
        raise ConfigurationError(f'conv2d: kernel must be square with odd size, weight shape {weight.shape}')
    if bias is not None and bias.shape != (cOut,):
        raise ConfigurationError(f'conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}')
    k = kH
    hOut, wOut = _checkWindow('conv2d', input.shape, k, stride, padding)

    x = _pad(_float64(input), padding)
    wt = _float64(weight)
    out = np.zeros((n, cOut, hOut, wOut))
    for i in range(k):
        for j in range(k):
            patch = x[_window(x, i, j, hOut, wOut, stride)]
            out += np.tensordot(wt[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out += _float64(bias)[None, :, None, None]

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gIn = gW = gB = None
        if input.requiresGrad:
            gx = np.zeros_like(x)
            for i in range(k):
                for j in range(k):
                    gx[_window(gx, i, j, hOut, wOut, stride)] += np.tensordot(wt[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            gIn = gx[:, :, padding:padding + h, padding:padding + w]
        if weight.requiresGrad:
            gW = np.zeros_like(wt)
            for i in range(k):
                for j in range(k):
                    patch = x[_window(x, i, j, hOut, wOut, stride)]
                    gW[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requiresGrad:
            gB = g.sum(axis=(0, 2, 3))
        return [gIn, gW, gB] if bias is not None else [gIn, gW]

    parents = (input, weight, bias) if bias is not None else (input, weight)
    return makeResult(out, parents, backwardFn, 'conv2d')


def depthwise_conv2d(input: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    '''
    Per-channel spatial convolution, weight [C, 1, k, k]. No bias.
    '''
    _checkFeatureMap(input, 'depthwise_conv2d')
    n, c, h, w = input.shape
    if weight.data.ndim != 4 or weight.shape[1] != 1:
        raise ConfigurationError(f'depthwise_conv2d: weight must be [C, 1, k, k], got shape {weight.shape}')
    if weight.shape[0] != c:
        raise ConfigurationError(f'depthwise_conv2d: weight shape {weight.shape} has {weight.shape[0]} channels, input shape {input.shape} has {c}')
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ConfigurationError(f'depthwise_conv2d: kernel must be square with odd size, weight shape {weight.shape}')
    hOut, wOut = _checkWindow('depthwise_conv2d', input.shape, k, stride, padding)

    x = _pad(_float64(input), padding)
    wt = _float64(weight)[:, 0]
    out = np.zeros((n, c, hOut, wOut))
    for i in range(k):
        for j in range(k):
            out += x[_window(x, i, j, hOut, wOut, stride)] * wt[None, :, i, j, None, None]

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gIn = gW = None
        if input.requiresGrad:
            gx = np.zeros_like(x)
            for i in range(k):
                for j in range(k):
                    gx[_window(gx, i, j, hOut, wOut, stride)] += g * wt[None, :, i, j, None, None]
            gIn = gx[:, :, padding:padding + h, padding:padding + w]
        if weight.requiresGrad:
            gW = np.zeros((c, 1, k, k))
            for i in range(k):
                for j in range(k):
                    gW[:, 0, i, j] = (g * x[_window(x, i, j, hOut, wOut, stride)]).sum(axis=(0, 2, 3))
        return [gIn, gW]

    return makeResult(out, (input, weight), backwardFn, 'depthwise_conv2d')


def pointwise_conv(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    '''
    1x1 convolution: a per-pixel linear map across channels.
    '''
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ConfigurationError(f'pointwise_conv: weight must be [Cout, Cin, 1, 1], got shape {weight.shape}')
    return conv2d(input, weight, bias, stride=1, padding=0)


def maxpool2d(input: Tensor, k: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    '''
    Max pooling with floor output size. The gradient goes to the first maximum in row-major window order.
    '''
    _checkFeatureMap(input, 'maxpool2d')
    if k < 1:
        raise ConfigurationError(f'maxpool2d: window size must be >= 1, got {k}')
    n, c, h, w = input.shape
    hOut, wOut = _checkWindow('maxpool2d', input.shape, k, stride, padding)

    x = _pad(_float64(input), padding)
    best = None
    argBest = np.zeros((n, c, hOut, wOut), dtype=np.int64)
    for t in range(k * k):
        i, j = divmod(t, k)
        patch = x[_window(x, i, j, hOut, wOut, stride)]
        if best is None:
            best = patch.copy()
        else:
            better = patch > best
            best = np.where(better, patch, best)
            argBest[better] = t
    assert best is not None

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = np.zeros_like(x)
        for t in range(k * k):
            i, j = divmod(t, k)
            gx[_window(gx, i, j, hOut, wOut, stride)] += np.where(argBest == t, g, 0.0)
        return [gx[:, :, padding:padding + h, padding:padding + w]]

    return makeResult(best, (input,), backwardFn, 'maxpool2d')


def upsample_nearest2x(input: Tensor) -> Tensor:
    _checkFeatureMap(input, 'upsample_nearest2x')
    n, c, h, w = input.shape
    out = input.data.repeat(2, axis=2).repeat(2, axis=3)

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))]

    return makeResult(out, (input,), backwardFn, 'upsample_nearest2x')


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    '''
    Channel-wise concatenation in argument order.
    '''
    if len(parts) == 0:
        raise ConfigurationError('concat_channels: nothing to concatenate')
    for index, part in enumerate(parts):
        _checkFeatureMap(part, 'concat_channels', f'part {index}')
    n, _, h, w = parts[0].shape
    for index, part in enumerate(parts):
        if (part.shape[0], part.shape[2], part.shape[3]) != (n, h, w):
            raise ConfigurationError(f'concat_channels: part {index} has shape {part.shape}, expected N, H, W = {(n, h, w)}')

    out = np.concatenate([_float64(p) for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return makeResult(out, tuple(parts), backwardFn, 'concat_channels')


def slice_channels(input: Tensor, start: int, stop: int) -> Tensor:
    _checkFeatureMap(input, 'slice_channels')
    if not 0 <= start < stop <= input.shape[1]:
        raise ConfigurationError(f'slice_channels: invalid range [{start}, {stop}) for shape {input.shape}')
    out = input.data[:, start:stop]

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = np.zeros(input.shape)
        gx[:, start:stop] = g
        return [gx]

    return makeResult(out, (input,), backwardFn, 'slice_channels')


def relu(input: Tensor) -> Tensor:
    out = np.maximum(input.data, 0)

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        # Subgradient at 0 is 0
        return [g * (input.data > 0)]

    return makeResult(out, (input,), backwardFn, 'relu')


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f'add: shape mismatch {a.shape} vs {b.shape}')
    out = _float64(a) + _float64(b)

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [g, g]

    return makeResult(out, (a, b), backwardFn, 'add')


def scale(input: Tensor, factor: float) -> Tensor:
    out = _float64(input) * factor

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [g * factor]

    return makeResult(out, (input,), backwardFn, 'scale')


def _scalar(g: np.ndarray) -> float:
    return np.asarray(g, dtype=np.float64).reshape(()).item()


def sum_all(input: Tensor) -> Tensor:
    out = np.asarray(_float64(input).sum())

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [np.full(input.shape, _scalar(g))]

    return makeResult(out, (input,), backwardFn, 'sum_all')


def average(parts: Sequence[Tensor]) -> Tensor:
    '''
    Element-wise mean of same-shape tensors.
    '''
    if len(parts) == 0:
        raise ConfigurationError('average: nothing to average')
    for index, part in enumerate(parts):
        if part.shape != parts[0].shape:
            raise ConfigurationError(f'average: part {index} has shape {part.shape}, expected {parts[0].shape}')
    count = len(parts)
    out = _float64(parts[0]).copy()
    for part in parts[1:]:
        out += _float64(part)
    out /= count

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        share = g / count
        return [share for _ in range(count)]

    return makeResult(out, tuple(parts), backwardFn, 'average')


def softmax_channels(logits: Tensor) -> Tensor:
    '''
    Per-pixel softmax over the channel axis, stabilized by subtracting the channel maximum.
    '''
    _checkFeatureMap(logits, 'softmax_channels', 'logits')
    if logits.shape[1] < 1:
        raise ConfigurationError('softmax_channels: at least one channel is required')
    z = _float64(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [s * (g - (g * s).sum(axis=1, keepdims=True))]

    return makeResult(s, (logits,), backwardFn, 'softmax_channels')


def validateTarget(target: np.ndarray, numClasses: int, opName: str) -> None:
    '''
    Raises DataError naming the first pixel whose class index is outside [0, numClasses).
    '''
    bad = (target < 0) | (target >= numClasses)
    if bad.any():
        location = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f'{opName}: class index {int(target[location])} at pixel {location} is outside [0, {numClasses})')


def cross_entropy_loss(logits: Tensor, target: np.ndarray, classWeights: Optional[Sequence[float]] = None) -> Tensor:
    '''
    Mean categorical cross-entropy over all pixels. With class weights, the weighted mean
    sum(w[t] * l) / sum(w[t]) is used. target is an (N, H, W) integer class map.
    '''
    _checkFeatureMap(logits, 'cross_entropy_loss', 'logits')
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ConfigurationError(f'cross_entropy_loss: target shape {target.shape} does not match logits shape {logits.shape}')
    target = target.astype(np.int64, copy=False)
    validateTarget(target, c, 'cross_entropy_loss')

    if classWeights is None:
        pixelWeights = np.ones(target.shape)
    else:
        weights = np.asarray(classWeights, dtype=np.float64)
        if weights.shape != (c,) or (weights < 0).any():
            raise ConfigurationError(f'cross_entropy_loss: class weights must be {c} non-negative values, got {list(weights)}')
        pixelWeights = weights[target]
    weightSum = pixelWeights.sum()
    if weightSum <= 0:
        raise NumericError('cross_entropy_loss: all target pixels carry zero class weight')

    z = _float64(logits)
    z = z - z.max(axis=1, keepdims=True)
    logSumExp = np.log(np.exp(z).sum(axis=1))
    targetLogit = np.take_along_axis(z, target[:, None], axis=1)[:, 0]
    pixelLoss = logSumExp - targetLogit
    out = np.asarray((pixelWeights * pixelLoss).sum() / weightSum)

    def backwardFn(g: np.ndarray) -> List[Optional[np.ndarray]]:
        probs = np.exp(z - logSumExp[:, None])
        np.put_along_axis(probs, target[:, None], np.take_along_axis(probs, target[:, None], axis=1) - 1.0, axis=1)
        return [probs * (pixelWeights / weightSum)[:, None] * _scalar(g)]

    return makeResult(out, (logits,), backwardFn, 'cross_entropy_loss')
