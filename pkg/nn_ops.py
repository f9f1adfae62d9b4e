'''
Composite layers: depthwise separable convolution, the multi-scale block and the unfactorized inception block that
serves as the cost reference. Each layer is described by a spec, its parameters are a flat name -> Tensor mapping
using local names (e.g. "b2.pointwise.weight"), and counts follow closed formulas so they can be checked against the
materialized parameters.

FLOP convention: one multiply-accumulate is 2 FLOPs, pooling and ReLU cost 1 FLOP per output element, an element-wise
add costs 1 FLOP per element, bias additions are not counted.
'''
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
import numpy as np
import ops
from tensor import Parameter, Tensor
from errors import ConfigurationError

Params = Mapping[str, Tensor]
BRANCH_KERNELS = (1, 3, 5, 1)


@dataclass
class DwSepConvSpec:
    inChannels: int
    outChannels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kernel not in (3, 5):
            raise ConfigurationError(f'DwSepConvSpec: kernel must be 3 or 5, got {self.kernel}')
        if self.inChannels < 1 or self.outChannels < 1:
            raise ConfigurationError(f'DwSepConvSpec: channel counts must be positive, got {self.inChannels} -> {self.outChannels}')
        if self.stride < 1:
            raise ConfigurationError(f'DwSepConvSpec: stride must be >= 1, got {self.stride}')
        if self.padding is None:
            self.padding = (self.kernel - 1) // 2


def _defaultWidths(outChannels: int) -> Tuple[int, int, int, int]:
    quarter = outChannels // 4
    return (quarter, quarter, quarter, outChannels - 3 * quarter)


def _checkWidths(name: str, outChannels: int, widths: Sequence[int]) -> None:
    if len(widths) != 4:
        raise ConfigurationError(f'{name}: four branch widths are required, got {list(widths)}')
    if any(w < 1 for w in widths):
        raise ConfigurationError(f'{name}: every branch width must be positive, got {list(widths)}')
    if sum(widths) != outChannels:
        raise ConfigurationError(f'{name}: branch widths {list(widths)} sum to {sum(widths)}, expected out_channels {outChannels}')


@dataclass
class MultiScaleBlockSpec:
    '''
    Branches: 1x1 pointwise, 3x3 depthwise separable, 5x5 depthwise separable and 3x3 stride-1 max-pool followed by
    1x1 pointwise, concatenated in that order and followed by extraDepthwiseLayers depthwise-only 3x3 convolutions.
    '''
    inChannels: int
    outChannels: int
    branchWidths: Tuple[int, ...] = field(default_factory=tuple)
    extraDepthwiseLayers: int = 2

    def __post_init__(self) -> None:
        if self.inChannels < 1:
            raise ConfigurationError(f'MultiScaleBlockSpec: in_channels must be positive, got {self.inChannels}')
        if not self.branchWidths:
            self.branchWidths = _defaultWidths(self.outChannels)
        self.branchWidths = tuple(int(w) for w in self.branchWidths)
        _checkWidths('MultiScaleBlockSpec', self.outChannels, self.branchWidths)
        if self.extraDepthwiseLayers < 0:
            raise ConfigurationError(f'MultiScaleBlockSpec: extra depthwise layers must be >= 0, got {self.extraDepthwiseLayers}')


@dataclass
class InceptionRefSpec:
    '''
    Same branch layout as the multi-scale block with full 3x3 and 5x5 convolutions, plus a residual add when the
    channel counts match.
    '''
    inChannels: int
    outChannels: int
    branchWidths: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.inChannels < 1:
            raise ConfigurationError(f'InceptionRefSpec: in_channels must be positive, got {self.inChannels}')
        if not self.branchWidths:
            self.branchWidths = _defaultWidths(self.outChannels)
        self.branchWidths = tuple(int(w) for w in self.branchWidths)
        _checkWidths('InceptionRefSpec', self.outChannels, self.branchWidths)

    @property
    def residual(self) -> bool:
        return self.inChannels == self.outChannels

    @classmethod
    def matching(cls, spec: MultiScaleBlockSpec) -> 'InceptionRefSpec':
        return cls(spec.inChannels, spec.outChannels, spec.branchWidths)


LayerSpec = Union[DwSepConvSpec, MultiScaleBlockSpec, InceptionRefSpec]


def _dwSepShapes(inChannels: int, outChannels: int, kernel: int, prefix: str = '') -> Dict[str, Tuple[int, ...]]:
    return {f'{prefix}depthwise.weight': (inChannels, 1, kernel, kernel),
            f'{prefix}pointwise.weight': (outChannels, inChannels, 1, 1),
            f'{prefix}pointwise.bias': (outChannels,)}


def _pointwiseShapes(inChannels: int, outChannels: int, prefix: str) -> Dict[str, Tuple[int, ...]]:
    return {f'{prefix}pointwise.weight': (outChannels, inChannels, 1, 1),
            f'{prefix}pointwise.bias': (outChannels,)}


def param_shapes(spec: LayerSpec) -> Dict[str, Tuple[int, ...]]:
    '''
    Local parameter names and shapes of a layer, in initialization order.
    '''
    if isinstance(spec, DwSepConvSpec):
        return _dwSepShapes(spec.inChannels, spec.outChannels, spec.kernel)
    cIn = spec.inChannels
    w1, w2, w3, w4 = spec.branchWidths
    shapes = _pointwiseShapes(cIn, w1, 'b1.')
    if isinstance(spec, MultiScaleBlockSpec):
        shapes.update(_dwSepShapes(cIn, w2, 3, 'b2.'))
        shapes.update(_dwSepShapes(cIn, w3, 5, 'b3.'))
        shapes.update(_pointwiseShapes(cIn, w4, 'b4.'))
        for i in range(spec.extraDepthwiseLayers):
            shapes[f'extra{i}.depthwise.weight'] = (spec.outChannels, 1, 3, 3)
        return shapes
    if isinstance(spec, InceptionRefSpec):
        shapes.update({'b2.conv.weight': (w2, cIn, 3, 3), 'b2.conv.bias': (w2,),
                       'b3.conv.weight': (w3, cIn, 5, 5), 'b3.conv.bias': (w3,)})
        shapes.update(_pointwiseShapes(cIn, w4, 'b4.'))
        return shapes
    raise TypeError(f'Unknown layer spec {type(spec).__name__}')


def heUniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    '''
    He-uniform initialization, bound sqrt(6 / fan_in) with fan_in = in_channels_per_group * k * k.
    '''
    fanIn = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fanIn)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(spec: LayerSpec, rng: np.random.Generator, prefix: str = '') -> List[Parameter]:
    '''
    Materializes the parameters of a layer: weights He-uniform, biases zero.
    '''
    parameters = []
    for name, shape in param_shapes(spec).items():
        if name.endswith('.bias'):
            values = np.zeros(shape, dtype=np.float32)
        else:
            values = heUniform(shape, rng)
        parameters.append(Parameter(prefix + name, Tensor(values)))
    return parameters


def subParams(params: Params, prefix: str) -> Dict[str, Tensor]:
    '''
    Selects the entries below prefix and strips it, e.g. "stage0.block0." -> local block names.
    '''
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def dwsep_forward(spec: DwSepConvSpec, params: Params, input: Tensor) -> Tensor:
    x = ops.depthwise_conv2d(input, params['depthwise.weight'], spec.stride, spec.padding)
    x = ops.pointwise_conv(x, params['pointwise.weight'], params['pointwise.bias'])
    return ops.relu(x)


def _checkInput(name: str, spec: Union[MultiScaleBlockSpec, InceptionRefSpec], input: Tensor) -> None:
    if input.data.ndim != 4 or input.shape[1] != spec.inChannels:
        raise ConfigurationError(f'{name}: input shape {input.shape} does not match in_channels {spec.inChannels}')


def _pooledPointwise(params: Params, input: Tensor) -> Tensor:
    pooled = ops.maxpool2d(input, k=3, stride=1, padding=1)
    return ops.relu(ops.pointwise_conv(pooled, params['b4.pointwise.weight'], params['b4.pointwise.bias']))


def multiscale_block_forward(spec: MultiScaleBlockSpec, params: Params, input: Tensor,
                             branchOrder: Sequence[int] = (0, 1, 2, 3)) -> Tensor:
    '''
    Runs the four branches (in branchOrder, the result is concatenated in canonical order regardless) and the extra
    depthwise layers. Spatial size is preserved.
    '''
    _checkInput('multiscale_block_forward', spec, input)
    if sorted(branchOrder) != [0, 1, 2, 3]:
        raise ConfigurationError(f'multiscale_block_forward: branch order must be a permutation of 0..3, got {list(branchOrder)}')
    w2, w3 = spec.branchWidths[1], spec.branchWidths[2]
    branches = [
        lambda: ops.relu(ops.pointwise_conv(input, params['b1.pointwise.weight'], params['b1.pointwise.bias'])),
        lambda: dwsep_forward(DwSepConvSpec(spec.inChannels, w2, 3), subParams(params, 'b2.'), input),
        lambda: dwsep_forward(DwSepConvSpec(spec.inChannels, w3, 5), subParams(params, 'b3.'), input),
        lambda: _pooledPointwise(params, input),
    ]
    outputs: List[Optional[Tensor]] = [None] * 4
    for index in branchOrder:
        outputs[index] = branches[index]()
    x = ops.concat_channels(outputs)
    for i in range(spec.extraDepthwiseLayers):
        x = ops.relu(ops.depthwise_conv2d(x, params[f'extra{i}.depthwise.weight'], stride=1, padding=1))
    return x


def inception_ref_forward(spec: InceptionRefSpec, params: Params, input: Tensor) -> Tensor:
    _checkInput('inception_ref_forward', spec, input)
    b1 = ops.relu(ops.pointwise_conv(input, params['b1.pointwise.weight'], params['b1.pointwise.bias']))
    b2 = ops.relu(ops.conv2d(input, params['b2.conv.weight'], params['b2.conv.bias'], stride=1, padding=1))
    b3 = ops.relu(ops.conv2d(input, params['b3.conv.weight'], params['b3.conv.bias'], stride=1, padding=2))
    b4 = _pooledPointwise(params, input)
    x = ops.concat_channels([b1, b2, b3, b4])
    if spec.residual:
        x = ops.add(input, x)
    return x


def count_params(spec: LayerSpec) -> int:
    if isinstance(spec, DwSepConvSpec):
        k = spec.kernel
        return k * k * spec.inChannels + spec.inChannels * spec.outChannels + spec.outChannels
    cIn, cOut = spec.inChannels, spec.outChannels
    w1, w2, w3, w4 = spec.branchWidths
    if isinstance(spec, MultiScaleBlockSpec):
        # Pointwise parts of all branches add up to cIn * cOut + cOut, the depthwise kernels to (9 + 25) * cIn
        return cIn * cOut + cOut + 34 * cIn + 9 * spec.extraDepthwiseLayers * cOut
    if isinstance(spec, InceptionRefSpec):
        return (cIn * w1 + w1) + (9 * cIn * w2 + w2) + (25 * cIn * w3 + w3) + (cIn * w4 + w4)
    raise TypeError(f'Unknown layer spec {type(spec).__name__}')


def _dwSepFlops(inChannels: int, outChannels: int, kernel: int, hOut: int, wOut: int) -> int:
    pixels = hOut * wOut
    return 2 * kernel * kernel * inChannels * pixels + 2 * inChannels * outChannels * pixels


def count_flops(spec: LayerSpec, h: int, w: int) -> int:
    '''
    FLOPs of one sample of size h x w. For DwSepConvSpec only the two convolutions are counted, blocks include
    their activations, pooling and residual adds.
    '''
    if isinstance(spec, DwSepConvSpec):
        hOut = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wOut = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        return _dwSepFlops(spec.inChannels, spec.outChannels, spec.kernel, hOut, wOut)

    pixels = h * w
    cIn, cOut = spec.inChannels, spec.outChannels
    w1, w2, w3, w4 = spec.branchWidths
    pointwise1 = 2 * cIn * w1 * pixels + w1 * pixels
    pooled = cIn * pixels + 2 * cIn * w4 * pixels + w4 * pixels
    if isinstance(spec, MultiScaleBlockSpec):
        branch3 = _dwSepFlops(cIn, w2, 3, h, w) + w2 * pixels
        branch5 = _dwSepFlops(cIn, w3, 5, h, w) + w3 * pixels
        extra = spec.extraDepthwiseLayers * (2 * 9 * cOut * pixels + cOut * pixels)
        return pointwise1 + branch3 + branch5 + pooled + extra
    if isinstance(spec, InceptionRefSpec):
        branch3 = 2 * 9 * cIn * w2 * pixels + w2 * pixels
        branch5 = 2 * 25 * cIn * w3 * pixels + w3 * pixels
        residual = cOut * pixels if spec.residual else 0
        return pointwise1 + branch3 + branch5 + pooled + residual
    raise TypeError(f'Unknown layer spec {type(spec).__name__}')
