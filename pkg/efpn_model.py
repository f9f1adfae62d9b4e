'''
The E-FPN segmentation network.

Bottom-up: stage 0 runs its multi-scale blocks at full resolution, every later stage starts with a 2x2 max-pool and
doubles the channel count. Top-down: a 1x1 lateral projects every level to lateral_channels, the coarsest projection
is the first P-map and every finer P-map is the upsampled previous P-map plus its lateral, smoothed by a 3x3
depthwise separable convolution. A single 1x1 classifier is applied to every P-map, the logit maps are upsampled to
the input size and averaged.
'''
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
import ops
import nn_ops
from nn_ops import DwSepConvSpec, InceptionRefSpec, MultiScaleBlockSpec
from tensor import Parameter, Tensor
from errors import ConfigurationError, DataError, UsageError


@dataclass
class StageConfig:
    outChannels: int
    blocks: int = 1
    extraDepthwiseLayers: int = 2
    branchWidths: Tuple[int, ...] = field(default_factory=tuple)

    def toDict(self) -> Dict[str, Any]:
        return {'out_channels': self.outChannels, 'blocks': self.blocks,
                'extra_depthwise_layers': self.extraDepthwiseLayers, 'branch_widths': list(self.branchWidths)}

    @classmethod
    def fromDict(cls, values: Dict[str, Any]) -> 'StageConfig':
        return cls(int(values['out_channels']), int(values['blocks']), int(values['extra_depthwise_layers']),
                   tuple(int(w) for w in values.get('branch_widths', [])))


@dataclass
class EfpnConfig:
    stages: List[StageConfig]
    numClasses: int = 10
    inputChannels: int = 3
    inputSize: int = 256
    baseChannels: int = 64
    lateralChannels: int = 128

    @property
    def levelCount(self) -> int:
        return len(self.stages)

    @classmethod
    def calibrated(cls, numClasses: int = 10, inputSize: int = 256) -> 'EfpnConfig':
        '''
        Four stages 64/128/256/512 with branch widths 1/16, 3/16, 11/16, 1/16 of the stage width.
        1,324,656 trainable parameters for 10 classes.
        '''
        layout = [(64, 1, 0), (128, 1, 2), (256, 2, 1), (512, 4, 2)]
        stages = [StageConfig(c, blocks, extra, (c // 16, 3 * c // 16, 11 * c // 16, c // 16)) for c, blocks, extra in layout]
        return cls(stages, numClasses=numClasses, inputSize=inputSize)

    @classmethod
    def simple(cls, numStages: int = 2, baseChannels: int = 64, numClasses: int = 4, inputSize: int = 64,
               blocksPerStage: int = 1, extraDepthwiseLayers: int = 2, lateralChannels: int = 128) -> 'EfpnConfig':
        stages = [StageConfig(baseChannels * 2 ** l, blocksPerStage, extraDepthwiseLayers) for l in range(numStages)]
        return cls(stages, numClasses=numClasses, inputSize=inputSize, baseChannels=baseChannels,
                   lateralChannels=lateralChannels)

    def validate(self) -> None:
        if len(self.stages) < 1:
            raise ConfigurationError('EfpnConfig.stages: at least one stage is required')
        for name in ('numClasses', 'inputChannels', 'inputSize', 'baseChannels', 'lateralChannels'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'EfpnConfig.{name} must be positive, got {getattr(self, name)}')
        if self.numClasses < 2:
            raise ConfigurationError(f'EfpnConfig.numClasses must be at least 2 (background plus one class), got {self.numClasses}')
        for l, stage in enumerate(self.stages):
            expected = self.baseChannels * 2 ** l
            if stage.outChannels != expected:
                raise ConfigurationError(f'EfpnConfig.stages[{l}].outChannels is {stage.outChannels}, '
                                         f'expected {expected} (base {self.baseChannels} doubled per stage)')
            if stage.blocks < 1:
                raise ConfigurationError(f'EfpnConfig.stages[{l}].blocks must be >= 1, got {stage.blocks}')
        if self.inputSize % 2 ** (self.levelCount - 1) != 0:
            raise ConfigurationError(f'EfpnConfig.inputSize {self.inputSize} is not divisible by 2^{self.levelCount - 1}')
        # Branch widths and extra layers are checked by the block specs
        self.blockSpecs()

    def blockSpecs(self) -> List[List[MultiScaleBlockSpec]]:
        specs = []
        inChannels = self.inputChannels
        for stage in self.stages:
            stageSpecs = []
            for _ in range(stage.blocks):
                stageSpecs.append(MultiScaleBlockSpec(inChannels, stage.outChannels, stage.branchWidths,
                                                      stage.extraDepthwiseLayers))
                inChannels = stage.outChannels
            specs.append(stageSpecs)
        return specs

    def smoothingSpec(self) -> DwSepConvSpec:
        return DwSepConvSpec(self.lateralChannels, self.lateralChannels, kernel=3)

    def levelSize(self, level: int, inputSize: Optional[int] = None) -> int:
        return (inputSize or self.inputSize) // 2 ** level

    def toDict(self) -> Dict[str, Any]:
        return {'input_channels': self.inputChannels, 'input_size': self.inputSize, 'num_classes': self.numClasses,
                'base_channels': self.baseChannels, 'lateral_channels': self.lateralChannels,
                'stages': [s.toDict() for s in self.stages]}

    @classmethod
    def fromDict(cls, values: Dict[str, Any]) -> 'EfpnConfig':
        try:
            return cls([StageConfig.fromDict(s) for s in values['stages']],
                       numClasses=int(values['num_classes']), inputChannels=int(values['input_channels']),
                       inputSize=int(values['input_size']), baseChannels=int(values['base_channels']),
                       lateralChannels=int(values['lateral_channels']))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f'EfpnConfig: malformed configuration record ({e})') from e


class EfpnModel:
    def __init__(self, config: EfpnConfig, parameters: Sequence[Parameter]) -> None:
        self.config = config
        self.parameters: Dict[str, Parameter] = {}
        for p in parameters:
            assert p.name not in self.parameters, f'Duplicate parameter name {p.name}'
            self.parameters[p.name] = p
        self.metadata: Dict[str, Any] = {}
        self._blockSpecs = config.blockSpecs()

    @property
    def levelCount(self) -> int:
        return self.config.levelCount

    def tensors(self) -> Dict[str, Tensor]:
        return {name: p.tensor for name, p in self.parameters.items()}

    def trainable(self) -> Iterator[Parameter]:
        return (p for p in self.parameters.values() if p.trainable)

    def bottom_up(self, input: Tensor) -> List[Tensor]:
        c = self.config
        if input.data.ndim != 4 or input.shape[1:] != (c.inputChannels, c.inputSize, c.inputSize):
            raise DataError(f'bottom_up: input shape {input.shape} does not match '
                            f'(N, {c.inputChannels}, {c.inputSize}, {c.inputSize})')
        params = self.tensors()
        levels = []
        x = input
        for l, stageSpecs in enumerate(self._blockSpecs):
            if l > 0:
                x = ops.maxpool2d(x, k=2, stride=2)
            for b, spec in enumerate(stageSpecs):
                x = nn_ops.multiscale_block_forward(spec, nn_ops.subParams(params, f'stage{l}.block{b}.'), x)
            levels.append(x)
        return levels

    def _lateral(self, params: Dict[str, Tensor], level: int, feature: Tensor) -> Tensor:
        return ops.pointwise_conv(feature, params[f'lateral{level}.weight'], params[f'lateral{level}.bias'])

    def top_down(self, levels: Sequence[Tensor]) -> List[Tensor]:
        '''
        Returns the P-maps ordered coarse to fine.
        '''
        if len(levels) != self.levelCount:
            raise UsageError(f'top_down: got {len(levels)} levels, the model has {self.levelCount}')
        params = self.tensors()
        smoothing = self.config.smoothingSpec()
        p = self._lateral(params, self.levelCount - 1, levels[-1])
        pmaps = [p]
        for l in range(self.levelCount - 2, -1, -1):
            merged = ops.add(ops.upsample_nearest2x(p), self._lateral(params, l, levels[l]))
            p = nn_ops.dwsep_forward(smoothing, nn_ops.subParams(params, f'smooth{l}.'), merged)
            pmaps.append(p)
        return pmaps

    def classify(self, pmaps: Sequence[Tensor]) -> Tensor:
        weight = self.parameters['classifier.weight'].tensor
        bias = self.parameters['classifier.bias'].tensor
        logits = []
        for p in pmaps:
            x = ops.pointwise_conv(p, weight, bias)
            while x.shape[2] < self.config.inputSize:
                x = ops.upsample_nearest2x(x)
            logits.append(x)
        return ops.average(logits)

    def forward(self, input: Tensor) -> Tensor:
        return self.classify(self.top_down(self.bottom_up(input)))

    def param_count(self) -> int:
        return sum(p.size for p in self.trainable())

    def flop_count(self, inputSize: Optional[int] = None) -> int:
        return int(flopBreakdown(self.config, inputSize)['flops'].sum())

    def flop_ratio_vs_inception(self) -> float:
        return min(levelFlopRatios(self.config))


def build(config: EfpnConfig, seed: int) -> EfpnModel:
    '''
    Creates a model with He-uniform weights and zero biases drawn from a generator seeded with seed.
    '''
    config.validate()
    rng = np.random.default_rng(seed)
    parameters: List[Parameter] = []
    for l, stageSpecs in enumerate(config.blockSpecs()):
        for b, spec in enumerate(stageSpecs):
            parameters += nn_ops.init_params(spec, rng, prefix=f'stage{l}.block{b}.')
    for l, stage in enumerate(config.stages):
        parameters.append(Parameter(f'lateral{l}.weight', Tensor(nn_ops.heUniform((config.lateralChannels, stage.outChannels, 1, 1), rng))))
        parameters.append(Parameter(f'lateral{l}.bias', Tensor(np.zeros(config.lateralChannels, dtype=np.float32))))
    for l in range(config.levelCount - 2, -1, -1):
        parameters += nn_ops.init_params(config.smoothingSpec(), rng, prefix=f'smooth{l}.')
    parameters.append(Parameter('classifier.weight', Tensor(nn_ops.heUniform((config.numClasses, config.lateralChannels, 1, 1), rng))))
    parameters.append(Parameter('classifier.bias', Tensor(np.zeros(config.numClasses, dtype=np.float32))))
    return EfpnModel(config, parameters)


def paramBreakdown(config: EfpnConfig) -> pd.DataFrame:
    '''
    Trainable parameters per module, from the counting formulas.
    '''
    config.validate()
    rows = []
    for l, stageSpecs in enumerate(config.blockSpecs()):
        for b, spec in enumerate(stageSpecs):
            rows.append({'module': f'stage{l}.block{b}', 'level': l, 'params': nn_ops.count_params(spec)})
    c = config.lateralChannels
    for l, stage in enumerate(config.stages):
        rows.append({'module': f'lateral{l}', 'level': l, 'params': stage.outChannels * c + c})
    for l in range(config.levelCount - 2, -1, -1):
        rows.append({'module': f'smooth{l}', 'level': l, 'params': nn_ops.count_params(config.smoothingSpec())})
    rows.append({'module': 'classifier', 'level': -1, 'params': c * config.numClasses + config.numClasses})
    return pd.DataFrame(rows, columns=['module', 'level', 'params'])


def flopBreakdown(config: EfpnConfig, inputSize: Optional[int] = None) -> pd.DataFrame:
    '''
    FLOPs of one sample per module. Upsampling is free, the merge adds and the final average cost 1 FLOP per element.
    '''
    config.validate()
    size = inputSize or config.inputSize
    if size % 2 ** (config.levelCount - 1) != 0:
        raise ConfigurationError(f'flop_count: input size {size} is not divisible by 2^{config.levelCount - 1}')
    c = config.lateralChannels
    k = config.numClasses
    rows = []
    inChannels = config.inputChannels
    for l, stageSpecs in enumerate(config.blockSpecs()):
        s = config.levelSize(l, size)
        if l > 0:
            rows.append({'module': f'stage{l}.pool', 'level': l, 'flops': inChannels * s * s})
        for b, spec in enumerate(stageSpecs):
            rows.append({'module': f'stage{l}.block{b}', 'level': l, 'flops': nn_ops.count_flops(spec, s, s)})
        inChannels = config.stages[l].outChannels
    for l, stage in enumerate(config.stages):
        s = config.levelSize(l, size)
        rows.append({'module': f'lateral{l}', 'level': l, 'flops': 2 * stage.outChannels * c * s * s})
    for l in range(config.levelCount - 2, -1, -1):
        s = config.levelSize(l, size)
        rows.append({'module': f'merge{l}', 'level': l, 'flops': c * s * s})
        smoothing = nn_ops.count_flops(config.smoothingSpec(), s, s) + c * s * s
        rows.append({'module': f'smooth{l}', 'level': l, 'flops': smoothing})
    for l in range(config.levelCount):
        s = config.levelSize(l, size)
        rows.append({'module': f'classifier{l}', 'level': l, 'flops': 2 * c * k * s * s})
    rows.append({'module': 'average', 'level': -1, 'flops': config.levelCount * k * size * size})
    return pd.DataFrame(rows, columns=['module', 'level', 'flops'])


def levelFlopRatios(config: EfpnConfig) -> List[float]:
    '''
    Per pyramid level, the smallest inception/multi-scale FLOP ratio over that level's blocks.
    The ratio does not depend on the spatial size.
    '''
    config.validate()
    ratios = []
    for stageSpecs in config.blockSpecs():
        ratios.append(min(nn_ops.count_flops(InceptionRefSpec.matching(spec), 1, 1) / nn_ops.count_flops(spec, 1, 1)
                          for spec in stageSpecs))
    return ratios
