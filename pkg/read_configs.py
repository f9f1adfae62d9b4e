'''
Run configuration: an INI file (see config.ini) plus "Section.Key=value" command-line overrides.
Every value is parsed and validated up front, unknown sections and keys are rejected.
'''
from __future__ import annotations
from configparser import ConfigParser, Error as ConfigParserError
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from augmentation import AugmentationSpec
from augmentation_op import AugmentationOp
from data_io import ClassPalette, loadPalette
from efpn_model import EfpnConfig, StageConfig
from imbalance import ImbalanceConfig
from synthetic import SyntheticConfig, referenceFrequencies
from trainer import TrainConfig
from errors import ConfigurationError

KNOWN_KEYS: Dict[str, List[str]] = {
    'General': ['Dataset root', 'Palette path', 'Output folder', 'Seed', 'Workers'],
    'Model': ['Input channels', 'Input size', 'Number of classes', 'Base channels', 'Lateral channels', 'Stages',
              'Blocks per stage', 'Extra depthwise layers', 'Branch widths'],
    'Training': ['Learning rate', 'Beta1', 'Beta2', 'Epsilon', 'Epochs', 'Batch size', 'Split ratios', 'Weight decay',
                 'Gradient clip norm', 'Early stopping patience', 'LR step epochs', 'LR gamma', 'Class weights'],
    'Augmentation': ['Enabled ops', 'Rotation degrees', 'Shear degrees', 'Crop scale', 'Blur sigma', 'Jitter',
                     'Noise sigma', 'Balance cap'],
    'Imbalance': ['Group size', 'Conflicts', 'Minority fraction'],
    'Synthetic': ['Image size', 'Samples', 'Class frequencies', 'Shapes per image', 'Noise level', 'Texture scale'],
}


def _floats(text: str) -> List[float]:
    return [float(item) for item in text.split(',') if item.strip() != '']


def _ints(text: str) -> List[int]:
    return [int(item) for item in text.split(',') if item.strip() != '']


def _perStage(values: List[int], stages: int, name: str) -> List[int]:
    if len(values) == 1:
        return values * stages
    if len(values) != stages:
        raise ConfigurationError(f'Model.{name}: expected 1 or {stages} values, got {len(values)}')
    return values


def parseBranchWidths(text: str, stageChannels: Sequence[int]) -> List[Tuple[int, ...]]:
    '''
    "" -> default split, "1/16, 3/16, 11/16, 1/16" -> fractions of every stage width,
    "4,12,44,4; 8,24,88,8" -> explicit widths per stage (a single list applies to every stage).
    '''
    text = text.strip()
    if not text:
        return [tuple() for _ in stageChannels]
    if '/' in text:
        fractions = [Fraction(item.strip()) for item in text.split(',')]
        widths = []
        for channels in stageChannels:
            stageWidths = [f * channels for f in fractions]
            if any(w.denominator != 1 for w in stageWidths):
                raise ConfigurationError(f'Model.Branch widths: fractions {text} do not divide {channels} channels evenly')
            widths.append(tuple(int(w) for w in stageWidths))
        return widths
    perStage = [tuple(_ints(part)) for part in text.split(';') if part.strip()]
    if len(perStage) == 1:
        return perStage * len(stageChannels)
    if len(perStage) != len(stageChannels):
        raise ConfigurationError(f'Model.Branch widths: expected 1 or {len(stageChannels)} width lists, got {len(perStage)}')
    return perStage


class RunConfig:
    def __init__(self, cp: ConfigParser) -> None:
        self._checkKeys(cp)
        self._cp = cp
        try:
            self._parse()
        except (ValueError, ArithmeticError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f'{self._current}: {e}') from e

    @classmethod
    def fromFile(cls, path: str = 'config.ini', overrides: Sequence[str] = ()) -> 'RunConfig':
        cp = ConfigParser(interpolation=None)
        try:
            read = cp.read(path, encoding='utf-8')
        except ConfigParserError as e:
            raise ConfigurationError(f'Configuration file {path} cannot be parsed: {e}') from e
        if not read:
            raise ConfigurationError(f'Configuration file {path} does not exist')
        applyOverrides(cp, overrides)
        return cls(cp)

    @staticmethod
    def _checkKeys(cp: ConfigParser) -> None:
        for section in cp.sections():
            if section not in KNOWN_KEYS:
                raise ConfigurationError(f'Unknown configuration section [{section}], known sections are {list(KNOWN_KEYS)}')
            known = [k.lower() for k in KNOWN_KEYS[section]]
            for key in cp[section]:
                if key not in known:
                    raise ConfigurationError(f'Unknown configuration key "{key}" in [{section}]')

    def _value(self, section: str, key: str, default: str) -> str:
        self._current = f'{section}.{key}'
        if self._cp.has_section(section):
            return self._cp[section].get(key, default).strip()
        return default

    def _read(self, section: str, key: str, default: str, parse: Callable):
        return parse(self._value(section, key, default))

    def _parse(self) -> None:
        self._current = ''
        # General
        self.datasetRoot: str = self._value('General', 'Dataset root', 'data')
        self.palettePath: str = self._value('General', 'Palette path', '')
        self.outputFolder: str = self._value('General', 'Output folder', 'output')
        self.seed: int = self._read('General', 'Seed', '0', int)
        self.workers: int = self._read('General', 'Workers', '1', int)

        # Model
        self.inputChannels: int = self._read('Model', 'Input channels', '3', int)
        self.inputSize: int = self._read('Model', 'Input size', '256', int)
        self.numClasses: int = self._read('Model', 'Number of classes', '10', int)
        self.baseChannels: int = self._read('Model', 'Base channels', '64', int)
        self.lateralChannels: int = self._read('Model', 'Lateral channels', '128', int)
        self.stageCount: int = self._read('Model', 'Stages', '4', int)
        if self.stageCount < 1:
            raise ConfigurationError(f'Model.Stages must be >= 1, got {self.stageCount}')
        self.blocksPerStage = _perStage(self._read('Model', 'Blocks per stage', '1', _ints), self.stageCount, 'Blocks per stage')
        self.extraDepthwiseLayers = _perStage(self._read('Model', 'Extra depthwise layers', '2', _ints), self.stageCount,
                                              'Extra depthwise layers')
        stageChannels = [self.baseChannels * 2 ** l for l in range(self.stageCount)]
        self.branchWidths = parseBranchWidths(self._value('Model', 'Branch widths', ''), stageChannels)

        # Training
        self.learningRate: float = self._read('Training', 'Learning rate', '0.001', float)
        self.beta1: float = self._read('Training', 'Beta1', '0.9', float)
        self.beta2: float = self._read('Training', 'Beta2', '0.999', float)
        self.epsilon: float = self._read('Training', 'Epsilon', '1e-8', float)
        self.epochs: int = self._read('Training', 'Epochs', '100', int)
        self.batchSize: int = self._read('Training', 'Batch size', '8', int)
        self.splitRatios = tuple(self._read('Training', 'Split ratios', '0.70, 0.15, 0.15', _floats))
        self.weightDecay: float = self._read('Training', 'Weight decay', '0', float)
        self.gradClipNorm: float = self._read('Training', 'Gradient clip norm', '0', float)
        self.earlyStoppingPatience: int = self._read('Training', 'Early stopping patience', '0', int)
        self.lrStepEpochs: int = self._read('Training', 'LR step epochs', '0', int)
        self.lrGamma: float = self._read('Training', 'LR gamma', '0.1', float)
        classWeights = self._read('Training', 'Class weights', '', _floats)
        self.classWeights: Optional[List[float]] = classWeights or None

        # Augmentation
        try:
            self.enabledOps = tuple(AugmentationOp.from_string(op) for op in
                                    self._value('Augmentation', 'Enabled ops', ','.join(op.label for op in AugmentationOp)).split(',')
                                    if op.strip())
        except ValueError as e:
            raise ConfigurationError(f'Augmentation.Enabled ops: {e}') from e
        self.rotationDegrees: float = self._read('Augmentation', 'Rotation degrees', '15', float)
        self.shearDegrees: float = self._read('Augmentation', 'Shear degrees', '10', float)
        self.cropScale = self._pair('Augmentation', 'Crop scale', '0.8, 1.0', float)
        self.blurSigma = self._pair('Augmentation', 'Blur sigma', '0.5, 1.5', float)
        self.jitter: float = self._read('Augmentation', 'Jitter', '0.2', float)
        self.noiseSigma: float = self._read('Augmentation', 'Noise sigma', '0.02', float)
        self.balanceCap: int = self._read('Augmentation', 'Balance cap', '2000', int)

        # Imbalance
        self.groupSize: int = self._read('Imbalance', 'Group size', '3', int)
        self.conflicts: List[Tuple[str, str]] = []
        for pair in self._value('Imbalance', 'Conflicts', 'Crack:Fracture').split(';'):
            if not pair.strip():
                continue
            names = [n.strip() for n in pair.split(':')]
            if len(names) != 2 or not all(names):
                raise ConfigurationError(f'Imbalance.Conflicts: "{pair.strip()}" is not of the form ClassA:ClassB')
            self.conflicts.append((names[0], names[1]))
        self.minorityFraction: float = self._read('Imbalance', 'Minority fraction', '0.34', float)

        # Synthetic
        self.syntheticImageSize: int = self._read('Synthetic', 'Image size', str(self.inputSize), int)
        self.syntheticSamples: int = self._read('Synthetic', 'Samples', '200', int)
        frequencies = self._value('Synthetic', 'Class frequencies', 'reference')
        self.classFrequencies: List[float] = referenceFrequencies() if frequencies.lower() == 'reference' else _floats(frequencies)
        self.shapesPerImage = self._pair('Synthetic', 'Shapes per image', '1, 2', int)
        self.noiseLevel: float = self._read('Synthetic', 'Noise level', '0.03', float)
        self.textureScale: float = self._read('Synthetic', 'Texture scale', '3.0', float)

    def _pair(self, section: str, key: str, default: str, kind: Callable) -> Tuple:
        values = [kind(v) for v in self._value(section, key, default).split(',') if v.strip()]
        if len(values) != 2:
            raise ConfigurationError(f'{section}.{key}: expected two comma-separated values, got {values}')
        return tuple(values)

    def efpnConfig(self) -> EfpnConfig:
        stages = [StageConfig(self.baseChannels * 2 ** l, self.blocksPerStage[l], self.extraDepthwiseLayers[l],
                              self.branchWidths[l]) for l in range(self.stageCount)]
        return EfpnConfig(stages, numClasses=self.numClasses, inputChannels=self.inputChannels,
                          inputSize=self.inputSize, baseChannels=self.baseChannels,
                          lateralChannels=self.lateralChannels)

    def trainConfig(self) -> TrainConfig:
        return TrainConfig(self.learningRate, self.beta1, self.beta2, self.epsilon, self.epochs, self.batchSize,
                           self.splitRatios, self.seed, self.weightDecay, self.gradClipNorm,
                           self.earlyStoppingPatience, self.lrStepEpochs, self.lrGamma, self.classWeights)

    def augmentationSpec(self) -> AugmentationSpec:
        return AugmentationSpec(self.enabledOps, self.rotationDegrees, self.shearDegrees, self.cropScale,
                                self.blurSigma, self.jitter, self.noiseSigma, self.seed)

    def imbalanceConfig(self) -> ImbalanceConfig:
        return ImbalanceConfig(self.groupSize, list(self.conflicts), self.minorityFraction, self.balanceCap)

    def palette(self) -> ClassPalette:
        return loadPalette(self.palettePath)

    def syntheticConfig(self) -> SyntheticConfig:
        names = self.palette().names[1:1 + len(self.classFrequencies)]
        return SyntheticConfig(self.classFrequencies, self.syntheticImageSize, self.syntheticSamples,
                               self.shapesPerImage, self.noiseLevel, self.textureScale, self.seed, names)

    def validate(self) -> None:
        '''
        Builds and validates every typed configuration. Raises ConfigurationError on the first invalid field.
        '''
        if self.workers < 1:
            raise ConfigurationError(f'General.Workers must be >= 1, got {self.workers}')
        self.efpnConfig().validate()
        self.trainConfig().validate()
        self.augmentationSpec().validate()
        self.imbalanceConfig().validate()
        palette = self.palette()
        synthetic = self.syntheticConfig()
        synthetic.validate()
        if len(synthetic.classFrequencies) > palette.numClasses - 1:
            raise ConfigurationError(f'Synthetic.Class frequencies: {len(synthetic.classFrequencies)} defect classes but the '
                                     f'palette defines {palette.numClasses - 1}')
        if self.classWeights is not None and len(self.classWeights) != self.numClasses:
            raise ConfigurationError(f'Training.Class weights: {len(self.classWeights)} values for {self.numClasses} classes')
        for a, b in self.conflicts:
            palette.indexOf(a)
            palette.indexOf(b)


def applyOverrides(cp: ConfigParser, overrides: Sequence[str]) -> None:
    '''
    Applies "Section.Key=value" overrides. The key may contain spaces, e.g. "Training.Learning rate=0.01".
    '''
    for override in overrides:
        if '=' not in override or '.' not in override.split('=', 1)[0]:
            raise ConfigurationError(f'Override "{override}" is not of the form Section.Key=value')
        target, value = override.split('=', 1)
        section, key = target.split('.', 1)
        section = next((s for s in KNOWN_KEYS if s.lower() == section.strip().lower()), section.strip())
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key.strip()] = value.strip()
