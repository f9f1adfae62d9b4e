'''
Seeded synthetic stand-in for a sewer inspection dataset: textured background frames with class-stereotyped shapes.
Masks are exact by construction because every shape is rasterized with the same call on the image and on the mask.
'''
from __future__ import annotations
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter
from data_io import SegSample, DEFAULT_CLASSES, quantize
from errors import ConfigurationError

SHAPE_KINDS = ['crack', 'hole', 'root', 'deformation', 'fracture', 'encrustation', 'joint', 'gasket', 'obstruction']

TONES = {
    'crack': (0.85, 0.15, 0.10),
    'hole': (0.10, 0.75, 0.20),
    'root': (0.20, 0.25, 0.85),
    'deformation': (0.85, 0.80, 0.15),
    'fracture': (0.80, 0.20, 0.75),
    'encrustation': (0.20, 0.80, 0.80),
    'joint': (0.95, 0.55, 0.10),
    'gasket': (0.50, 0.15, 0.85),
    'obstruction': (0.95, 0.95, 0.95),
}

BACKGROUND_TONE = (0.45, 0.40, 0.35)

# Images per class in the reference distribution (the most frequent class has 2340 images, the rarest 104)
REFERENCE_COUNTS = {
    'Crack': 1850, 'Hole': 180, 'Root': 104, 'Deformation': 640, 'Fracture': 900,
    'Encrustation': 1200, 'Joint Problems': 2340, 'Loose Gasket': 300, 'Obstruction': 450,
}
REFERENCE_TOTAL = 2600


def referenceFrequencies() -> List[float]:
    '''
    Per-class image inclusion probabilities of the nine default defect classes, in palette order.
    '''
    return [REFERENCE_COUNTS[name] / REFERENCE_TOTAL for name, _ in DEFAULT_CLASSES[1:]]


@dataclass
class SyntheticConfig:
    '''
    classFrequencies[i] is the fraction of images containing defect class i + 1.
    '''
    classFrequencies: Sequence[float]
    imageSize: int = 64
    samples: int = 200
    shapesPerImage: Tuple[int, int] = (1, 2)
    noiseLevel: float = 0.03
    textureScale: float = 3.0
    seed: int = 0
    classNames: Optional[Sequence[str]] = None
    idPrefix: str = 'synth'

    def validate(self) -> None:
        if len(self.classFrequencies) == 0:
            raise ConfigurationError('SyntheticConfig.classFrequencies: at least one defect class is required')
        if any(not 0.0 <= f <= 1.0 for f in self.classFrequencies):
            raise ConfigurationError(f'SyntheticConfig.classFrequencies must lie in [0, 1], got {list(self.classFrequencies)}')
        if max(self.classFrequencies) <= 0:
            raise ConfigurationError('SyntheticConfig.classFrequencies: at least one class must have a positive frequency')
        if self.imageSize < 16:
            raise ConfigurationError(f'SyntheticConfig.imageSize must be >= 16, got {self.imageSize}')
        if self.samples < 1:
            raise ConfigurationError(f'SyntheticConfig.samples must be positive, got {self.samples}')
        low, high = self.shapesPerImage
        if not 1 <= low <= high:
            raise ConfigurationError(f'SyntheticConfig.shapesPerImage must satisfy 1 <= min <= max, got {self.shapesPerImage}')
        if self.noiseLevel < 0 or self.textureScale <= 0:
            raise ConfigurationError('SyntheticConfig: noise level must be >= 0 and texture scale > 0')

    def shapeKinds(self) -> List[str]:
        names = list(self.classNames) if self.classNames is not None else [n for n, _ in DEFAULT_CLASSES[1:]]
        kinds = []
        for i in range(len(self.classFrequencies)):
            name = names[i].lower() if i < len(names) else ''
            kind = next((k for k in SHAPE_KINDS if k in name), SHAPE_KINDS[i % len(SHAPE_KINDS)])
            kinds.append(kind)
        return kinds


class _Painter:
    '''Draws each primitive on the RGB image and, with the class index, on the mask.'''
    def __init__(self, image: Image.Image, mask: Image.Image) -> None:
        self.imageDraw = ImageDraw.Draw(image)
        self.maskDraw = ImageDraw.Draw(mask)
        self.color: Tuple[int, int, int] = (0, 0, 0)
        self.index = 0

    def line(self, points, width: int) -> None:
        self.imageDraw.line(points, fill=self.color, width=width, joint='curve')
        self.maskDraw.line(points, fill=self.index, width=width, joint='curve')

    def ellipse(self, box) -> None:
        self.imageDraw.ellipse(box, fill=self.color)
        self.maskDraw.ellipse(box, fill=self.index)

    def ring(self, box, width: int) -> None:
        self.imageDraw.ellipse(box, outline=self.color, width=width)
        self.maskDraw.ellipse(box, outline=self.index, width=width)

    def arc(self, box, start: float, end: float, width: int) -> None:
        self.imageDraw.arc(box, start, end, fill=self.color, width=width)
        self.maskDraw.arc(box, start, end, fill=self.index, width=width)

    def polygon(self, points) -> None:
        self.imageDraw.polygon(points, fill=self.color)
        self.maskDraw.polygon(points, fill=self.index)

    def rectangle(self, box) -> None:
        self.imageDraw.rectangle(box, fill=self.color)
        self.maskDraw.rectangle(box, fill=self.index)


def _walk(rng: np.random.Generator, start, steps: int, stepLength: float, turn: float, size: int) -> List[Tuple[float, float]]:
    x, y = start
    heading = rng.uniform(0, 2 * np.pi)
    points = [(x, y)]
    for _ in range(steps):
        heading += rng.uniform(-turn, turn)
        x = float(np.clip(x + stepLength * np.cos(heading), 0, size - 1))
        y = float(np.clip(y + stepLength * np.sin(heading), 0, size - 1))
        points.append((x, y))
    return points


def _box(cx: float, cy: float, rx: float, ry: float) -> List[float]:
    return [cx - rx, cy - ry, cx + rx, cy + ry]


def _drawShape(kind: str, painter: _Painter, rng: np.random.Generator, size: int) -> None:
    s = float(size)
    cx, cy = rng.uniform(0.15 * s, 0.85 * s, size=2)
    thin = max(2, size // 24)
    if kind == 'crack':
        painter.line(_walk(rng, (cx, cy), 8, 0.07 * s, 0.5, size), thin)
    elif kind == 'hole':
        painter.ellipse(_box(cx, cy, rng.uniform(0.06, 0.12) * s, rng.uniform(0.06, 0.12) * s))
    elif kind == 'root':
        trunk = _walk(rng, (cx, cy), 6, 0.06 * s, 0.3, size)
        painter.line(trunk, thin + 1)
        for p in trunk[2::2]:
            painter.line(_walk(rng, p, 3, 0.05 * s, 0.8, size), thin)
    elif kind == 'deformation':
        r = rng.uniform(0.2, 0.35) * s
        start = rng.uniform(0, 360)
        painter.arc(_box(cx, cy, r, r), start, start + rng.uniform(90, 180), max(3, size // 12))
    elif kind == 'fracture':
        x0 = rng.uniform(0.05, 0.3) * s
        x1 = rng.uniform(0.7, 0.95) * s
        xs = np.linspace(x0, x1, 7)
        ys = cy + np.where(np.arange(7) % 2 == 0, -1.0, 1.0) * 0.06 * s
        painter.line(list(zip(xs.tolist(), np.clip(ys, 0, s - 1).tolist())), thin + 1)
    elif kind == 'encrustation':
        for _ in range(int(rng.integers(3, 6))):
            bx, by = rng.normal([cx, cy], 0.06 * s)
            r = rng.uniform(0.03, 0.06) * s
            painter.ellipse(_box(bx, by, r, r))
    elif kind == 'joint':
        half = max(2, int(rng.uniform(0.03, 0.06) * s))
        if rng.random() < 0.5:
            painter.rectangle([0, cy - half, s - 1, cy + half])
        else:
            painter.rectangle([cx - half, 0, cx + half, s - 1])
    elif kind == 'gasket':
        r = rng.uniform(0.12, 0.2) * s
        painter.ring(_box(cx, cy, r, r), max(2, size // 20))
    elif kind == 'obstruction':
        count = int(rng.integers(5, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, count))
        radii = rng.uniform(0.08, 0.16, count) * s
        painter.polygon([(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(angles, radii)])
    else:
        raise ConfigurationError(f'Unknown synthetic shape kind "{kind}"')


def _background(rng: np.random.Generator, size: int, textureScale: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    texture = gaussian_filter(noise, textureScale)
    texture /= max(float(np.abs(texture).max()), 1e-12)
    shade = 0.12 * texture
    return np.stack([np.clip(tone + shade, 0.0, 1.0) for tone in BACKGROUND_TONE], axis=-1)


def _classMembership(config: SyntheticConfig, rng: np.random.Generator) -> List[List[int]]:
    '''Stratified: exactly round(f * samples) images receive each class.'''
    members: List[List[int]] = [[] for _ in range(config.samples)]
    for k, frequency in enumerate(config.classFrequencies):
        count = min(config.samples, int(round(frequency * config.samples)))
        for i in rng.choice(config.samples, size=count, replace=False):
            members[int(i)].append(k + 1)
    return members


def generate_synthetic(config: SyntheticConfig) -> List[SegSample]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    membership = _classMembership(config, rng)
    kinds = config.shapeKinds()
    # Frequent classes first so rare ones end up on top
    paintOrder = {k + 1: rank for rank, k in enumerate(np.argsort(-np.asarray(config.classFrequencies), kind='stable'))}
    size = config.imageSize

    samples = []
    for i, classes in enumerate(membership):
        sampleRng = np.random.default_rng([config.seed, i])
        background = _background(sampleRng, size, config.textureScale)
        image = Image.fromarray(np.round(background * 255).astype(np.uint8))
        mask = Image.new('L', (size, size), 0)
        painter = _Painter(image, mask)

        ordered = sorted(classes, key=lambda c: paintOrder[c])
        pending = ordered
        for _ in range(3):
            for c in pending:
                tone = np.clip(np.asarray(TONES[kinds[c - 1]]) + sampleRng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
                painter.color = tuple(int(v) for v in np.round(tone * 255))
                painter.index = c
                low, high = config.shapesPerImage
                for _ in range(int(sampleRng.integers(low, high + 1))):
                    _drawShape(kinds[c - 1], painter, sampleRng, size)
            present = set(np.unique(np.asarray(mask)).tolist())
            # Repaint classes that were fully covered by later shapes
            pending = [c for c in ordered if c not in present]
            if not pending:
                break

        pixels = np.asarray(image).astype(np.float32) / 255.0
        pixels = pixels + sampleRng.normal(0.0, config.noiseLevel, pixels.shape)
        samples.append(SegSample(f'{config.idPrefix}_{i:05d}', quantize(pixels.transpose(2, 0, 1)),
                                 np.asarray(mask).astype(np.int64)))
    return samples
