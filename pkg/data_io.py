'''
Dataset layout, class palette and the color-coded mask codec.

A dataset root holds images/*.png and masks/*.png with matching base names. Masks are RGB images whose colors are
looked up in the class palette. The palette (with the class importance weights) is stored as JSON:
{"classes": [{"index": 0, "name": "Background", "rgb": [0, 0, 0], "ciw": 0.0}, ...]}
'''
from __future__ import annotations
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple
import numpy as np
from PIL import Image
from tensor import Tensor
from metrics import CiwTable
from errors import ConfigurationError, DataError

IMAGES_FOLDER = 'images'
MASKS_FOLDER = 'masks'


@dataclass
class PaletteEntry:
    index: int
    name: str
    rgb: Tuple[int, int, int]
    ciw: float


class ClassPalette:
    def __init__(self, entries: Sequence[PaletteEntry]) -> None:
        entries = sorted(entries, key=lambda e: e.index)
        if not entries:
            raise ConfigurationError('ClassPalette: no classes defined')
        if [e.index for e in entries] != list(range(len(entries))):
            raise ConfigurationError(f'ClassPalette: class indices must be contiguous from 0, got {[e.index for e in entries]}')
        colors = [tuple(int(c) for c in e.rgb) for e in entries]
        for e, color in zip(entries, colors):
            if len(color) != 3 or any(not 0 <= c <= 255 for c in color):
                raise ConfigurationError(f'ClassPalette: class "{e.name}" has invalid color {list(e.rgb)}')
            if not 0.0 <= e.ciw <= 1.0:
                raise ConfigurationError(f'ClassPalette: class "{e.name}" has CIW {e.ciw} outside [0, 1]')
        if len(set(colors)) != len(colors):
            duplicate = next(c for c in colors if colors.count(c) > 1)
            raise ConfigurationError(f'ClassPalette: color {list(duplicate)} is used by more than one class')
        self.entries = [PaletteEntry(e.index, e.name, colors[i], float(e.ciw)) for i, e in enumerate(entries)]
        self.entries[0].ciw = 0.0

    @property
    def numClasses(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def colors(self) -> np.ndarray:
        return np.array([e.rgb for e in self.entries], dtype=np.uint8)

    def ciwTable(self) -> CiwTable:
        return CiwTable(self.names, [e.ciw for e in self.entries])

    def indexOf(self, name: str) -> int:
        for e in self.entries:
            if e.name.lower() == name.strip().lower():
                return e.index
        raise ConfigurationError(f'ClassPalette: unknown class name "{name}", known classes are {self.names}')

    def toDict(self) -> Dict[str, Any]:
        return {'classes': [{'index': e.index, 'name': e.name, 'rgb': list(e.rgb), 'ciw': e.ciw} for e in self.entries]}

    @classmethod
    def fromDict(cls, values: Dict[str, Any]) -> 'ClassPalette':
        try:
            return cls([PaletteEntry(int(c['index']), str(c['name']), tuple(c['rgb']), float(c.get('ciw', 1.0)))
                        for c in values['classes']])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f'ClassPalette: malformed palette record ({e})') from e


DEFAULT_CLASSES = [
    ('Background', (0, 0, 0)),
    ('Crack', (255, 0, 0)),
    ('Hole', (0, 255, 0)),
    ('Root', (0, 0, 255)),
    ('Deformation', (255, 255, 0)),
    ('Fracture', (255, 0, 255)),
    ('Encrustation', (0, 255, 255)),
    ('Joint Problems', (255, 128, 0)),
    ('Loose Gasket', (128, 0, 255)),
    ('Obstruction', (128, 128, 128)),
]


def defaultPalette() -> ClassPalette:
    '''
    Background plus the nine sewer deficiency classes, CIW resolved by name (unmatched classes get 1.0).
    '''
    names = [name for name, _ in DEFAULT_CLASSES]
    ciw = CiwTable.resolve(names)
    return ClassPalette([PaletteEntry(i, name, rgb, float(ciw.weights[i])) for i, (name, rgb) in enumerate(DEFAULT_CLASSES)])


def loadPalette(path: Optional[str]) -> ClassPalette:
    if not path:
        return defaultPalette()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            values = json.load(f)
    except OSError as e:
        raise ConfigurationError(f'Palette file {path} cannot be read: {e}') from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f'Palette file {path} is not valid JSON: {e}') from e
    return ClassPalette.fromDict(values)


def savePalette(palette: ClassPalette, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(palette.toDict(), f, indent=2)


@dataclass
class SegSample:
    '''
    image is a (3, H, W) float32 array scaled to [0, 1], mask an (H, W) int64 class map.
    '''
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f'Sample {self.id}: image must be (3, H, W), got shape {self.image.shape}')
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(f'Sample {self.id}: mask shape {self.mask.shape} does not match image shape {self.image.shape[1:]}')

    def imageTensor(self) -> Tensor:
        return Tensor(self.image[None])

    def classesPresent(self) -> np.ndarray:
        return np.unique(self.mask)


def toUint8(image: np.ndarray) -> np.ndarray:
    '''(3, H, W) floats in [0, 1] -> (H, W, 3) uint8.'''
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def fromUint8(pixels: np.ndarray) -> np.ndarray:
    '''(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1].'''
    return (pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def quantize(image: np.ndarray) -> np.ndarray:
    '''Snaps an image to the 8-bit grid so it survives a PNG round trip unchanged.'''
    return fromUint8(toUint8(image))


def encode_mask(indices: np.ndarray, palette: ClassPalette) -> np.ndarray:
    indices = np.asarray(indices)
    bad = (indices < 0) | (indices >= palette.numClasses)
    if bad.any():
        location = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f'encode_mask: class index {int(indices[location])} at pixel {location} is not in the palette')
    return palette.colors[indices]


def decode_mask(rgb: np.ndarray, palette: ClassPalette, source: str = 'mask') -> np.ndarray:
    '''
    Exact color lookup. Raises DataError with the (row, col) and the color of the first unknown pixel.
    '''
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f'decode_mask: {source} must be an (H, W, 3) RGB image, got shape {rgb.shape}')
    codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2].astype(np.int64)
    colors = palette.colors.astype(np.int64)
    paletteCodes = (colors[:, 0] << 16) | (colors[:, 1] << 8) | colors[:, 2]
    order = np.argsort(paletteCodes)
    sortedCodes = paletteCodes[order]
    position = np.clip(np.searchsorted(sortedCodes, codes), 0, len(sortedCodes) - 1)
    matched = sortedCodes[position] == codes
    if not matched.all():
        row, col = (int(v) for v in np.argwhere(~matched)[0])
        raise DataError(f'decode_mask: {source} has unknown color {rgb[row, col].tolist()} at pixel (row {row}, col {col})')
    return order[position].astype(np.int64)


def _readSample(imagePath: str, maskPath: str, palette: ClassPalette) -> SegSample:
    sampleId = os.path.splitext(os.path.basename(imagePath))[0]
    with Image.open(imagePath) as im:
        image = fromUint8(np.asarray(im.convert('RGB')))
    with Image.open(maskPath) as im:
        mask = decode_mask(np.asarray(im.convert('RGB')), palette, maskPath)
    if mask.shape != image.shape[1:]:
        raise DataError(f'{maskPath}: mask size {mask.shape} does not match image size {image.shape[1:]}')
    return SegSample(sampleId, image, mask)


def _pngNames(folder: str) -> Dict[str, str]:
    return {os.path.splitext(name)[0]: name for name in os.listdir(folder) if name.lower().endswith('.png')}


def load_dataset(root: str, palette: ClassPalette, workers: int = 4) -> List[SegSample]:
    '''
    Reads all image/mask pairs under root, sorted by base name.

    Parameters
    ----------
    root : str
        Dataset folder containing images/ and masks/.
    palette : ClassPalette
        Colors used to decode the masks.
    workers : int
        Number of reader threads. The result order does not depend on it.

    Returns
    -------
    list of SegSample
    '''
    imagesFolder = os.path.join(root, IMAGES_FOLDER)
    masksFolder = os.path.join(root, MASKS_FOLDER)
    for folder in (imagesFolder, masksFolder):
        if not os.path.isdir(folder):
            raise DataError(f'Dataset folder {folder} does not exist')

    images = _pngNames(imagesFolder)
    masks = _pngNames(masksFolder)
    for base in sorted(set(images) ^ set(masks)):
        if base in images:
            raise DataError(f'Image {os.path.join(imagesFolder, images[base])} has no matching mask')
        raise DataError(f'Mask {os.path.join(masksFolder, masks[base])} has no matching image')
    if not images:
        warnings.warn(f'data_io: dataset {root} is empty')
        return []

    bases = sorted(images)
    jobs = [(os.path.join(imagesFolder, images[b]), os.path.join(masksFolder, masks[b])) for b in bases]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(lambda job: _readSample(job[0], job[1], palette), jobs))


def save_dataset(samples: Sequence[SegSample], root: str, palette: ClassPalette) -> None:
    '''
    Writes samples in the standard layout. Images are stored with 8-bit precision.
    '''
    imagesFolder = os.path.join(root, IMAGES_FOLDER)
    masksFolder = os.path.join(root, MASKS_FOLDER)
    os.makedirs(imagesFolder, exist_ok=True)
    os.makedirs(masksFolder, exist_ok=True)
    for sample in samples:
        Image.fromarray(toUint8(sample.image)).save(os.path.join(imagesFolder, sample.id + '.png'))
        Image.fromarray(encode_mask(sample.mask, palette)).save(os.path.join(masksFolder, sample.id + '.png'))


def imageCounts(samples: Sequence[SegSample], numClasses: int) -> np.ndarray:
    '''Number of samples whose mask contains each class.'''
    counts = np.zeros(numClasses, dtype=np.int64)
    for sample in samples:
        counts[sample.classesPresent()] += 1
    return counts


def pixelCounts(samples: Sequence[SegSample], numClasses: int) -> np.ndarray:
    counts = np.zeros(numClasses, dtype=np.int64)
    for sample in samples:
        counts += np.bincount(sample.mask.reshape(-1), minlength=numClasses)[:numClasses]
    return counts
